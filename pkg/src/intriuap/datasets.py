"""Dataset readers: MNIST-layout IDX files and NTSR1 tensor directories."""
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from intriuap import ntsr

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures")
MNIST_FIXTURE = os.path.join(FIXTURE_DIR, "mnist5k")

_IDX_DTYPES = {
    0x08: np.dtype(np.uint8), 0x09: np.dtype(np.int8), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images in [0, 1] as ``(N, C, H, W)`` plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __len__(self):
        return len(self.labels)

    @property
    def class_count(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.name)


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path):
    """Read an IDX file (optionally gzip-compressed) into a numpy array."""
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise DatasetError(f"{path}: not an IDX file")
    code, ndim = buf[2], buf[3]
    if code not in _IDX_DTYPES:
        raise DatasetError(f"{path}: unknown IDX type code {code:#x}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dt = _IDX_DTYPES[code]
    off = 4 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise DatasetError(f"{path}: payload does not match dims {dims}")
    return np.frombuffer(buf, dtype=dt, offset=off, count=count).reshape(dims)


def write_idx(path, array, compress=None):
    a = np.asarray(array)
    if a.dtype not in _IDX_CODES:
        raise DatasetError(f"IDX writer supports uint8/int8, got {a.dtype}")
    data = struct.pack(">BBBB", 0, 0, _IDX_CODES[a.dtype], a.ndim)
    data += struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    if compress is None:
        compress = path.endswith(".gz")
    if compress:
        # mtime=0 keeps the file byte-reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(data)
    else:
        with open(path, "wb") as fh:
            fh.write(data)


def _find(root, stem):
    for name in (stem, stem + ".gz"):
        p = os.path.join(root, name)
        if os.path.exists(p):
            return p
    return None


_SPLITS = {"train": "train", "test": "t10k"}


def load_idx_split(root, split):
    prefix = _SPLITS[split]
    img = _find(root, f"{prefix}-images-idx3-ubyte")
    lab = _find(root, f"{prefix}-labels-idx1-ubyte")
    if img is None or lab is None:
        raise DatasetError(f"{root}: missing {prefix}-images/labels IDX files")
    images = read_idx(img)
    labels = read_idx(lab)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DatasetError(f"{root}: inconsistent IDX shapes {images.shape} / {labels.shape}")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), f"{os.path.basename(root)}:{split}")


def save_tensor_dir(root, ds):
    """Write ``images.ntsr`` and ``labels.ntsr`` (labels stored as float64)."""
    os.makedirs(root, exist_ok=True)
    ntsr.save(os.path.join(root, "images.ntsr"), ds.images.astype(np.float32))
    ntsr.save(os.path.join(root, "labels.ntsr"), ds.labels.astype(np.float64))


def load_tensor_dir(root):
    images = ntsr.load(os.path.join(root, "images.ntsr"))
    labels = ntsr.load(os.path.join(root, "labels.ntsr"))
    if images.ndim != 4 or labels.ndim != 1 or len(images) != len(labels):
        raise DatasetError(f"{root}: inconsistent tensor shapes {images.shape} / {labels.shape}")
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise DatasetError(f"{root}: labels must be non-negative integers")
    return Dataset(images, labels.astype(np.int64), os.path.basename(root))


def load_dataset(path, split="test"):
    """Load a split from an IDX directory or an NTSR tensor directory.

    A tensor directory may hold ``train/`` and ``test/`` subdirectories or
    the two blobs directly.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(path)
    if _find(path, f"{_SPLITS[split]}-images-idx3-ubyte"):
        return load_idx_split(path, split)
    sub = os.path.join(path, split)
    if os.path.exists(os.path.join(sub, "images.ntsr")):
        return load_tensor_dir(sub)
    if os.path.exists(os.path.join(path, "images.ntsr")):
        return load_tensor_dir(path)
    raise DatasetError(f"{path}: no IDX or NTSR dataset found for split {split!r}")


def mnist_fixture(split="test"):
    """The bundled 5000-image MNIST subset (4000 train / 1000 test)."""
    return load_idx_split(MNIST_FIXTURE, split)


def toy_blobs(n_per_class=200, class_count=2, shape=(1, 4, 4), separation=0.6, spread=0.05,
              seed=0):
    """Linearly separable blobs: class ``k`` is centred on its own constant image."""
    rng = np.random.default_rng(seed)
    centers = 0.5 + separation * (np.arange(class_count) / max(class_count - 1, 1) - 0.5)
    xs, ys = [], []
    for k in range(class_count):
        xs.append(np.clip(centers[k] + spread * rng.standard_normal((n_per_class,) + tuple(shape)), 0, 1))
        ys.append(np.full(n_per_class, k))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys).astype(np.int64)
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], "toy_blobs")
