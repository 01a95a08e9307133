"""Fooling ratio, transferability and smoothing-defense robustness of a UAP."""
import csv
import io
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from intriuap.autodiff import ContractError
from intriuap.model import predict

CLAMP_NOTE = "x+xi clamped to [0,1] before the model; clean pass unclamped"


class GeometryMismatch(ContractError):
    pass


@dataclass(frozen=True)
class GaussianFilter:
    sigma: float
    radius: int = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError(f"Gaussian sigma must be positive, got {self.sigma}")
        if self.radius is not None and int(self.radius) < 0:
            raise ContractError("Gaussian radius must be non-negative")

    @property
    def r(self):
        return int(self.radius) if self.radius is not None else int(np.ceil(3 * self.sigma))

    def describe(self):
        return f"gaussian(sigma={self.sigma:g},radius={self.r})"


@dataclass(frozen=True)
class MedianFilter:
    k: int

    def __post_init__(self):
        if int(self.k) < 1 or int(self.k) % 2 == 0:
            raise ContractError(f"median window must be a positive odd integer, got {self.k}")

    def describe(self):
        return f"median(k={int(self.k)})"


def parse_defense(text):
    """``gaussian:SIGMA[:RADIUS]``, ``median:K`` or ``none``."""
    parts = text.strip().lower().split(":")
    try:
        if parts[0] == "none" and len(parts) == 1:
            return None
        if parts[0] == "gaussian" and len(parts) in (2, 3):
            return GaussianFilter(float(parts[1]), int(parts[2]) if len(parts) == 3 else None)
        if parts[0] == "median" and len(parts) == 2:
            return MedianFilter(int(parts[1]))
    except ValueError as exc:
        raise ContractError(f"bad defense spec {text!r}: {exc}") from None
    raise ContractError(f"bad defense spec {text!r}; use gaussian:SIGMA[:RADIUS], median:K or none")


def _gaussian_taps(sigma, r):
    t = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return t / t.sum()


def apply_defense(image, flt):
    """Filter each channel of ``image`` (CHW or NCHW) with edge-replicate borders."""
    if flt is None:
        return image
    x = np.asarray(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ContractError(f"expected CHW or NCHW image, got shape {x.shape}")
    if isinstance(flt, MedianFilter):
        r = int(flt.k) // 2
        if r == 0:
            out = x.copy()
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
            win = sliding_window_view(xp, (flt.k, flt.k), axis=(2, 3))
            out = np.median(win.reshape(win.shape[:4] + (-1,)), axis=-1).astype(x.dtype)
    elif isinstance(flt, GaussianFilter):
        r = flt.r
        taps = _gaussian_taps(flt.sigma, r)
        xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge").astype(np.float64)
        h, w = x.shape[2:]
        rows = sum(t * xp[:, :, i:i + h, :] for i, t in enumerate(taps))
        out = sum(t * rows[:, :, :, j:j + w] for j, t in enumerate(taps)).astype(x.dtype)
    else:
        raise ContractError(f"unknown filter {flt!r}")
    return out[0] if single else out


@dataclass
class EvalReport:
    model_id: str
    uap_id: str
    n_images: int
    fooling_ratio: float
    clean_accuracy: float
    perturbed_accuracy: float
    defense: str = "none"
    clamp: str = CLAMP_NOTE

    def to_dict(self):
        return asdict(self)


def _check_geometry(model, xi):
    if tuple(np.shape(xi)) != tuple(model.input_shape):
        raise GeometryMismatch(
            f"xi shape {tuple(np.shape(xi))} does not match model input {model.input_shape}")


def _labels(model, x, batch_size):
    # argmax returns the lowest index among ties, on both passes alike
    return predict(model, x, batch_size).argmax(axis=1)


def fooling_ratio(model, xi, dataset, defense=None, model_id=None, uap_id="xi", batch_size=256):
    """Share of images whose predicted label changes under ``xi`` (and optional defense)."""
    _check_geometry(model, xi)
    if len(dataset) < 1:
        raise ContractError("dataset is empty")
    x = dataset.images.astype(model.dtype, copy=False)
    xi = np.asarray(xi, dtype=model.dtype)
    xp = np.clip(x + xi, 0.0, 1.0)
    clean = _labels(model, apply_defense(x, defense), batch_size)
    pert = _labels(model, apply_defense(xp, defense), batch_size)
    return EvalReport(model_id or model.name, uap_id, int(len(dataset)),
                      float(np.mean(clean != pert)),
                      float(np.mean(clean == dataset.labels)),
                      float(np.mean(pert == dataset.labels)),
                      defense.describe() if defense is not None else "none")


def noise_baseline(model, dataset, epsilon, seeds=(0, 1, 2, 3, 4), defense=None):
    """Fooling ratios of uniform noise in ``[-epsilon, epsilon]``, one per seed."""
    out = []
    for s in seeds:
        xi = np.random.default_rng([int(s), 7]).uniform(-epsilon, epsilon, model.input_shape)
        out.append(fooling_ratio(model, xi, dataset, defense, uap_id=f"noise-seed{s}"))
    return out


def transfer_matrix(models, uaps, dataset, uap_ids=None):
    """Fooling ratio of every UAP (rows) on every model (columns).

    Cells whose geometries disagree are None and the run continues.
    """
    uap_ids = uap_ids or [f"uap{i}" for i in range(len(uaps))]
    matrix = []
    for xi, uid in zip(uaps, uap_ids):
        row = []
        for m in models:
            try:
                row.append(fooling_ratio(m, xi, dataset, uap_id=uid).fooling_ratio)
            except GeometryMismatch:
                row.append(None)
        matrix.append(row)
    return matrix


def robustness_table(model, xi, dataset, filters, uap_id="xi"):
    """No-defense row followed by one row per filter, each with the defended pipeline."""
    rows = [fooling_ratio(model, xi, dataset, None, uap_id=uap_id)]
    rows += [fooling_ratio(model, xi, dataset, f, uap_id=uap_id) for f in filters]
    return rows


# -- report files ------------------------------------------------------------------

REPORT_FIELDS = ("model_id", "uap_id", "n_images", "fooling_ratio", "clean_accuracy",
                 "perturbed_accuracy", "defense", "clamp")


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        d = r.to_dict()
        w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in REPORT_FIELDS])
    return buf.getvalue()


def transfer_csv(matrix, uap_ids, model_ids):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["uap"] + list(model_ids))
    for uid, row in zip(uap_ids, matrix):
        w.writerow([uid] + ["unavailable" if v is None else repr(v) for v in row])
    return buf.getvalue()


def write_reports(reports, out_dir, stem="eval", manifest=None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{stem}.csv"), "w") as fh:
        fh.write(reports_csv(reports))
    doc = {"reports": [r.to_dict() for r in reports]}
    if manifest is not None:
        doc["run_manifest"] = manifest
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def image_ppm(img):
    """P6 bytes of a CHW image in [0, 1]."""
    img = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    h, w = img.shape[1:]
    return f"P6\n{w} {h}\n255\n".encode() + img.transpose(1, 2, 0).tobytes()


def dump_examples(xi, dataset, out_dir, count=4):
    """Clean and perturbed PPM pairs for the first ``count`` images."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(min(count, len(dataset))):
        x = dataset.images[i].astype(np.float64)
        for tag, img in (("clean", x), ("perturbed", np.clip(x + xi, 0, 1))):
            p = os.path.join(out_dir, f"example{i}_{tag}.ppm")
            with open(p, "wb") as fh:
                fh.write(image_ppm(img))
            paths.append(p)
    return paths
