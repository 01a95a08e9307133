"""Write the bundled MNIST subset as IDX files.

The sandbox this project is developed in has no route to the canonical MNIST
mirrors, so the fixture is taken from the 5000-sample MNIST subset shipped in
mlxtend (``pip install mlxtend``). It is split 4000/1000 with a fixed,
class-stratified permutation and written in the standard IDX layout.

    python tools/build_mnist_fixture.py [OUT_DIR]
"""
import os
import sys

import numpy as np

from intriuap.datasets import MNIST_FIXTURE, write_idx


def main(out=MNIST_FIXTURE):
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = x.astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    rng = np.random.default_rng(20240101)
    train_idx, test_idx = [], []
    for k in range(10):
        idx = rng.permutation(np.flatnonzero(y == k))
        n_test = len(idx) // 5
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    os.makedirs(out, exist_ok=True)
    write_idx(os.path.join(out, "train-images-idx3-ubyte.gz"), x[train_idx])
    write_idx(os.path.join(out, "train-labels-idx1-ubyte.gz"), y[train_idx])
    write_idx(os.path.join(out, "t10k-images-idx3-ubyte.gz"), x[test_idx])
    write_idx(os.path.join(out, "t10k-labels-idx1-ubyte.gz"), y[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
