"""Data-driven reference UAP: how far can any universal perturbation go?

    python tools/uap_upper_bound.py [--eps 0.1 0.15 0.2 0.3]

Optimizes one perturbation that maximizes the cross-entropy of the fixture
smallcnn's own predictions on 512 real training images (Adam, clipped to the
l-inf ball), then reports its fooling ratio on the test split next to uniform
noise. This uses real data and labels, which the data-free attack never sees,
so it is a practical ceiling for the data-free result at the same budget.
"""
import argparse

import numpy as np
from threadpoolctl import threadpool_limits

from intriuap import ops
from intriuap.autodiff import Tape, backward
from intriuap.datasets import FIXTURE_DIR, mnist_fixture
from intriuap.evaluate import fooling_ratio, noise_baseline
from intriuap.model import forward, load_model, predict
from intriuap.optim import Adam


def reference_uap(model, images, eps, steps=150, batch=64, lr=0.01):
    labels = predict(model, images).argmax(axis=1)
    xi = np.zeros(model.input_shape)
    opt = Adam(lr)
    for it in range(steps):
        s = (it * batch) % len(images)
        x, y = images[s:s + batch], labels[s:s + batch]
        tape = Tape()
        xv = tape.leaf(xi)
        logits = forward(model, ops.add(x, ops.tile_batch(xv, len(x)))).logits
        loss = ops.scale(ops.softmax_cross_entropy(logits, y), -1.0)
        opt.step({"xi": xi}, {"xi": backward(tape, loss, [xv])[xv.id]})
        np.clip(xi, -eps, eps, out=xi)
    return xi


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eps", type=float, nargs="+", default=[0.1, 0.15, 0.2, 0.3])
    args = ap.parse_args(argv)
    model = load_model(f"{FIXTURE_DIR}/smallcnn-mnist/model.json", np.float64)
    train = mnist_fixture("train").images[:512].astype(np.float64)
    test = mnist_fixture("test")
    print("eps    reference_uap  uniform_noise")
    for eps in args.eps:
        fr = fooling_ratio(model, reference_uap(model, train, eps), test).fooling_ratio
        nz = np.mean([r.fooling_ratio for r in noise_baseline(model, test, eps, (0, 1, 2))])
        print(f"{eps:<6} {fr:<14.3f} {nz:.3f}")


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
