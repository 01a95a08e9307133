"""Train and write the reference fixture models.

    python tools/build_fixtures.py

Produces ``fixtures/smallcnn-mnist`` and ``fixtures/smallres-mnist`` (manifest +
NTSR1 blobs) from the bundled MNIST subset, plus a golden input/logits pair per
model computed on the float64 path.
"""
import json
import os

import numpy as np
from threadpoolctl import threadpool_limits

from intriuap import ntsr, zoo
from intriuap.datasets import FIXTURE_DIR, mnist_fixture
from intriuap.model import forward, save_model
from intriuap.train import TrainConfig, train


def build(arch, seed=0):
    cfg = TrainConfig(seed=seed, dataset="mnist5k")
    res = train(zoo.build(arch, seed=seed), mnist_fixture("train"), cfg, mnist_fixture("test"))
    model = res.model
    out = os.path.join(FIXTURE_DIR, f"{arch}-mnist")
    meta = dict(model.metadata, train_config=res.config, test_accuracy=res.final_accuracy,
                accuracy_history=res.test_accuracy)
    from dataclasses import replace
    model = replace(model, name=f"{arch}-mnist", metadata=meta)
    save_model(model, os.path.join(out, "model.json"))
    x = mnist_fixture("test").images[:4].astype(np.float64)
    logits = forward(model.astype(np.float64), x).logits.value
    ntsr.save(os.path.join(out, "golden_input.ntsr"), x)
    ntsr.save(os.path.join(out, "golden_logits.ntsr"), logits)
    print(arch, "test accuracy", res.final_accuracy)
    return res


if __name__ == "__main__":
    with threadpool_limits(1):
        summary = {a: build(a).final_accuracy for a in zoo.ARCHITECTURES}
    print(json.dumps(summary))
