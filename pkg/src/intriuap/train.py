"""Desk-scale victim training (cross-entropy, mini-batches, BatchNorm batch stats)."""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from intriuap import ops
from intriuap.autodiff import Tape, backward
from intriuap.model import forward, predict
from intriuap.optim import SGD, Adam, StepLR

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 0.002
    optimizer: str = "adam"  # "adam" or "sgd" (momentum 0.9)
    seed: int = 0
    bn_momentum: float = 0.1
    lr_step: int = 3
    lr_decay: float = 0.5
    dataset: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    model: object
    train_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def final_accuracy(self):
        return self.test_accuracy[-1] if self.test_accuracy else None


def evaluate_accuracy(model, dataset, batch_size=256):
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        return 0.0
    logits = predict(model, dataset.images.astype(model.dtype), batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def train(model, train_set, config=None, test_set=None):
    """Train ``model`` with cross-entropy; returns a :class:`TrainResult`.

    With ``epochs=0`` the untouched model is evaluated once.
    """
    config = config or TrainConfig()
    if train_set.class_count > model.class_count:
        raise ValueError(
            f"dataset has {train_set.class_count} classes, model predicts {model.class_count}")
    rng = np.random.default_rng(config.seed)
    dtype = model.dtype
    params = {k: v.copy() for k, v in model.param_items()}
    bn_nodes = [n for n in model.nodes if n.kind == "BatchNorm"]
    trainable = [k for k in params if k[1] not in ("moving_mean", "moving_var")]
    opt = Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate, 0.9)
    sched = StepLR(opt, config.lr_step, config.lr_decay)
    x_all = train_set.images.astype(dtype)
    y_all = train_set.labels
    n = len(y_all)
    result = TrainResult(model, config=asdict(config))
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            if len(idx) < 2 and bn_nodes:
                continue  # batch statistics need two samples
            tape = Tape()
            pvars = {k: tape.leaf(params[k], requires_grad=k in trainable) for k in params}
            out = forward(model, x_all[idx], pvars=pvars, bn_train=True)
            loss = ops.softmax_cross_entropy(out.logits, y_all[idx])
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise TrainingDiverged(f"loss became {lv} at epoch {epoch + 1}, batch {s // config.batch_size}")
            losses.append(lv)
            grads = backward(tape, loss, [pvars[k] for k in trainable])
            opt.step(params, {k: grads[pvars[k].id] for k in trainable})
            m = config.bn_momentum
            for node in bn_nodes:
                mu, var = out.bn_stats[node.id]
                rm, rv = params[(node.id, "moving_mean")], params[(node.id, "moving_var")]
                rm *= 1 - m
                rm += (m * mu).astype(dtype)
                rv *= 1 - m
                rv += (m * var).astype(dtype)
        sched.step()
        current = model.with_params(params)
        result.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if test_set is not None:
            result.test_accuracy.append(evaluate_accuracy(current, test_set))
        log.info("epoch %d loss %.4f acc %s", epoch + 1, result.train_loss[-1],
                 result.test_accuracy[-1] if result.test_accuracy else "-")
    result.model = model.with_params(params)
    if config.epochs == 0 and test_set is not None:
        result.test_accuracy.append(evaluate_accuracy(result.model, test_set))
    return result
