"""Data-free universal perturbations by singular-vector alignment.

Each epoch runs a clean and a perturbed forward pass over a pseudo-input
batch, takes the difference ``delta_k`` of the two paths at the input of every
selected linear layer and maximizes ``sum_k |<delta_k, v_k>|`` where ``v_k``
is the layer's top right singular vector. The perturbation is clipped to the
l-infinity ball after each Adam step.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from intriuap import defaults, ntsr, ops
from intriuap.autodiff import ContractError, Tape, backward
from intriuap.model import forward
from intriuap.optim import Adam, StepLR
from intriuap.spectral import layer_singular_pairs

log = logging.getLogger(__name__)

INIT_KINDS = ("range", "gaussian", "uniform")
XI_INITS = ("zeros", "uniform_small")


class AttackNumericError(ArithmeticError):
    """Non-finite loss; carries the epoch and the first offending layer."""

    def __init__(self, epoch, layer_id, value):
        super().__init__(f"non-finite alignment at epoch {epoch}, layer {layer_id}: {value}")
        self.epoch = epoch
        self.layer_id = layer_id


_A = defaults.ATTACK


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = _A["epsilon"]
    epochs: int = _A["epochs"]
    learning_rate: float = _A["learning_rate"]
    lr_step: int = _A["lr_step"]
    lr_decay: float = _A["lr_decay"]
    init_data: str = _A["init_data"]
    range_jitter: float = _A["range_jitter"]
    channel_means: tuple = None
    gaussian: tuple = _A["gaussian"]
    uniform: tuple = _A["uniform"]
    prior_batch: int = _A["prior_batch"]
    xi_init: str = _A["xi_init"]
    xi_amplitude: float = _A["xi_amplitude"]
    layer_fraction: float = _A["layer_fraction"]
    seed: int = _A["seed"]
    resample_prior_each_epoch: bool = _A["resample_prior_each_epoch"]
    layer_weights: tuple = None

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ContractError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if not 0 < self.layer_fraction <= 1:
            raise ContractError(f"layer_fraction must be in (0, 1], got {self.layer_fraction}")
        if int(self.epochs) < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be non-negative")
        if self.init_data not in INIT_KINDS:
            raise ContractError(f"unknown init_data {self.init_data!r}; expected one of {INIT_KINDS}")
        if self.xi_init not in XI_INITS:
            raise ContractError(f"unknown xi_init {self.xi_init!r}; expected one of {XI_INITS}")
        if int(self.prior_batch) < 1:
            raise ContractError("prior_batch must be >= 1")
        if self.lr_step is not None and int(self.lr_step) < 1:
            raise ContractError("lr_step must be >= 1")

    @property
    def scheduler_step(self):
        return int(self.lr_step) if self.lr_step is not None else max(1, int(self.epochs) // 5)

    def to_dict(self):
        d = asdict(self)
        d["scheduler_step"] = self.scheduler_step
        return d


@dataclass
class AttackArtifact:
    xi: np.ndarray
    loss_trajectory: list
    config: AttackConfig
    per_layer_alignment: list
    layer_ids: list
    sigmas: list
    budget_trace: list = field(default_factory=list)
    model_name: str = ""

    @property
    def final_objective(self):
        return float(sum(self.per_layer_alignment))

    def report(self):
        return {
            "model": self.model_name,
            "config": self.config.to_dict(),
            "layer_ids": list(self.layer_ids),
            "sigmas": [float(s) for s in self.sigmas],
            "loss_trajectory": [float(v) for v in self.loss_trajectory],
            "per_layer_alignment": [float(v) for v in self.per_layer_alignment],
            "final_objective": self.final_objective,
            "budget_trace": [float(v) for v in self.budget_trace],
            "xi_linf": float(np.max(np.abs(self.xi))),
        }


def default_channel_means(channels):
    if channels == 3:
        return defaults.IMAGENET_MEAN
    if channels == 1:
        return defaults.MNIST_MEAN
    return (0.5,) * channels


def make_init_data(kind, input_shape, seed=0, batch=None, channel_means=None, jitter=None,
                   gaussian=None, uniform=None):
    """Pseudo-input for the data-free attack.

    Returns ``input_shape`` when ``batch`` is None, else ``(batch, *input_shape)``.
    ``range``: per-channel mean plus a per-element uniform offset in
    ``[-jitter, jitter]``, clamped to [0, 1]. ``gaussian``: N(mu, sigma^2) clipped
    to [0, 1]. ``uniform``: U(a, b).
    """
    input_shape = tuple(int(s) for s in input_shape)
    shape = input_shape if batch is None else (int(batch),) + input_shape
    rng = np.random.default_rng(seed)
    if kind == "range":
        means = tuple(channel_means) if channel_means is not None else default_channel_means(input_shape[0])
        if len(means) != input_shape[0]:
            raise ContractError(f"{len(means)} channel means for {input_shape[0]} channels")
        jitter = _A["range_jitter"] if jitter is None else jitter
        base = np.asarray(means, dtype=np.float64).reshape((-1,) + (1,) * (len(input_shape) - 1))
        x = base + rng.uniform(-jitter, jitter, shape)
        return np.clip(x, 0.0, 1.0)
    if kind == "gaussian":
        mu, sigma = gaussian if gaussian is not None else _A["gaussian"]
        if sigma < 0:
            raise ContractError("gaussian sigma must be non-negative")
        return np.clip(mu + sigma * rng.standard_normal(shape), 0.0, 1.0)
    if kind == "uniform":
        a, b = uniform if uniform is not None else _A["uniform"]
        if b < a:
            raise ContractError("uniform prior needs a <= b")
        return rng.uniform(a, b, shape)
    raise ContractError(f"unknown init kind {kind!r}; expected one of {INIT_KINDS}")


def selected_layer_count(layer_count, fraction):
    if not 0 < fraction <= 1:
        raise ContractError(f"layer_fraction must be in (0, 1], got {fraction}")
    # guard against 0.5 * 6 = 3.0000000000000004
    return max(1, min(layer_count, math.ceil(round(fraction * layer_count, 9))))


def propagate_delta(model, x, xi, layers=None, clean=None):
    """Perturbation differences at the inputs of the first ``layers`` linear layers.

    ``x`` is a batch ``(N, *input_shape)`` or a single input; ``xi`` is a Var
    or array of the input geometry, shared by the whole batch. Both paths run
    through the real nonlinearities. ``clean`` may pass precomputed clean
    snapshot arrays.
    """
    x = np.asarray(x)
    if x.shape == model.input_shape:
        x = x[None]
    if tuple(x.shape[1:]) != model.input_shape:
        raise ops.DimensionError(f"x shape {x.shape} does not match model input {model.input_shape}")
    xi_shape = tuple(getattr(xi, "shape", np.shape(xi)))
    if xi_shape != model.input_shape:
        raise ops.DimensionError(f"xi shape {xi_shape} does not match model input {model.input_shape}")
    upto = len(model.linear_layer_order) if layers is None else int(layers)
    if clean is None:
        clean = [s.value for s in forward(model, x, upto=upto).snapshots]
    pert = forward(model, ops.add(x, ops.tile_batch(xi, x.shape[0])), upto=upto).snapshots
    return [ops.sub(p, c) for p, c in zip(pert, clean)]


def alignment_terms(deltas, vectors):
    """Batch-mean ``|<delta_k, v_k>|`` per layer, as Vars."""
    if len(deltas) != len(vectors):
        raise ContractError(f"{len(deltas)} deltas for {len(vectors)} singular vectors")
    terms = []
    for d, v in zip(deltas, vectors):
        n = d.value.shape[0]
        terms.append(ops.scale(ops.total(ops.absolute(ops.sample_dot(d, v))), 1.0 / n))
    return terms


def alignment_loss(deltas, pairs, layer_fraction=1.0, weights=None):
    """``-sum_k w_k |<delta_k, v_k>|`` over the first ``ceil(p * len(pairs))`` layers.

    ``deltas`` carry a leading batch axis; the batch mean is taken per layer.
    Returns ``(loss, terms)``.
    """
    k = selected_layer_count(len(pairs), layer_fraction)
    if len(deltas) < k:
        raise ContractError(f"need {k} deltas, got {len(deltas)}")
    vectors = [p.v_max if hasattr(p, "v_max") else p for p in pairs[:k]]
    terms = alignment_terms(deltas[:k], vectors)
    weights = [1.0] * k if weights is None else list(weights)[:k]
    if len(weights) != k:
        raise ContractError(f"{len(weights)} layer weights for {k} layers")
    acc = None
    for w, t in zip(weights, terms):
        t = t if w == 1.0 else ops.scale(t, w)
        acc = t if acc is None else ops.add(acc, t)
    return ops.scale(acc, -1.0), terms


def _init_xi(config, shape, dtype):
    if config.xi_init == "zeros":
        return np.zeros(shape, dtype=dtype)
    rng = np.random.default_rng([config.seed, 1])
    return rng.uniform(-config.xi_amplitude, config.xi_amplitude, shape).astype(dtype)


def _prior(config, model, epoch):
    seed = [config.seed, 0, epoch] if config.resample_prior_each_epoch else [config.seed, 0]
    return make_init_data(config.init_data, model.input_shape, seed, config.prior_batch,
                          config.channel_means, config.range_jitter, config.gaussian,
                          config.uniform)


def run_attack(model, config=None, pairs=None, dtype=np.float64):
    """Optimize a universal perturbation for ``model``; returns an :class:`AttackArtifact`.

    ``pairs`` are singular pairs in linear-layer order (at least the selected
    prefix); they are computed when omitted.
    """
    config = config or AttackConfig()
    m = model.astype(dtype)
    layer_ids = list(m.linear_layer_order)
    k = selected_layer_count(len(layer_ids), config.layer_fraction)
    if pairs is None:
        pairs = layer_singular_pairs(m, layer_ids[:k])
    pairs = list(pairs)[:k]
    if [p.layer_id for p in pairs] != layer_ids[:k]:
        raise ContractError("singular pairs are not aligned with linear_layer_order")
    vectors = [np.asarray(p.v_max, dtype=dtype) for p in pairs]

    eps = float(config.epsilon)
    xi = np.clip(_init_xi(config, m.input_shape, dtype), -eps, eps)
    opt = Adam(lr=config.learning_rate, betas=_A["betas"], eps=_A["adam_eps"])
    sched = StepLR(opt, config.scheduler_step, config.lr_decay)
    x = clean = None
    trajectory, budget = [], []
    for epoch in range(int(config.epochs)):
        if x is None or config.resample_prior_each_epoch:
            x = _prior(config, m, epoch).astype(dtype)
            clean = [s.value for s in forward(m, x, upto=k).snapshots]
        tape = Tape()
        xv = tape.leaf(xi)
        deltas = propagate_delta(m, x, xv, k, clean)
        loss, terms = alignment_loss(deltas, vectors, 1.0, config.layer_weights)
        _check_terms(epoch, layer_ids, terms, deltas)
        trajectory.append(-float(loss.value))
        grad = backward(tape, loss, [xv])[xv.id]
        params = {"xi": xi}
        opt.step(params, {"xi": grad})
        np.clip(xi, -eps, eps, out=xi)
        linf = float(np.max(np.abs(xi)))
        if linf > eps:
            raise AssertionError(f"budget violated at epoch {epoch}: {linf} > {eps}")
        budget.append(linf)
        sched.step()

    deltas = propagate_delta(m, x, xi, k, clean)
    final = [float(t.value) for t in alignment_terms(deltas, vectors)]
    return AttackArtifact(xi.copy(), trajectory, config, final, layer_ids[:k],
                          [p.sigma_max for p in pairs], budget, m.name)


def _check_terms(epoch, layer_ids, terms, deltas):
    for lid, t, d in zip(layer_ids, terms, deltas):
        val = float(t.value)
        if not np.isfinite(val):
            raise AttackNumericError(epoch, lid, val)
        # |<d, v>| <= |d| for unit v, per sample and so for the batch mean
        norm = float(np.linalg.norm(d.value.reshape(d.value.shape[0], -1), axis=1).mean())
        if val > norm * (1 + 1e-9) + 1e-300:
            raise AssertionError(f"Cauchy-Schwarz violated at epoch {epoch}, layer {lid}")


def semi_whitebox_sweep(model, config=None, fractions=(0.25, 0.5, 0.75, 1.0), pairs=None):
    """One attack per layer fraction with shared seed and prior.

    Returns ``(artifacts, table)``; ``table`` has one row per fraction.
    """
    config = config or AttackConfig()
    fractions = [float(f) for f in fractions]
    for f in fractions:
        if not 0 < f <= 1:
            raise ContractError(f"fraction {f} outside (0, 1]")
    if pairs is None:
        pairs = layer_singular_pairs(model)
    artifacts, table = {}, []
    for f in fractions:
        art = run_attack(model, replace(config, layer_fraction=f), pairs)
        artifacts[f] = art
        table.append({"layer_fraction": f, "layers": len(art.layer_ids),
                      "final_objective": art.final_objective,
                      "final_loss": -art.final_objective})
    return artifacts, table


# -- artifact files --------------------------------------------------------------

def to_ppm(xi):
    """Binary P6 image of ``xi`` min-max normalized to [0, 255]; grey inputs are replicated."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.ndim != 3:
        raise ContractError(f"expected CHW tensor, got shape {xi.shape}")
    lo, hi = float(xi.min()), float(xi.max())
    img = np.full(xi.shape, 128.0) if hi == lo else (xi - lo) / (hi - lo) * 255.0
    img = np.rint(img).astype(np.uint8)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    elif img.shape[0] != 3:
        img = np.repeat(img.mean(axis=0, keepdims=True).astype(np.uint8), 3, axis=0)
    h, w = img.shape[1:]
    return f"P6\n{w} {h}\n255\n".encode() + img.transpose(1, 2, 0).tobytes()


def save_artifact(artifact, out_dir, manifest=None):
    """Write ``xi.ntsr``, ``report.json`` and ``xi.ppm`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    ntsr.save(os.path.join(out_dir, "xi.ntsr"), artifact.xi)
    rep = artifact.report()
    if manifest is not None:
        rep["run_manifest"] = manifest
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "xi.ppm"), "wb") as fh:
        fh.write(to_ppm(artifact.xi))
    return out_dir


def load_xi(path):
    """Perturbation tensor from an NTSR1 file or an artifact directory."""
    if os.path.isdir(path):
        path = os.path.join(path, "xi.ntsr")
    return ntsr.load(path)
