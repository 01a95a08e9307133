import json
import math

import numpy as np
import pytest

from conftest import linear_model
from intriuap import ops
from intriuap.attack import (AttackConfig, AttackNumericError, alignment_loss, load_xi,
                             make_init_data, propagate_delta, run_attack, save_artifact,
                             selected_layer_count, semi_whitebox_sweep, to_ppm)
from intriuap.autodiff import ContractError, Tape
from intriuap.model import build_model
from intriuap.spectral import SingularPair, layer_singular_pairs


def test_gaussian_sigma_zero_is_constant():
    x = make_init_data("gaussian", (3, 4, 4), gaussian=(0.45, 0.0))
    assert np.all(x == 0.45)


def test_uniform_prior_statistics():
    x = make_init_data("uniform", (1, 100, 1000), seed=3)
    assert x.min() >= 0.40 and x.max() <= 0.60
    assert abs(x.mean() - 0.50) <= 0.01


def test_range_prior_channel_means():
    x = make_init_data("range", (3, 5, 5), jitter=0.0)
    assert np.allclose(x.mean(axis=(1, 2)), [0.485, 0.456, 0.406], atol=0)
    y = make_init_data("range", (3, 5, 5), seed=1, batch=2)
    assert y.shape == (2, 3, 5, 5) and y.min() >= 0 and y.max() <= 1
    assert np.abs(y - np.array([0.485, 0.456, 0.406])[:, None, None]).max() <= 0.2 + 1e-12


def test_init_errors():
    with pytest.raises(ContractError):
        make_init_data("imagenet", (1, 2, 2))
    with pytest.raises(ContractError):
        make_init_data("range", (2, 2, 2), channel_means=(0.5,))


@pytest.mark.parametrize("bad", [dict(epsilon=0), dict(epsilon=1.5), dict(layer_fraction=0),
                                 dict(layer_fraction=1.2), dict(epochs=0), dict(init_data="x"),
                                 dict(xi_init="ones"), dict(prior_batch=0)])
def test_config_invariants(bad):
    with pytest.raises(ContractError):
        AttackConfig(**bad)


def test_layer_count_rounding():
    assert [selected_layer_count(7, p) for p in (0.25, 0.5, 0.75, 1.0)] == [2, 4, 6, 7]
    assert selected_layer_count(6, 0.5) == 3
    assert selected_layer_count(10, 0.3) == 3


def test_zero_xi_gives_zero_deltas(smallcnn):
    x = make_init_data("range", smallcnn.input_shape, batch=2)
    deltas = propagate_delta(smallcnn, x, np.zeros(smallcnn.input_shape))
    assert len(deltas) == len(smallcnn.linear_layer_order)
    assert all(np.all(d.value == 0) for d in deltas)


def test_linear_model_recursion():
    # no nonlinearity: delta_{k+1} = W_k delta_k exactly, whatever x is
    from intriuap.linops import view_linear_layer
    m = linear_model(seed=2)
    rng = np.random.default_rng(0)
    xi = rng.standard_normal(m.input_shape) * 0.1
    views = [view_linear_layer(m, lid) for lid in m.linear_layer_order]
    expect = [xi]
    for v in views[:-1]:
        nxt = v.apply(expect[-1])
        expect.append(nxt.reshape(-1) if v.kind == "BatchNorm" else nxt)
    for x in (rng.random((1,) + m.input_shape), 5 * rng.random((1,) + m.input_shape)):
        got = propagate_delta(m, x, xi)
        for d, e in zip(got, expect):
            assert np.allclose(d.value[0], e, atol=1e-12)


def test_alignment_loss_examples():
    v = np.array([0.6, 0.8])
    pair = SingularPair("a", 1.0, v, 1, 0.0)
    loss, _ = alignment_loss([ops.as_var(np.zeros((1, 2)))], [pair])
    assert float(loss.value) == 0.0
    loss, _ = alignment_loss([ops.as_var((2 * v)[None])], [pair])
    assert float(loss.value) == pytest.approx(-2.0)
    loss, _ = alignment_loss([ops.as_var(np.array([[0.8, -0.6]]))], [pair])
    assert float(loss.value) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ContractError):
        alignment_loss([ops.as_var(np.zeros((1, 2)))], [pair, pair])


def test_alignment_loss_weights_and_fraction():
    v = np.array([1.0, 0.0])
    pairs = [SingularPair(str(i), 1.0, v, 1, 0.0) for i in range(4)]
    deltas = [ops.as_var(np.array([[float(i + 1), 0.0]])) for i in range(4)]
    loss, terms = alignment_loss(deltas, pairs, 0.5)
    assert len(terms) == 2 and float(loss.value) == -3.0
    loss, _ = alignment_loss(deltas, pairs, 1.0, weights=(1, 0, 0, 2))
    assert float(loss.value) == -9.0


def _fc_only(seed=0):
    rng = np.random.default_rng(seed)
    specs = [dict(id="flat", kind="Flatten", inputs=["input"]),
             dict(id="fc", kind="FullyConnected", inputs=["flat"],
                  params=dict(weight=rng.standard_normal((3, 8)), bias=rng.standard_normal(3)))]
    return build_model("fc-only", specs, (2, 2, 2), 3)


def test_one_step_from_zero_moves_along_singular_direction():
    m = _fc_only()
    pairs = layer_singular_pairs(m)
    v = pairs[0].v_max
    cfg = AttackConfig(epsilon=1.0, epochs=1, learning_rate=0.01, prior_batch=1)
    art = run_attack(m, cfg, pairs)
    # first Adam step is lr * sign(grad); grad of -|<xi, v>| at 0 (subgradient +1) is -v
    assert np.allclose(art.xi.reshape(-1), 0.01 * np.sign(v).reshape(-1), rtol=1e-5)
    assert art.loss_trajectory == [0.0]


def test_zero_learning_rate_keeps_init():
    m = _fc_only()
    cfg = AttackConfig(epsilon=5e-4, epochs=1, learning_rate=0.0, xi_init="uniform_small",
                       xi_amplitude=1e-3)
    art = run_attack(m, cfg)
    init = np.random.default_rng([cfg.seed, 1]).uniform(-1e-3, 1e-3, m.input_shape)
    assert np.array_equal(art.xi, np.clip(init, -5e-4, 5e-4))


def test_nan_loss_aborts_with_diagnostic():
    m = _fc_only()
    pairs = layer_singular_pairs(m)
    pairs[0].v_max = np.full(m.input_shape, np.nan)
    with pytest.raises(AttackNumericError) as info:
        run_attack(m, AttackConfig(epochs=2), pairs)
    assert info.value.epoch == 0 and info.value.layer_id == "fc"


def test_misaligned_pairs_rejected(smallcnn, smallcnn_pairs):
    with pytest.raises(ContractError):
        run_attack(smallcnn, AttackConfig(epochs=1), smallcnn_pairs[1:])


@pytest.fixture(scope="module")
def default_run(smallcnn, smallcnn_pairs):
    return run_attack(smallcnn, AttackConfig(), smallcnn_pairs)


def test_default_run_invariants(default_run):
    cfg = default_run.config
    assert len(default_run.loss_trajectory) == cfg.epochs
    assert np.max(np.abs(default_run.xi)) <= cfg.epsilon
    assert all(b <= cfg.epsilon for b in default_run.budget_trace)
    assert len(default_run.per_layer_alignment) == 7


def test_default_run_objective_grows(default_run):
    t = default_run.loss_trajectory
    assert t[0] == 0.0  # zeros init: every delta vanishes at epoch 1
    assert default_run.final_objective >= 5 * t[0]
    assert default_run.final_objective > 4 * t[1]


def test_default_run_regression(default_run, regression):
    assert default_run.final_objective == pytest.approx(
        regression["default_attack_final_objective"], rel=1e-6)


def test_default_run_smoothed_trend(default_run):
    t = np.asarray(default_run.loss_trajectory)
    smooth = np.convolve(t, np.ones(5) / 5, mode="valid")
    tail = smooth[len(smooth) - int(0.8 * len(t)):]
    assert np.all(np.diff(tail) >= 0)


def test_resampled_prior_runs(smallcnn, smallcnn_pairs):
    art = run_attack(smallcnn, AttackConfig(epochs=3, resample_prior_each_epoch=True,
                                            init_data="gaussian"), smallcnn_pairs)
    assert len(art.loss_trajectory) == 3 and np.max(np.abs(art.xi)) <= art.config.epsilon


def test_sweep_full_fraction_matches_run(smallcnn, smallcnn_pairs):
    cfg = AttackConfig(epochs=5)
    arts, table = semi_whitebox_sweep(smallcnn, cfg, (0.25, 0.5, 0.75, 1.0), smallcnn_pairs)
    assert len(arts) == 4 and [r["layers"] for r in table] == [2, 4, 6, 7]
    ref = run_attack(smallcnn, cfg, smallcnn_pairs)
    assert np.array_equal(arts[1.0].xi, ref.xi)
    assert arts[1.0].loss_trajectory == ref.loss_trajectory
    with pytest.raises(ContractError):
        semi_whitebox_sweep(smallcnn, cfg, (0.0,), smallcnn_pairs)


def test_artifact_files(tmp_path, smallcnn, smallcnn_pairs):
    art = run_attack(smallcnn, AttackConfig(epochs=2), smallcnn_pairs)
    save_artifact(art, str(tmp_path))
    assert np.array_equal(load_xi(str(tmp_path)), art.xi)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["loss_trajectory"] == art.loss_trajectory
    assert rep["config"]["scheduler_step"] == 1
    ppm = (tmp_path / "xi.ppm").read_bytes()
    assert ppm.startswith(b"P6\n28 28\n255\n") and len(ppm) == len(b"P6\n28 28\n255\n") + 28 * 28 * 3


def test_ppm_normalization():
    xi = np.array([[[-1.0, 0.0], [1.0, 1.0]]])
    body = to_ppm(xi)[len(b"P6\n2 2\n255\n"):]
    assert list(body[::3]) == [0, 128, 255, 255]
    assert set(to_ppm(np.zeros((1, 2, 2)))[-12:]) == {128}


def test_delta_gradient_flows_to_xi(smallcnn):
    t = Tape()
    xi = t.leaf(np.full(smallcnn.input_shape, 0.01))
    x = make_init_data("range", smallcnn.input_shape, batch=1)
    d = propagate_delta(smallcnn, x, xi, layers=3)
    assert len(d) == 3 and all(n.requires_grad for n in d)
    assert math.isclose(float(np.abs(d[0].value).max()), 0.01, rel_tol=1e-6)
    with pytest.raises(ops.DimensionError):
        propagate_delta(smallcnn, x, np.zeros((1, 27, 28)))
