import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intriuap import ops
from intriuap.autodiff import ContractError, Tape, Var, backward, grad_check


def naive_conv(x, w, stride, pad, circular=False):
    """Direct sliding-window cross-correlation."""
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    mode = "wrap" if circular else "constant"
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=mode)
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


@pytest.mark.parametrize("stride,pad,circular", [(1, 0, False), (1, 1, False), (2, 1, False),
                                                 (1, 1, True), (2, 2, True)])
def test_conv_matches_sliding_window(stride, pad, circular):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    p = ops.Padding.circular(pad) if circular else ops.Padding.zero(pad)
    got = ops.conv2d(x, w, stride=stride, padding=p).value
    assert np.allclose(got, naive_conv(x, w, stride, pad, circular), atol=1e-12)


def test_conv_bias_and_errors():
    x = np.zeros((1, 2, 4, 4))
    out = ops.conv2d(x, np.zeros((3, 2, 3, 3)), bias=np.array([1.0, 2.0, 3.0])).value
    assert out.shape == (1, 3, 2, 2) and out[0, 2].tolist() == [[3.0, 3.0], [3.0, 3.0]]
    with pytest.raises(ops.DimensionError):
        ops.conv2d(x, np.zeros((3, 1, 3, 3)))
    with pytest.raises(ops.DimensionError):
        ops.conv2d(x, np.zeros((3, 2, 5, 5)))
    with pytest.raises(ops.InvalidParameter):
        ops.Padding("reflect", 1, 1)


def test_batchnorm_inference_values():
    x = np.full((1, 1, 1, 1), 3.0)
    y = ops.batchnorm_inference(x, np.array([2.0]), np.array([0.0]), np.array([1.0]),
                                np.array([3.0]), eps=1e-5).value
    assert np.isclose(y.item(), 2 * 2 / np.sqrt(3 + 1e-5), rtol=1e-12)
    ident = ops.batchnorm_inference(np.arange(4.0).reshape(1, 1, 2, 2), np.ones(1), np.zeros(1),
                                    np.zeros(1), np.ones(1), eps=0.0).value
    assert ident.ravel().tolist() == [0.0, 1.0, 2.0, 3.0]
    with pytest.raises(ops.InvalidParameter):
        ops.batchnorm_inference(x, np.ones(1), np.zeros(1), np.zeros(1), np.array([-1.0]))
    with pytest.raises(ops.InvalidParameter):
        ops.batchnorm_inference(x, np.ones(1), np.zeros(1), np.zeros(1), np.zeros(1), eps=0.0)
    with pytest.raises(ops.DimensionError):
        ops.batchnorm_inference(x, np.ones(2), np.zeros(1), np.zeros(1), np.ones(1))


def test_batchnorm_train_matches_inference_at_batch_stats():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 2, 3, 3))
    g, b = rng.uniform(0.5, 2, 2), rng.standard_normal(2)
    out, mu, unbiased = ops.batchnorm_train(x, g, b)
    m = 5 * 9
    biased = unbiased * (m - 1) / m
    ref = ops.batchnorm_inference(x, g, b, mu, biased).value
    assert np.allclose(out.value, ref, atol=1e-12)


def test_relu_and_abs_subgradients():
    t = Tape()
    x = t.leaf(np.array([-1.0, 0.0, 2.0]))
    loss = ops.total(ops.add(ops.relu(x), ops.absolute(x)))
    g = backward(t, loss, [x])[x.id]
    assert g.tolist() == [-1.0, 1.0, 2.0]


def _rand(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


OP_CASES = {
    "conv_zero": lambda v: ops.vdot(
        ops.conv2d(v, _rand(1, 2, 2, 3, 3), np.ones(2), 1, ops.Padding.zero(1)), _rand(2, 1, 2, 5, 5)),
    "conv_circular_stride": lambda v: ops.vdot(
        ops.conv2d(v, _rand(1, 3, 2, 3, 3), None, 2, ops.Padding.circular(1)), _rand(2, 1, 3, 3, 3)),
    "bn_inference": lambda v: ops.vdot(
        ops.batchnorm_inference(v, np.array([1.5, -0.5]), np.array([0.1, 0.2]), np.array([0.3, -0.1]),
                                np.array([2.0, 0.5])), _rand(3, 1, 2, 5, 5)),
    "bn_train": lambda v: ops.vdot(
        ops.batchnorm_train(v, np.ones(2), np.zeros(2))[0],
        _rand(4, 1, 2, 5, 5)),
    "relu": lambda v: ops.vdot(ops.relu(v), _rand(5, 1, 2, 5, 5)),
    "maxpool": lambda v: ops.vdot(ops.maxpool2d(v, 2, 2), _rand(6, 1, 2, 2, 2)),
    "avgpool": lambda v: ops.vdot(ops.avgpool2d(v, 3, 1), _rand(7, 1, 2, 3, 3)),
    "fc": lambda v: ops.vdot(ops.fully_connected(ops.flatten(v), _rand(8, 4, 50), np.ones(4)),
                             _rand(9, 1, 4)),
    "residual_concat": lambda v: ops.vdot(ops.concat_channels(ops.residual_add(v, ops.relu(v)), v),
                                          _rand(10, 1, 4, 5, 5)),
    "abs_sample_dot": lambda v: ops.total(ops.absolute(ops.sample_dot(v, _rand(11, 2, 5, 5)))),
    "cross_entropy": lambda v: ops.softmax_cross_entropy(
        ops.fully_connected(ops.flatten(v), _rand(12, 3, 50)), np.array([2])),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    x = np.random.default_rng(42).standard_normal((1, 2, 5, 5))
    err, excluded = grad_check(OP_CASES[name], x, return_excluded=True)
    assert err < 1e-6, err
    assert len(excluded) < x.size // 5


def test_tile_batch_gradient_sums_batch():
    t = Tape()
    v = t.leaf(np.array([1.0, 2.0]))
    loss = ops.vdot(ops.tile_batch(v, 3), np.arange(6.0))
    assert backward(t, loss, [v])[v.id].tolist() == [0 + 2 + 4, 1 + 3 + 5]


def test_tape_records_only_when_needed():
    t = Tape()
    c = t.const(np.ones(3))
    ops.relu(c)
    assert t.nodes == []
    x = t.leaf(np.ones(3))
    ops.relu(ops.add(x, c))
    assert len(t.nodes) == 2


def test_backward_contracts():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ContractError):
        backward(t, ops.relu(x))
    y = t.leaf(np.ones(2))
    g = backward(t, ops.total(x), [x, y])
    assert g[y.id].tolist() == [0.0, 0.0]
    with pytest.raises(ContractError):
        grad_check(lambda v: ops.total(v), np.ones(2), step=0)


def test_grad_check_excludes_kinks():
    err, excluded = grad_check(lambda v: ops.total(ops.absolute(v)), np.array([0.0, 1.0, -2.0]),
                               return_excluded=True)
    assert excluded == [0] and err < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 1, 3, 3))
    x, y = rng.standard_normal((2, 1, 1, 5, 5))
    f = lambda z: ops.conv2d(z, w, padding=ops.Padding.zero(1)).value
    assert np.allclose(f(a * x + b * y), a * f(x) + b * f(y), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_nonlinear_layers_are_one_lipschitz(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1000, 1, 4, 4))
    y = x + rng.standard_normal(x.shape) * rng.choice([1e-3, 1e-1, 1.0], (1000, 1, 1, 1))
    d = np.linalg.norm((x - y).reshape(1000, -1), axis=1)
    for f in (ops.relu, lambda z: ops.maxpool2d(z, 2, 2), lambda z: ops.avgpool2d(z, 2, 2),
              lambda z: ops.residual_add(z, ops.scale(z, 0.0))):
        fd = np.linalg.norm((f(x).value - f(y).value).reshape(1000, -1), axis=1)
        assert np.all(fd <= d * (1 + 1e-12))


def test_var_wraps_value():
    v = Var(np.zeros((2, 3)))
    assert v.shape == (2, 3) and not v.requires_grad
