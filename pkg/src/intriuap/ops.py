"""Differentiable layer vocabulary for L1LOS networks.

Every op takes :class:`~intriuap.autodiff.Var` (or plain arrays) in NCHW
layout and returns a Var. Gradients are recorded only when an input requires
one.
"""
from dataclasses import dataclass

import numpy as np

from intriuap import kernels
from intriuap.autodiff import ContractError, as_var, emit, value_of


class DimensionError(ContractError):
    pass


class InvalidParameter(ContractError):
    pass


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class Padding:
    mode: str = "zero"
    ph: int = 0
    pw: int = 0

    def __post_init__(self):
        if self.mode not in ("zero", "circular"):
            raise InvalidParameter(f"unknown padding mode {self.mode!r}")
        if self.ph < 0 or self.pw < 0:
            raise InvalidParameter("padding must be non-negative")

    @classmethod
    def zero(cls, p=0):
        ph, pw = _pair(p)
        return cls("zero", ph, pw)

    @classmethod
    def circular(cls, p=0):
        ph, pw = _pair(p)
        return cls("circular", ph, pw)


def pad_nchw(x, padding):
    if padding.ph == 0 and padding.pw == 0:
        return x
    widths = ((0, 0), (0, 0), (padding.ph, padding.ph), (padding.pw, padding.pw))
    if padding.mode == "zero":
        return np.pad(x, widths)
    return np.pad(x, widths, mode="wrap")


def unpad_nchw(g, padding, h, w):
    """Adjoint of :func:`pad_nchw`."""
    ph, pw = padding.ph, padding.pw
    if ph == 0 and pw == 0:
        return g
    if padding.mode == "zero":
        return g[:, :, ph:ph + h, pw:pw + w]
    rows = np.zeros(g.shape[:2] + (h, g.shape[3]), dtype=g.dtype)
    for i in range(g.shape[2]):
        rows[:, :, (i - ph) % h] += g[:, :, i]
    out = np.zeros(g.shape[:2] + (h, w), dtype=g.dtype)
    for j in range(g.shape[3]):
        out[:, :, :, (j - pw) % w] += rows[:, :, :, j]
    return out


def conv_output_hw(h, w, kh, kw, stride, padding):
    sh, sw = stride
    hp, wp = h + 2 * padding.ph, w + 2 * padding.pw
    if hp < kh or wp < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    return (hp - kh) // sh + 1, (wp - kw) // sw + 1


def conv2d_value(x, w, stride=(1, 1), padding=Padding()):
    """Bias-free cross-correlation on raw arrays; returns (out, cols)."""
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {cin}")
    sh, sw = stride
    oh, ow = conv_output_hw(h, wd, kh, kw, stride, padding)
    cols = kernels.im2col(pad_nchw(x, padding), kh, kw, sh, sw)
    out = np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, oh, ow)
    return out, cols


def conv2d_transpose_value(g, w, in_hw, stride=(1, 1), padding=Padding()):
    """Adjoint of :func:`conv2d_value` w.r.t. its input."""
    n = g.shape[0]
    cout, cin, kh, kw = w.shape
    h, wd = in_hw
    sh, sw = stride
    dcols = np.matmul(w.reshape(cout, -1).T, g.reshape(n, cout, -1))
    hp, wp = h + 2 * padding.ph, wd + 2 * padding.pw
    dxp = kernels.col2im(dcols, cin, hp, wp, kh, kw, sh, sw)
    return unpad_nchw(dxp, padding, h, wd)


def conv2d(x, kernel, bias=None, stride=1, padding=None):
    x, kernel = as_var(x), as_var(kernel)
    stride = _pair(stride)
    padding = padding if padding is not None else Padding()
    xv, wv = x.value, kernel.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise DimensionError(
            f"conv2d expects NCHW input and OIHW kernel, got {xv.shape} and {wv.shape}")
    out, cols = conv2d_value(xv, wv, stride, padding)
    cout = wv.shape[0]
    if bias is not None:
        bias = as_var(bias)
        if bias.value.shape != (cout,):
            raise DimensionError(f"bias shape {bias.value.shape} != ({cout},)")
        out = out + bias.value.reshape(1, cout, 1, 1)
    h, wd = xv.shape[2:]

    def back(g):
        gx = conv2d_transpose_value(g, wv, (h, wd), stride, padding) if x.requires_grad else None
        gw = None
        if kernel.requires_grad:
            gw = np.tensordot(g.reshape(g.shape[0], cout, -1), cols, axes=([0, 2], [0, 2]))
            gw = gw.reshape(wv.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return emit(out, (x, kernel, bias), back)


def _channel_shape(x, c):
    return (1, c) + (1,) * (x.ndim - 2)


def batchnorm_inference(x, gamma, beta, moving_mean, moving_var, eps=1e-5):
    """Per-channel affine map ``gamma * (x - mean) / sqrt(var + eps) + beta``."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    mean, var = value_of(moving_mean), value_of(moving_var)
    xv = x.value
    c = xv.shape[1]
    for name, p in (("gamma", gamma.value), ("beta", beta.value), ("moving_mean", mean),
                    ("moving_var", var)):
        if p.shape != (c,):
            raise DimensionError(f"batchnorm: {name} has shape {p.shape}, expected ({c},)")
    if np.any(var < 0):
        raise InvalidParameter("batchnorm: negative moving variance")
    if eps < 0 or np.any(var + eps <= 0):
        raise InvalidParameter("batchnorm: var + eps must be positive")
    inv = 1.0 / np.sqrt(var + eps)
    shp = _channel_shape(xv, c)
    scale = (gamma.value * inv).astype(xv.dtype)
    shift = (beta.value - mean * gamma.value * inv).astype(xv.dtype)
    out = xv * scale.reshape(shp) + shift.reshape(shp)
    axes = tuple(i for i in range(xv.ndim) if i != 1)

    def back(g):
        gx = g * scale.reshape(shp) if x.requires_grad else None
        gg = None
        if gamma.requires_grad:
            gg = (g * (xv - mean.reshape(shp)) * inv.reshape(shp)).sum(axis=axes)
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return emit(out, (x, gamma, beta), back)


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Batch-statistics BatchNorm; returns (out, batch_mean, unbiased_batch_var)."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    xv = x.value
    c = xv.shape[1]
    axes = tuple(i for i in range(xv.ndim) if i != 1)
    shp = _channel_shape(xv, c)
    m = xv.size // c
    mu = xv.mean(axis=axes)
    xc = xv - mu.reshape(shp)
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(shp)
    out = xhat * gamma.value.reshape(shp) + beta.value.reshape(shp)

    def back(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.value.reshape(shp)
            s1 = dxhat.sum(axis=axes).reshape(shp)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(shp)
            gx = inv.reshape(shp) / m * (m * dxhat - s1 - xhat * s2)
        return gx, gg, gb

    unbiased = var * m / max(m - 1, 1)
    return emit(out, (x, gamma, beta), back), mu, unbiased


def relu(x):
    x = as_var(x)
    mask = x.value > 0
    # subgradient at 0 is 0
    return emit(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def _check_window(xv, window, stride, name):
    kh, kw = window
    if xv.ndim != 4:
        raise DimensionError(f"{name} expects NCHW input, got {xv.shape}")
    if kh > xv.shape[2] or kw > xv.shape[3]:
        raise DimensionError(f"{name}: window {kh}x{kw} larger than input {xv.shape[2:]}")
    if stride[0] < 1 or stride[1] < 1:
        raise InvalidParameter(f"{name}: stride must be >= 1")


def maxpool2d(x, window=2, stride=None):
    """Max pooling; on ties the gradient goes to the first maximum (row-major)."""
    x = as_var(x)
    window = _pair(window)
    stride = _pair(stride) if stride is not None else window
    _check_window(x.value, window, stride, "maxpool2d")
    out, idx = kernels.maxpool_forward(x.value, *window, *stride)
    h, w = x.value.shape[2:]
    return emit(out, (x,), lambda g: (kernels.maxpool_backward(g, idx, h, w),))


def avgpool2d(x, window=2, stride=None):
    x = as_var(x)
    window = _pair(window)
    stride = _pair(stride) if stride is not None else window
    xv = x.value
    _check_window(xv, window, stride, "avgpool2d")
    n, c, h, w = xv.shape
    kh, kw = window
    cols = kernels.im2col(xv.reshape(n * c, 1, h, w), kh, kw, *stride)
    oh = (h - kh) // stride[0] + 1
    ow = (w - kw) // stride[1] + 1
    out = cols.mean(axis=1).reshape(n, c, oh, ow)

    def back(g):
        gc = np.repeat(g.reshape(n * c, 1, oh * ow) / (kh * kw), kh * kw, axis=1)
        return (kernels.col2im(np.ascontiguousarray(gc), 1, h, w, kh, kw, *stride).reshape(n, c, h, w),)

    return emit(out, (x,), back)


def fully_connected(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = as_var(x), as_var(weight)
    xv, wv = x.value, weight.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise DimensionError(
            f"fully_connected: input {xv.shape} incompatible with weight {wv.shape}")
    out = xv @ wv.T
    if bias is not None:
        bias = as_var(bias)
        if bias.value.shape != (wv.shape[0],):
            raise DimensionError(f"bias shape {bias.value.shape} != ({wv.shape[0]},)")
        out = out + bias.value

    def back(g):
        gx = g @ wv if x.requires_grad else None
        gw = g.T @ xv if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return emit(out, (x, weight, bias), back)


def residual_add(*parts):
    parts = [as_var(p) for p in parts]
    if len(parts) < 2:
        raise ContractError("residual_add needs at least two inputs")
    shape = parts[0].value.shape
    for p in parts[1:]:
        if p.value.shape != shape:
            raise DimensionError(f"residual_add: shape {p.value.shape} != {shape}")
    out = parts[0].value.copy()
    for p in parts[1:]:
        out = out + p.value
    return emit(out, tuple(parts), lambda g: tuple(g for _ in parts))


def concat_channels(*parts):
    parts = [as_var(p) for p in parts]
    if not parts:
        raise ContractError("concat_channels needs at least one input")
    ref = parts[0].value.shape
    for p in parts[1:]:
        s = p.value.shape
        if len(s) != len(ref) or s[0] != ref[0] or s[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: shape {s} incompatible with {ref}")
    out = np.concatenate([p.value for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return emit(out, tuple(parts), back)


def flatten(x):
    x = as_var(x)
    shape = x.value.shape
    return emit(x.value.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


# -- scalar plumbing used by losses -------------------------------------------

def add(a, b):
    a, b = as_var(a), as_var(b)
    return emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return emit(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a, c):
    a = as_var(a)
    return emit(a.value * c, (a,), lambda g: (g * c,))


def total(a):
    a = as_var(a)
    shape = a.value.shape
    return emit(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.value.dtype),))


def vdot(a, v):
    """Inner product of flattened ``a`` with a constant array ``v``."""
    a = as_var(a)
    v = value_of(v)
    if a.value.size != v.size:
        raise DimensionError(f"vdot: sizes {a.value.size} and {v.size} differ")
    vv = v.reshape(a.value.shape).astype(a.value.dtype, copy=False)
    return emit(np.asarray(np.dot(a.value.ravel(), vv.ravel())), (a,), lambda g: (g * vv,))


def absolute(a):
    """|a| with subgradient +1 at zero, so ascent can leave the origin."""
    a = as_var(a)
    sign = np.where(a.value >= 0, 1.0, -1.0).astype(a.value.dtype)
    return emit(np.abs(a.value), (a,), lambda g: (g * sign,))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; ``labels`` are integer class ids."""
    logits = as_var(logits)
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (g * p / n,)

    return emit(np.asarray(loss, dtype=z.dtype), (logits,), back)


def tile_batch(a, n):
    """Repeat a single tensor ``n`` times along a new leading batch axis."""
    a = as_var(a)
    out = np.broadcast_to(a.value[None], (n,) + a.value.shape).copy()
    return emit(out, (a,), lambda g: (g.sum(axis=0),))


def sample_dot(a, v):
    """Per-sample inner products ``<a[i], v>`` for a batch ``a``; returns shape (N,)."""
    a = as_var(a)
    v = value_of(v)
    n = a.value.shape[0]
    if a.value[0].size != v.size:
        raise DimensionError(f"sample_dot: sample size {a.value[0].size} != {v.size}")
    flat = v.reshape(-1).astype(a.value.dtype, copy=False)
    out = a.value.reshape(n, -1) @ flat
    shape = a.value.shape
    return emit(out, (a,), lambda g: ((g[:, None] * flat[None, :]).reshape(shape),))
