"""Linear layers as matrix-free operators, plus dense materializations.

Views always exclude the bias / BatchNorm shift. Dense builders construct the
matrix by explicit index arithmetic, independent of the im2col path used by
``apply``, so the two can check each other.
"""
from dataclasses import dataclass

import numpy as np

from intriuap import ops
from intriuap.autodiff import ContractError
from intriuap.model import LINEAR_KINDS

DEFAULT_DENSE_CAP = 2 ** 26


class MemoryCapExceeded(ContractError):
    pass


@dataclass(frozen=True)
class LinearLayerView:
    """``apply``/``adjoint`` accept a single tensor or a leading batch axis."""

    layer_id: str
    kind: str
    in_geometry: tuple
    out_geometry: tuple
    _apply: object
    _adjoint: object

    @property
    def in_size(self):
        return int(np.prod(self.in_geometry))

    @property
    def out_size(self):
        return int(np.prod(self.out_geometry))

    def _call(self, fn, x, geom_in, geom_out):
        x = np.asarray(x)
        single = x.shape == tuple(geom_in)
        if not single and tuple(x.shape[1:]) != tuple(geom_in):
            raise ops.DimensionError(
                f"{self.layer_id}: expected shape {geom_in} (optionally batched), got {x.shape}")
        y = fn(x[None] if single else x)
        return y[0] if single else y

    def apply(self, x):
        return self._call(self._apply, x, self.in_geometry, self.out_geometry)

    def adjoint(self, y):
        return self._call(self._adjoint, y, self.out_geometry, self.in_geometry)

    def normal(self, x):
        """``A^T A x``."""
        return self.adjoint(self.apply(x))


def conv_view(layer_id, weight, in_geometry, stride=(1, 1), padding=None):
    padding = padding or ops.Padding()
    stride = ops._pair(stride)
    c, h, w = in_geometry
    if weight.shape[1] != c:
        raise ops.DimensionError(f"kernel expects {weight.shape[1]} channels, geometry has {c}")
    oh, ow = ops.conv_output_hw(h, w, weight.shape[2], weight.shape[3], stride, padding)

    def apply(x):
        return ops.conv2d_value(x, weight, stride, padding)[0]

    def adjoint(y):
        return ops.conv2d_transpose_value(y, weight, (h, w), stride, padding)

    return LinearLayerView(layer_id, "Conv2d", tuple(in_geometry), (weight.shape[0], oh, ow),
                           apply, adjoint)


def batchnorm_scale(gamma, moving_var, eps):
    gamma = np.asarray(gamma, dtype=np.float64)
    var = np.asarray(moving_var, dtype=np.float64)
    if np.any(var < 0):
        raise ops.InvalidParameter("negative moving variance")
    if eps < 0 or np.any(var + eps <= 0):
        raise ops.InvalidParameter("var + eps must be positive")
    return gamma / np.sqrt(var + eps)


def batchnorm_view(layer_id, gamma, moving_var, eps, in_geometry):
    s = batchnorm_scale(gamma, moving_var, eps)
    if s.shape != (in_geometry[0],):
        raise ops.DimensionError(f"{len(s)} BN channels for geometry {in_geometry}")
    shp = (1, -1) + (1,) * (len(in_geometry) - 1)

    def apply(x):
        return x * s.reshape(shp).astype(x.dtype)

    return LinearLayerView(layer_id, "BatchNorm", tuple(in_geometry), tuple(in_geometry),
                           apply, apply)


def fc_view(layer_id, weight):
    out, inp = weight.shape
    return LinearLayerView(layer_id, "FullyConnected", (inp,), (out,),
                           lambda x: x @ weight.T, lambda y: y @ weight)


def view_linear_layer(model, layer_id):
    """Matrix-free view of a linear layer at its resolved geometry, bias excluded."""
    if layer_id not in model.linear_layer_order:
        raise ContractError(f"{layer_id!r} is not a linear layer of {model.name}")
    n = model.node(layer_id)
    if n.kind == "Conv2d":
        return conv_view(layer_id, n.params["weight"], n.in_shape, n.stride, n.padding)
    if n.kind == "BatchNorm":
        return batchnorm_view(layer_id, n.params["gamma"], n.params["moving_var"], n.eps, n.in_shape)
    if n.kind == "FullyConnected":
        return fc_view(layer_id, n.params["weight"])
    raise ContractError(f"node kind {n.kind} is not in {LINEAR_KINDS}")


# -- dense materialization -----------------------------------------------------

@dataclass(frozen=True)
class DenseOperator:
    matrix: np.ndarray
    in_geometry: tuple
    out_geometry: tuple

    def matvec(self, x):
        return (self.matrix @ np.asarray(x).reshape(-1)).reshape(self.out_geometry)


def _check_cap(rows, cols, cap):
    if rows * cols > cap:
        raise MemoryCapExceeded(f"dense operator {rows}x{cols} exceeds cap of {cap} entries")


def _conv_matrix(kernel, in_geometry, stride, pad, circular, cap):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim == 2:
        kernel = kernel[None, None]
    cout, cin, kh, kw = kernel.shape
    c, h, w = in_geometry
    if cin != c:
        raise ops.DimensionError(f"kernel expects {cin} channels, geometry has {c}")
    sh, sw = ops._pair(stride)
    ph, pw = ops._pair(pad)
    if circular and (h < kh or w < kw):
        raise ops.DimensionError(f"geometry {h}x{w} smaller than kernel {kh}x{kw}")
    oh, ow = ops.conv_output_hw(h, w, kh, kw, (sh, sw), ops.Padding("zero", ph, pw))
    rows, cols = cout * oh * ow, cin * h * w
    _check_cap(rows, cols, cap)
    mat = np.zeros((rows, cols))
    o, i, j, ci, ki, kj = np.meshgrid(np.arange(cout), np.arange(oh), np.arange(ow),
                                      np.arange(cin), np.arange(kh), np.arange(kw), indexing="ij")
    r = i * sh + ki - ph
    q = j * sw + kj - pw
    if circular:
        r, q = r % h, q % w
        keep = np.ones(r.shape, dtype=bool)
    else:
        keep = (r >= 0) & (r < h) & (q >= 0) & (q < w)
    row_idx = ((o * oh + i) * ow + j)[keep]
    col_idx = ((ci * h + r) * w + q)[keep]
    np.add.at(mat, (row_idx, col_idx), kernel[o[keep], ci[keep], ki[keep], kj[keep]])
    return DenseOperator(mat, (c, h, w), (cout, oh, ow))


def materialize_conv_toeplitz(kernel, in_geometry, zero_padding=0, stride=1, cap=DEFAULT_DENSE_CAP):
    """Doubly-block Toeplitz matrix of a zero-padded cross-correlation."""
    return _conv_matrix(kernel, in_geometry, stride, zero_padding, False, cap)


def materialize_conv_circulant(kernel, in_geometry, padding=None, stride=1, cap=DEFAULT_DENSE_CAP):
    """Doubly-block circulant matrix of a circularly padded cross-correlation.

    ``padding`` defaults to ``k // 2`` so the output keeps the input size.
    With stride > 1 the rows of the stride-1 matrix are subsampled.
    """
    kernel = np.asarray(kernel)
    kh, kw = kernel.shape[-2:]
    if padding is None:
        padding = (kh // 2, kw // 2)
    return _conv_matrix(kernel, in_geometry, stride, padding, True, cap)


def batchnorm_diagonal(gamma, moving_var, eps, geometry, beta=None, moving_mean=None,
                       cap=DEFAULT_DENSE_CAP):
    """Diagonal BatchNorm operator and its shift vector.

    Entry ``i`` belongs to channel ``i // (H*W)``. Returns ``(DenseOperator, b)``
    where ``b_i = beta_c - mean_c * gamma_c / sqrt(var_c + eps)``.
    """
    geometry = tuple(geometry)
    s = batchnorm_scale(gamma, moving_var, eps)
    c = geometry[0]
    if s.shape != (c,):
        raise ops.DimensionError(f"{len(s)} BN channels for geometry {geometry}")
    plane = int(np.prod(geometry[1:])) if len(geometry) > 1 else 1
    diag = np.repeat(s, plane)
    _check_cap(diag.size, diag.size, cap)
    beta = np.zeros(c) if beta is None else np.asarray(beta, dtype=np.float64)
    mean = np.zeros(c) if moving_mean is None else np.asarray(moving_mean, dtype=np.float64)
    shift = np.repeat(beta - mean * s, plane)
    return DenseOperator(np.diag(diag), geometry, geometry), shift


def materialize_view(view, cap=DEFAULT_DENSE_CAP, chunk=256):
    """Dense matrix of any view, built column by column through ``apply``."""
    _check_cap(view.out_size, view.in_size, cap)
    mat = np.empty((view.out_size, view.in_size))
    for s in range(0, view.in_size, chunk):
        e = min(s + chunk, view.in_size)
        basis = np.zeros((e - s, view.in_size))
        basis[np.arange(e - s), np.arange(s, e)] = 1.0
        mat[:, s:e] = view.apply(basis.reshape((e - s,) + view.in_geometry)).reshape(e - s, -1).T
    return DenseOperator(mat, view.in_geometry, view.out_geometry)


def materialize_layer(model, layer_id, cap=DEFAULT_DENSE_CAP):
    """Dense operator of a model layer via the independent index builders."""
    n = model.node(layer_id)
    if n.kind == "Conv2d":
        pad = n.padding
        if pad.mode == "circular":
            return materialize_conv_circulant(n.params["weight"], n.in_shape, (pad.ph, pad.pw),
                                              n.stride, cap)
        return materialize_conv_toeplitz(n.params["weight"], n.in_shape, (pad.ph, pad.pw),
                                         n.stride, cap)
    if n.kind == "BatchNorm":
        return batchnorm_diagonal(n.params["gamma"], n.params["moving_var"], n.eps, n.in_shape,
                                  cap=cap)[0]
    if n.kind == "FullyConnected":
        w = np.asarray(n.params["weight"], dtype=np.float64)
        _check_cap(*w.shape, cap)
        return DenseOperator(w.copy(), n.in_shape, n.out_shape)
    raise ContractError(f"{layer_id!r} is not a linear layer")


def adjoint_check(view, trials=20, seed=0):
    """Max normalized defect ``|<Ax, y> - <x, A^T y>| / (|Ax| |y|)`` over random pairs."""
    if trials < 1:
        raise ContractError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(view.in_geometry)
        y = rng.standard_normal(view.out_geometry)
        ax = view.apply(x)
        aty = view.adjoint(y)
        denom = np.linalg.norm(ax) * np.linalg.norm(y)
        if denom == 0:
            continue
        worst = max(worst, abs(np.vdot(ax, y) - np.vdot(x, aty)) / denom)
    return float(worst)
