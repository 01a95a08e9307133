"""Pure numpy implementations of the hot conv/pool kernels.

These are the fallback used when the compiled ``_ckernels`` extension is not
available. Accumulation order in :func:`col2im` and :func:`maxpool_backward`
matches the compiled version so both backends produce identical bits.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, sh, sw):
    """Unfold a padded batch ``(N, C, H, W)`` into ``(N, C*kh*kw, OH*OW)``."""
    n, c, h, w = xp.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # win: (N, C, OH, OW, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, c, h, w, kh, kw, sh, sw):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``(N, C, H, W)``."""
    n = cols.shape[0]
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw] += cols6[:, :, ki, kj]
    return out


def maxpool_forward(x, kh, kw, sh, sw):
    """Max over windows; returns values and flat argmax index into each plane.

    Ties go to the first maximal element in row-major window order.
    """
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    win = win.reshape(n, c, oh, ow, kh * kw)
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(local, kw)
    rows = np.arange(oh)[:, None] * sh + ki
    cols = np.arange(ow)[None, :] * sw + kj
    idx = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), idx


def maxpool_backward(grad, idx, h, w):
    n, c, oh, ow = grad.shape
    out = np.zeros((n, c, h * w), dtype=grad.dtype)
    g = grad.reshape(n, c, oh * ow)
    ii = idx.reshape(n, c, oh * ow)
    nn_, cc = np.indices((n, c))
    # one output position at a time: targets are unique within a step, and the
    # step order matches the compiled loop
    for p in range(oh * ow):
        out[nn_, cc, ii[:, :, p]] += g[:, :, p]
    return out.reshape(n, c, h, w)
