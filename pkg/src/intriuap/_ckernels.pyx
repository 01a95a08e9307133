# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv/pool kernels. Same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] xp, real[:, :, ::1] cols,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t oh = (xp.shape[2] - kh) // sh + 1
    cdef Py_ssize_t ow = (xp.shape[3] - kw) // sw + 1
    cdef Py_ssize_t b, ch, ki, kj, i, j, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for i in range(oh):
                            for j in range(ow):
                                cols[b, row, i * ow + j] = xp[b, ch, i * sh + ki, j * sw + kj]


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] out,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t oh = (out.shape[2] - kh) // sh + 1
    cdef Py_ssize_t ow = (out.shape[3] - kw) // sw + 1
    cdef Py_ssize_t b, ch, ki, kj, i, j, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for i in range(oh):
                            for j in range(ow):
                                out[b, ch, i * sh + ki, j * sw + kj] += cols[b, row, i * ow + j]


def _maxpool_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                     cnp.int64_t[:, :, :, ::1] idx,
                     Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], w = x.shape[3]
    cdef Py_ssize_t oh = out.shape[2], ow = out.shape[3]
    cdef Py_ssize_t b, ch, i, j, ki, kj, r, q, best_r, best_q
    cdef real best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        best_r = i * sh
                        best_q = j * sw
                        best = x[b, ch, best_r, best_q]
                        for ki in range(kh):
                            r = i * sh + ki
                            for kj in range(kw):
                                q = j * sw + kj
                                v = x[b, ch, r, q]
                                if v > best:
                                    best = v
                                    best_r = r
                                    best_q = q
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = best_r * w + best_q


def _maxpool_backward(real[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] idx,
                      real[:, :, ::1] out):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    cdef Py_ssize_t b, ch, i, j
    with nogil:
        for i in range(oh):
            for j in range(ow):
                for b in range(n):
                    for ch in range(c):
                        out[b, ch, idx[b, ch, i, j]] += grad[b, ch, i, j]


def im2col(xp, kh, kw, sh, sw):
    xp = np.ascontiguousarray(xp)
    n, c, h, w = xp.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    cols = np.empty((n, c * kh * kw, oh * ow), dtype=xp.dtype)
    _im2col(xp, cols, kh, kw, sh, sw)
    return cols


def col2im(cols, c, h, w, kh, kw, sh, sw):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, sh, sw)
    return out


def maxpool_forward(x, kh, kw, sh, sw):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    _maxpool_forward(x, out, idx, kh, kw, sh, sw)
    return out, idx


def maxpool_backward(grad, idx, h, w):
    grad = np.ascontiguousarray(grad)
    n, c = grad.shape[:2]
    out = np.zeros((n, c, h * w), dtype=grad.dtype)
    _maxpool_backward(grad, np.ascontiguousarray(idx, dtype=np.int64), out)
    return out.reshape(n, c, h, w)
