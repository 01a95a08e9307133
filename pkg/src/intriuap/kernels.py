"""Backend selection for the conv/pool kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``INTRIUAP_PURE_PYTHON=1`` to force the fallback.
"""
import os

from intriuap import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("INTRIUAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from intriuap import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from intriuap import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
