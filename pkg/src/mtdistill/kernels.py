"""Backend selection for the row-wise loss kernels.

The compiled ``_ckernels`` module is used when it was built; otherwise the
numpy versions in ``_pykernels`` are used. Set ``MTDISTILL_PURE_PYTHON=1`` to
force the numpy backend.
"""
import os

from mtdistill import _pykernels

if os.environ.get("MTDISTILL_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from mtdistill import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

sigmoid_rows = _impl.sigmoid_rows
softmax_rows = _impl.softmax_rows
softmax_xent = _impl.softmax_xent
sigmoid_bce = _impl.sigmoid_bce
bin_expectation_rows = _impl.bin_expectation_rows


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from mtdistill import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
