"""Backend selection for the hot loops.

The compiled extension is used when it was built; setting
``VARREG_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _pykernels

if os.environ.get("VARREG_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

tridiag_solve = _impl.tridiag_solve
overlap_means = _impl.overlap_means
overlap_accumulate = _impl.overlap_accumulate

__all__ = ["BACKEND", "tridiag_solve", "overlap_means", "overlap_accumulate"]
