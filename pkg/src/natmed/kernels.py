"""Backend selection for the numeric kernels.

The compiled extension is used when it was built; otherwise the numpy
implementations are used. Setting ``NATMED_PURE_PYTHON=1`` forces the numpy
path (used by the benchmark and by the backend-agreement tests).
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("NATMED_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        _impl = _compiled


def available_backends():
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.append("cython")
    return names


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def irls_accumulate(X, eta, y, w, logit):
    return _impl.irls_accumulate(X, eta, y, w, bool(logit))


def cell_sums(codes, y, w, n_cells):
    return _impl.cell_sums(codes, y, w, n_cells)
