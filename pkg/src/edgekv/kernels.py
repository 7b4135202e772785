"""Kernel backend selection.

The compiled extension is used when importable; ``EDGEKV_PURE_PYTHON=1``
forces the fallback; ``benchmarks/compare_kernels.py`` times the two.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("EDGEKV_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

fnv1a64 = _impl.fnv1a64
SeqSlot = _impl.SeqSlot
BACKEND: str = _impl.BACKEND

FNV_OFFSET = _kernels_py.FNV_OFFSET


def backends() -> dict:
    """All importable backends by name (the fallback is always present)."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
