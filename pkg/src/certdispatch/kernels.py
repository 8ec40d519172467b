"""Kernel backend selection.

The compiled extension is used when it imports; setting ``CERTDISPATCH_PURE_PYTHON=1``
forces the numpy fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CERTDISPATCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels

double_softplus = _impl.double_softplus
proportional_response = _impl.proportional_response
proportional_response_vjp = _impl.proportional_response_vjp
smooth_split = _impl.smooth_split
hard_split = _impl.hard_split
overflow = _impl.overflow
ratio_test = _impl.ratio_test

__all__ = [
    "BACKEND",
    "double_softplus",
    "proportional_response",
    "proportional_response_vjp",
    "smooth_split",
    "hard_split",
    "overflow",
    "ratio_test",
]
