"""Numeric kernel backend selection.

Two interchangeable backends provide the hot inner-loop kernels: a compiled
Cython extension (`_ck`) and a pure-NumPy fallback. Selection happens once at
import time; set ``PSC_KERNEL_BACKEND`` to ``cython`` or ``numpy`` to force a
backend (``auto``, the default, prefers the compiled one).
"""

from __future__ import annotations

import os

from . import numpy_backend

_KERNEL_NAMES = [
    "log_softmax_fwd",
    "log_softmax_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "silu_fwd",
    "silu_bwd",
    "adamw_update",
]


def _load_cython():
    from . import _ck  # noqa: PLC0415

    return _ck


def available_backends() -> list[str]:
    names = ["numpy"]
    try:
        _load_cython()
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    """Return the backend module for ``name`` ('cython' or 'numpy')."""
    if name == "numpy":
        return numpy_backend
    if name == "cython":
        return _load_cython()
    raise ValueError(f"unknown kernel backend {name!r}")


_requested = os.environ.get("PSC_KERNEL_BACKEND", "auto")
if _requested == "numpy":
    _impl = numpy_backend
elif _requested == "cython":
    _impl = _load_cython()
elif _requested == "auto":
    try:
        _impl = _load_cython()
    except ImportError:
        _impl = numpy_backend
else:
    raise ValueError(
        f"PSC_KERNEL_BACKEND must be auto, cython, or numpy; got {_requested!r}"
    )

BACKEND = _impl.NAME

log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
silu_fwd = _impl.silu_fwd
silu_bwd = _impl.silu_bwd
adamw_update = _impl.adamw_update
