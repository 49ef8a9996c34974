"""Hot-loop kernels with backend selection at import time.

The compiled Cython backend is preferred when importable; otherwise the
NumPy fallback is used. Set MSDCL_KERNELS=numpy (or =cython) to force a
backend; forcing cython raises if the extension is missing.
"""

from __future__ import annotations

import os

from . import _numpy_impl

_FORCED = os.environ.get("MSDCL_KERNELS", "").strip().lower()
if _FORCED not in ("", "numpy", "cython"):
    raise ImportError(f"MSDCL_KERNELS must be 'numpy' or 'cython', got {_FORCED!r}")

if _FORCED == "numpy":
    _impl = _numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import _cyimpl as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _FORCED == "cython":
            raise
        _impl = _numpy_impl
        BACKEND = "numpy"

row_softmax = _impl.row_softmax
row_log_softmax = _impl.row_log_softmax
softmax_grad_z = _impl.softmax_grad_z
log_softmax_grad_z = _impl.log_softmax_grad_z
row_l2_norms = _impl.row_l2_norms
row_l2_normalize_grad = _impl.row_l2_normalize_grad
kl_rows_mean = _impl.kl_rows_mean
ema_update = _impl.ema_update
adamw_update = _impl.adamw_update

KERNEL_NAMES = [
    "row_softmax",
    "row_log_softmax",
    "softmax_grad_z",
    "log_softmax_grad_z",
    "row_l2_norms",
    "row_l2_normalize_grad",
    "kl_rows_mean",
    "ema_update",
    "adamw_update",
]


def available_backends() -> dict[str, object]:
    """Map backend name -> implementation module, for tests and benchmarks."""
    backends: dict[str, object] = {"numpy": _numpy_impl}
    try:
        from . import _cyimpl

        backends["cython"] = _cyimpl
    except ImportError:
        pass
    return backends
