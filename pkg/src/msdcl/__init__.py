"""Momentum self-distillation contrastive training engine.

Two-tower momentum contrastive learning with soft-target
self-distillation and resource-free batch enlargement, on a minimal
float64 reverse-mode autodiff core. Hot kernels run through a compiled
Cython backend when available, with a NumPy fallback selected at import
(see msdcl._kernels.BACKEND).
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
