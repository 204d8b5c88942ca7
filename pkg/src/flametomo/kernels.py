"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise (or when
the ``FLAMETOMO_PURE_PYTHON`` environment variable is set to a non-empty
value) the numpy implementations in ``_kernels_py`` are used instead.
"""

import os

from . import _kernels_py

if os.environ.get("FLAMETOMO_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

traverse_ray = _impl.traverse_ray
traverse_batch = _impl.traverse_batch
rte_forward = _impl.rte_forward
rte_backward = _impl.rte_backward
mix_forward = _impl.mix_forward
mix_backward = _impl.mix_backward

__all__ = [
    "BACKEND",
    "traverse_ray",
    "traverse_batch",
    "rte_forward",
    "rte_backward",
    "mix_forward",
    "mix_backward",
]
