"""Backend selection for the hot inner loops.

The compiled extension ``mast._kernels`` is used when it imports; otherwise
the numpy implementations in ``mast._kernels_py`` take over. Setting
``MAST_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

KERNEL_NAMES = (
    "gelu_forward",
    "gelu_backward",
    "pool_forward",
    "pool_backward",
    "im2col",
    "col2im",
    "scatter_rows_add",
    "pooled_extent",
)


def load_backend(name: str) -> ModuleType:
    """Return the kernel module for ``"compiled"`` or ``"python"``."""
    if name == "compiled":
        return importlib.import_module("mast._kernels")
    if name == "python":
        return importlib.import_module("mast._kernels_py")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        load_backend("compiled")
    except ImportError:
        pass
    else:
        names.insert(0, "compiled")
    return names


def _select() -> tuple[str, ModuleType]:
    if os.environ.get("MAST_PURE_PYTHON", "") not in ("", "0"):
        return "python", load_backend("python")
    try:
        return "compiled", load_backend("compiled")
    except ImportError:
        return "python", load_backend("python")


BACKEND, _impl = _select()

gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
pool_forward = _impl.pool_forward
pool_backward = _impl.pool_backward
im2col = _impl.im2col
col2im = _impl.col2im
scatter_rows_add = _impl.scatter_rows_add
pooled_extent = _impl.pooled_extent
