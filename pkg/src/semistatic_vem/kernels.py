"""Factor kernel backend, chosen once at import.

The compiled extension is used when it was built; otherwise the numpy
implementation is loaded.  ``SEMISTATIC_VEM_KERNELS=python`` forces the
fallback (useful for benchmarking and for cross-checking the two).
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

from . import _kernels_py

KERNEL_FUNCTIONS = (
    "odometry_cost",
    "odometry_linearize",
    "pose_prior_cost",
    "pose_prior_linearize",
    "rigid_cost",
    "rigid_linearize",
    "landmark_prior_cost",
    "landmark_prior_linearize",
    "landmark_residuals",
    "landmark_linearize",
)


def load_backend(name: str) -> ModuleType:
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("semistatic_vem._kernels_c")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


def _select() -> tuple[str, ModuleType]:
    forced = os.environ.get("SEMISTATIC_VEM_KERNELS", "").strip().lower()
    if forced == "python":
        return "python", _kernels_py
    try:
        return "cython", load_backend("cython")
    except ImportError:
        if forced == "cython":
            raise
        return "python", _kernels_py


BACKEND, impl = _select()
