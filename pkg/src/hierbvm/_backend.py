"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``HIERBVM_PURE_PYTHON`` is set to a non-empty value other than ``0``, the
numpy fallback is used.
"""

import os

from . import _kernels_py

_forced = os.environ.get("HIERBVM_PURE_PYTHON", "") not in ("", "0")

try:
    from . import _kernels as compiled
except ImportError:
    compiled = None

if compiled is not None and not _forced:
    kernels, BACKEND = compiled, "cython"
else:
    kernels, BACKEND = _kernels_py, "python"


def get_kernels(name=None):
    """Return a kernel namespace: ``"cython"``, ``"python"`` or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
