"""Backend dispatch for the sketch kernel.

The compiled Cython kernel is preferred; the numpy fallback produces
bit-identical output. Set VFKMEANS_KERNEL=python to force the fallback.
"""

from __future__ import annotations

import os

from . import _sketch_kernel_py

if os.environ.get("VFKMEANS_KERNEL", "").lower() == "python":
    _impl = _sketch_kernel_py
    BACKEND = "python"
else:
    try:
        from . import _sketch_kernel as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _sketch_kernel_py
        BACKEND = "python"

partition_sketch_maxes = _impl.partition_sketch_maxes
geo_values = _impl.geo_values
