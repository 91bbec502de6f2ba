"""Kernel backend selection.

The compiled Cython extension is preferred when it imports; otherwise the
numpy reference implementation is used. Set ANCHORSEG_KERNELS=reference or
ANCHORSEG_KERNELS=compiled to force one (the latter raises if the extension
is missing). benchmarks/bench_kernels.py compares the two.
"""

import os

_choice = os.environ.get("ANCHORSEG_KERNELS", "auto")

if _choice not in ("auto", "compiled", "reference"):
    raise ValueError(f"ANCHORSEG_KERNELS must be auto|compiled|reference, got {_choice!r}")

if _choice == "reference":
    from . import reference as _impl

    BACKEND = "reference"
else:
    try:
        from . import _fastcore as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        from . import reference as _impl

        BACKEND = "reference"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
grid_sample_forward = _impl.grid_sample_forward
grid_sample_backward = _impl.grid_sample_backward
