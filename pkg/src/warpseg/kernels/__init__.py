"""Backend selection for the hot kernels.

The compiled extension is used when it imported cleanly; otherwise the
pure numpy fallback takes over.  Set WARPSEG_BACKEND=numpy or =cython to
force a choice (forcing cython raises if the extension is missing).

Both backends expose the same eight functions:

    conv2d_forward, conv2d_backward_input, conv2d_backward_weight,
    maxpool2d_forward, maxpool2d_backward,
    bilinear_forward, bilinear_backward

plus a ``name`` string.
"""

import os

from . import numpy_backend

_forced = os.environ.get("WARPSEG_BACKEND", "auto").lower()
if _forced not in ("auto", "numpy", "cython"):
    raise ValueError(f"WARPSEG_BACKEND must be auto, numpy or cython, got {_forced!r}")

if _forced == "numpy":
    _impl = numpy_backend
else:
    try:
        from . import cython_backend as _impl
    except ImportError:
        if _forced == "cython":
            raise
        _impl = numpy_backend

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward


def backend_name() -> str:
    """Name of the active backend ("cython" or "numpy")."""
    return _impl.name


def get_backend(which: str):
    """Return a backend module by name, for benchmarks and parity tests."""
    if which == "numpy":
        return numpy_backend
    if which == "cython":
        from . import cython_backend
        return cython_backend
    raise ValueError(f"unknown backend {which!r}")
