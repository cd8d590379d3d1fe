"""Kernel dispatch: compiled lane when the extension is importable, NumPy
lane otherwise.

Set PROTOSEG_KERNELS=py or =cy to force a lane; =cy raises if the
extension was not built.
"""

import os

from . import _convpy

_choice = os.environ.get("PROTOSEG_KERNELS", "auto")
if _choice == "py":
    _impl = _convpy
elif _choice in ("auto", "cy"):
    try:
        from . import _convcy as _impl
    except ImportError:
        if _choice == "cy":
            raise
        _impl = _convpy
else:
    raise ValueError(f"PROTOSEG_KERNELS must be auto, py or cy, got {_choice!r}")

BACKEND = _impl.BACKEND
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
