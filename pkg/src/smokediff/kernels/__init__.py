"""Hot-kernel backend selection.

The compiled Cython extension is preferred when it was built; otherwise the
numpy implementations take over transparently. Results differ between the
backends only in floating-point summation order, so anything that promises
bit-identical reruns holds within one selected backend. Set the environment
variable SMOKEDIFF_KERNELS=python to force the fallback, or call
use_backend() at runtime (the benchmark does this to compare the two).
"""

from __future__ import annotations

import os

from smokediff.kernels import numpy_backend

try:
    from smokediff.kernels import _ckernels
except ImportError:
    _ckernels = None

_BACKENDS = {"python": numpy_backend}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

if os.environ.get("SMOKEDIFF_KERNELS") == "python" or _ckernels is None:
    _active_name = "python"
else:
    _active_name = "compiled"
_active = _BACKENDS[_active_name]


def available_backends():
    return sorted(_BACKENDS)


def active_backend() -> str:
    return _active_name


def use_backend(name: str) -> None:
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = _BACKENDS[name]
    _active_name = name


def conv2d_fwd(x, w, stride, pad):
    return _active.conv2d_fwd(x, w, stride, pad)


def conv2d_bwd_input(gy, w, stride, pad, h, wd):
    return _active.conv2d_bwd_input(gy, w, stride, pad, h, wd)


def conv2d_bwd_kernel(gy, x, stride, pad, kh, kw):
    return _active.conv2d_bwd_kernel(gy, x, stride, pad, kh, kw)
