"""Vectorized numpy fallback for the convolution hot kernels.

Each kernel loops only over the (kh, kw) window offsets and dispatches the
inner contraction to BLAS, so the fallback stays usable for training. The
compiled backend in _ckernels.pyx implements the same three contracts with
plain nested loops; both must agree to float roundoff.
"""

from __future__ import annotations

import numpy as np


def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    c_in, h, wd = x.shape
    c_out, c_in_w, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    y = np.zeros((c_out, ho, wo), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            sl = xp[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]
            y += np.einsum("oc,chw->ohw", w[:, :, a, b], sl, optimize=True)
    return y


def conv2d_bwd_input(gy: np.ndarray, w: np.ndarray, stride: int, pad: int, h: int, wd: int) -> np.ndarray:
    c_out, ho, wo = gy.shape
    _, c_in, kh, kw = w.shape
    gxp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += np.einsum(
                "oc,ohw->chw", w[:, :, a, b], gy, optimize=True
            )
    if pad:
        return np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + wd])
    return gxp


def conv2d_bwd_kernel(gy: np.ndarray, x: np.ndarray, stride: int, pad: int, kh: int, kw: int) -> np.ndarray:
    c_out, ho, wo = gy.shape
    c_in = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    gw = np.empty((c_out, c_in, kh, kw), dtype=gy.dtype)
    for a in range(kh):
        for b in range(kw):
            sl = xp[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]
            gw[:, :, a, b] = np.einsum("ohw,chw->oc", gy, sl, optimize=True)
    return gw
