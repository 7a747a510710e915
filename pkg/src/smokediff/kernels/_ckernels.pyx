# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels over typed memoryviews.

Loop order streams the innermost index over contiguous output/input rows with
the kernel scalar hoisted, and valid index ranges are computed per offset so
the hot loops carry no bounds branches. Same three contracts as
numpy_backend; single-threaded and deterministic.
"""

import numpy as np

cimport cython

ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t off, Py_ssize_t stride) noexcept:
    # smallest i with i*stride - pad + off >= 0
    cdef Py_ssize_t num = pad - off
    if num <= 0:
        return 0
    return (num + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t n_in, Py_ssize_t pad, Py_ssize_t off,
                           Py_ssize_t stride, Py_ssize_t n_out) noexcept:
    # largest i with i*stride - pad + off <= n_in - 1, clipped to n_out - 1
    cdef Py_ssize_t top = (n_in - 1 + pad - off) // stride
    if top > n_out - 1:
        return n_out - 1
    return top


def conv2d_fwd(floating[:, :, ::1] x, floating[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    if floating is float:
        y_arr = np.zeros((c_out, ho, wo), dtype=np.float32)
    else:
        y_arr = np.zeros((c_out, ho, wo), dtype=np.float64)
    cdef floating[:, :, ::1] y = y_arr
    cdef Py_ssize_t co, ci, a, b, i, j, m, n0, i_lo, i_hi, j_lo, j_hi
    cdef floating wv
    for co in range(c_out):
        for ci in range(c_in):
            for a in range(kh):
                i_lo = _lo(pad, a, stride)
                i_hi = _hi(h, pad, a, stride, ho)
                for b in range(kw):
                    wv = w[co, ci, a, b]
                    if wv == 0:
                        continue
                    j_lo = _lo(pad, b, stride)
                    j_hi = _hi(wd, pad, b, stride, wo)
                    for i in range(i_lo, i_hi + 1):
                        m = i * stride - pad + a
                        n0 = j_lo * stride - pad + b
                        for j in range(j_lo, j_hi + 1):
                            y[co, i, j] += wv * x[ci, m, n0]
                            n0 += stride
    return y_arr


def conv2d_bwd_input(floating[:, :, ::1] gy, floating[:, :, :, ::1] w, int stride, int pad,
                     int h, int wd):
    cdef Py_ssize_t c_out = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t c_in = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    if floating is float:
        gx_arr = np.zeros((c_in, h, wd), dtype=np.float32)
    else:
        gx_arr = np.zeros((c_in, h, wd), dtype=np.float64)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t co, ci, a, b, i, j, m, n0, i_lo, i_hi, j_lo, j_hi
    cdef floating wv
    for co in range(c_out):
        for ci in range(c_in):
            for a in range(kh):
                i_lo = _lo(pad, a, stride)
                i_hi = _hi(h, pad, a, stride, ho)
                for b in range(kw):
                    wv = w[co, ci, a, b]
                    if wv == 0:
                        continue
                    j_lo = _lo(pad, b, stride)
                    j_hi = _hi(wd, pad, b, stride, wo)
                    for i in range(i_lo, i_hi + 1):
                        m = i * stride - pad + a
                        n0 = j_lo * stride - pad + b
                        for j in range(j_lo, j_hi + 1):
                            gx[ci, m, n0] += wv * gy[co, i, j]
                            n0 += stride
    return gx_arr


def conv2d_bwd_kernel(floating[:, :, ::1] gy, floating[:, :, ::1] x, int stride, int pad,
                      int kh, int kw):
    cdef Py_ssize_t c_out = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], wd = x.shape[2]
    if floating is float:
        gw_arr = np.zeros((c_out, c_in, kh, kw), dtype=np.float32)
    else:
        gw_arr = np.zeros((c_out, c_in, kh, kw), dtype=np.float64)
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t co, ci, a, b, i, j, m, n0, i_lo, i_hi, j_lo, j_hi
    cdef floating acc
    for co in range(c_out):
        for ci in range(c_in):
            for a in range(kh):
                i_lo = _lo(pad, a, stride)
                i_hi = _hi(h, pad, a, stride, ho)
                for b in range(kw):
                    j_lo = _lo(pad, b, stride)
                    j_hi = _hi(wd, pad, b, stride, wo)
                    acc = 0
                    for i in range(i_lo, i_hi + 1):
                        m = i * stride - pad + a
                        n0 = j_lo * stride - pad + b
                        for j in range(j_lo, j_hi + 1):
                            acc += gy[co, i, j] * x[ci, m, n0]
                            n0 += stride
                    gw[co, ci, a, b] = acc
    return gw_arr
