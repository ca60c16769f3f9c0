# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Two families: patch gather/scatter (im2col / col2im) feeding a BLAS matrix
product, and direct loops for layers with very few output maps, where the
patch matrix would be far larger than the work done on it.
"""
import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # first output index whose input coordinate o*stride + off - pad is >= 0
    cdef Py_ssize_t num = pad - off
    if num <= 0:
        return 0
    return (num + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t pad, Py_ssize_t stride,
                           Py_ssize_t size, Py_ssize_t out_size) nogil:
    # one past the last output index whose input coordinate is < size
    cdef Py_ssize_t num = size - 1 + pad - off
    if num < 0:
        return 0
    num = num // stride + 1
    return num if num < out_size else out_size


def im2col(real[:, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c * k * k, ho * wo), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t ci, ki, kj, oy, ox, iy, row, lo, hi, ylo, yhi
    cdef real* dst
    cdef real* src
    with nogil:
        for ci in range(c):
            for ki in range(k):
                ylo = _lo(ki, pad, stride)
                yhi = _hi(ki, pad, stride, h, ho)
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    lo = _lo(kj, pad, stride)
                    hi = _hi(kj, pad, stride, w, wo)
                    for oy in range(ylo, yhi):
                        iy = oy * stride + ki - pad
                        dst = &cols[row, oy * wo]
                        src = &x[ci, iy, 0]
                        if stride == 1:
                            for ox in range(lo, hi):
                                dst[ox] = src[ox + kj - pad]
                        else:
                            for ox in range(lo, hi):
                                dst[ox] = src[ox * stride + kj - pad]
    return out


def col2im(real[:, ::1] cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    if cols.shape[0] != c * k * k or cols.shape[1] != ho * wo:
        raise ValueError("column matrix does not match the requested geometry")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((c, h, w), dtype=dtype)
    cdef real[:, :, ::1] x = out
    cdef Py_ssize_t ci, ki, kj, oy, ox, iy, row, lo, hi, ylo, yhi
    cdef real* dst
    cdef real* src
    with nogil:
        for ci in range(c):
            for ki in range(k):
                ylo = _lo(ki, pad, stride)
                yhi = _hi(ki, pad, stride, h, ho)
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    lo = _lo(kj, pad, stride)
                    hi = _hi(kj, pad, stride, w, wo)
                    for oy in range(ylo, yhi):
                        iy = oy * stride + ki - pad
                        src = &cols[row, oy * wo]
                        dst = &x[ci, iy, 0]
                        if stride == 1:
                            for ox in range(lo, hi):
                                dst[ox + kj - pad] += src[ox]
                        else:
                            for ox in range(lo, hi):
                                dst[ox * stride + kj - pad] += src[ox]
    return out


def direct_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] weight,
                   Py_ssize_t stride, Py_ssize_t pad):
    """out[b, o, y, x] = sum over (c, ki, kj) of weight[o, c, ki, kj] * x[b, c, y*s+ki-p, x*s+kj-p]."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t o = weight.shape[0], k = weight.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    result = np.zeros((n, o, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = result
    cdef Py_ssize_t b, oc, ic, ki, kj, oy, ox, lo, hi, ylo, yhi, shift
    cdef real wv
    cdef real* dst
    cdef real* src
    with nogil:
        for b in range(n):
            for oc in range(o):
                for ic in range(c):
                    for ki in range(k):
                        ylo = _lo(ki, pad, stride)
                        yhi = _hi(ki, pad, stride, h, ho)
                        for kj in range(k):
                            wv = weight[oc, ic, ki, kj]
                            lo = _lo(kj, pad, stride)
                            hi = _hi(kj, pad, stride, w, wo)
                            shift = kj - pad
                            for oy in range(ylo, yhi):
                                dst = &out[b, oc, oy, 0]
                                src = &x[b, ic, oy * stride + ki - pad, 0]
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        dst[ox] += wv * src[ox + shift]
                                else:
                                    for ox in range(lo, hi):
                                        dst[ox] += wv * src[ox * stride + shift]
    return result


def direct_grad_input(real[:, :, :, ::1] grad_out, real[:, :, :, ::1] weight,
                      Py_ssize_t h, Py_ssize_t w, Py_ssize_t stride, Py_ssize_t pad):
    """Adjoint of :func:`direct_forward` with respect to ``x``."""
    cdef Py_ssize_t n = grad_out.shape[0], o = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    cdef Py_ssize_t c = weight.shape[1], k = weight.shape[2]
    if weight.shape[0] != o:
        raise ValueError("weight and gradient disagree on output channels")
    dtype = np.float32 if real is float else np.float64
    result = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] gx = result
    cdef Py_ssize_t b, oc, ic, ki, kj, oy, ox, lo, hi, ylo, yhi, shift
    cdef real wv
    cdef real* dst
    cdef real* src
    with nogil:
        for b in range(n):
            for ic in range(c):
                for oc in range(o):
                    for ki in range(k):
                        ylo = _lo(ki, pad, stride)
                        yhi = _hi(ki, pad, stride, h, ho)
                        for kj in range(k):
                            wv = weight[oc, ic, ki, kj]
                            lo = _lo(kj, pad, stride)
                            hi = _hi(kj, pad, stride, w, wo)
                            shift = kj - pad
                            for oy in range(ylo, yhi):
                                src = &grad_out[b, oc, oy, 0]
                                dst = &gx[b, ic, oy * stride + ki - pad, 0]
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        dst[ox + shift] += wv * src[ox]
                                else:
                                    for ox in range(lo, hi):
                                        dst[ox * stride + shift] += wv * src[ox]
    return result


def direct_grad_weight(real[:, :, :, ::1] x, real[:, :, :, ::1] grad_out,
                       Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    """Gradient of :func:`direct_forward` with respect to ``weight``."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t o = grad_out.shape[1], ho = grad_out.shape[2], wo = grad_out.shape[3]
    dtype = np.float32 if real is float else np.float64
    result = np.zeros((o, c, k, k), dtype=dtype)
    cdef real[:, :, :, ::1] gw = result
    row_buf = np.zeros(wo, dtype=dtype)
    cdef real[::1] rowacc = row_buf
    cdef Py_ssize_t b, oc, ic, ki, kj, oy, ox, lo, hi, ylo, yhi, shift
    cdef real acc
    cdef real* g
    cdef real* src
    cdef real* ra = &rowacc[0]
    with nogil:
        for oc in range(o):
            for ic in range(c):
                for ki in range(k):
                    ylo = _lo(ki, pad, stride)
                    yhi = _hi(ki, pad, stride, h, ho)
                    for kj in range(k):
                        lo = _lo(kj, pad, stride)
                        hi = _hi(kj, pad, stride, w, wo)
                        shift = kj - pad
                        for ox in range(wo):
                            ra[ox] = 0
                        # per-column partial sums keep the inner loop vectorizable
                        for b in range(n):
                            for oy in range(ylo, yhi):
                                g = &grad_out[b, oc, oy, 0]
                                src = &x[b, ic, oy * stride + ki - pad, 0]
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        ra[ox] += g[ox] * src[ox + shift]
                                else:
                                    for ox in range(lo, hi):
                                        ra[ox] += g[ox] * src[ox * stride + shift]
                        acc = 0
                        for ox in range(wo):
                            acc = acc + ra[ox]
                        gw[oc, ic, ki, kj] = acc
    return result
