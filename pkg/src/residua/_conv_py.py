"""Pure-numpy versions of the kernels in ``_conv.pyx``.

``im2col`` / ``col2im`` visit kernel offsets in the same order as the
compiled loops, so those two agree with the extension bit for bit. The
direct kernels agree to round-off only.
"""
import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _padded(x, pad):
    if pad == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, width)


def im2col(x, k, stride, pad):
    c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = _padded(x, pad)
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return cols.reshape(c * k * k, ho * wo)


def col2im(cols, c, h, w, k, stride, pad):
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if cols.shape != (c * k * k, ho * wo):
        raise ValueError("column matrix does not match the requested geometry")
    cols = cols.reshape(c, k, k, ho, wo)
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, ki, kj]
    return np.ascontiguousarray(xp[:, pad:pad + h, pad:pad + w])


def direct_forward(x, weight, stride, pad):
    n, c, h, w = x.shape
    o, k = weight.shape[0], weight.shape[2]
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = _padded(x, pad)
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            out += np.einsum("oc,nchw->nohw", weight[:, :, ki, kj], patch)
    return out


def direct_grad_input(grad_out, weight, h, w, stride, pad):
    n, o, ho, wo = grad_out.shape
    c, k = weight.shape[1], weight.shape[2]
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += np.einsum(
                "oc,nohw->nchw", weight[:, :, ki, kj], grad_out)
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w])


def direct_grad_weight(x, grad_out, k, stride, pad):
    n, c, h, w = x.shape
    o, ho, wo = grad_out.shape[1:]
    xp = _padded(x, pad)
    gw = np.empty((o, c, k, k), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            gw[:, :, ki, kj] = np.einsum("nohw,nchw->oc", grad_out, patch)
    return gw
