# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv2d kernels (stride 1, symmetric zero padding).

Layouts: x [B, C_in, H, W], w [C_out, C_in, K, K], out [B, C_out, H_o, W_o]
with H_o = H + 2*pad - K + 1. Patch gathering (im2col) and its adjoint
scatter (col2im) are compiled loops; the contraction is a single BLAS
matmul.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef _im2col(double[:, :, :, ::1] x, Py_ssize_t K, Py_ssize_t pad,
             Py_ssize_t Ho, Py_ssize_t Wo):
    # cols[(c, i, j), (b, y, xx)]
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cols_arr = np.zeros((C * K * K, B * Ho * Wo), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, c, i, j, y, xx, iy, ix, row, base, x0, x1
    for c in range(C):
        for i in range(K):
            for j in range(K):
                row = (c * K + i) * K + j
                # columns xx with 0 <= xx + j - pad < W
                x0 = pad - j if pad > j else 0
                x1 = W + pad - j if W + pad - j < Wo else Wo
                for b in range(B):
                    for y in range(Ho):
                        iy = y + i - pad
                        if iy < 0 or iy >= H:
                            continue
                        base = (b * Ho + y) * Wo
                        for xx in range(x0, x1):
                            cols[row, base + xx] = x[b, c, iy, xx + j - pad]
    return cols_arr


cdef _col2im(double[:, ::1] cols, Py_ssize_t B, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
             Py_ssize_t K, Py_ssize_t pad, Py_ssize_t Ho, Py_ssize_t Wo):
    gx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, c, i, j, y, xx, iy, row, base, x0, x1
    for c in range(C):
        for i in range(K):
            for j in range(K):
                row = (c * K + i) * K + j
                x0 = pad - j if pad > j else 0
                x1 = W + pad - j if W + pad - j < Wo else Wo
                for b in range(B):
                    for y in range(Ho):
                        iy = y + i - pad
                        if iy < 0 or iy >= H:
                            continue
                        base = (b * Ho + y) * Wo
                        for xx in range(x0, x1):
                            gx[b, c, iy, xx + j - pad] += cols[row, base + xx]
    return gx_arr


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, int pad):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = H + 2 * pad - K + 1, Wo = W + 2 * pad - K + 1
    cols = _im2col(x, K, pad, Ho, Wo)
    out = np.asarray(w).reshape(O, -1) @ cols          # [O, B*Ho*Wo]
    return np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] gout, int pad):
    """Return (grad_x, grad_w) for upstream gradient ``gout``."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cols = _im2col(x, K, pad, Ho, Wo)
    g = np.ascontiguousarray(np.asarray(gout).transpose(1, 0, 2, 3)).reshape(O, -1)
    gw = (g @ cols.T).reshape(O, C, K, K)
    gcols = np.ascontiguousarray(np.asarray(w).reshape(O, -1).T @ g)
    return _col2im(gcols, B, C, H, W, K, pad, Ho, Wo), gw
