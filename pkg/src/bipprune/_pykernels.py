"""Pure-numpy conv2d kernels, used when the compiled extension is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(a, p):
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x, w, pad):
    k = w.shape[2]
    windows = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))
    return np.ascontiguousarray(np.einsum("bchwij,ocij->bohw", windows, w, optimize=True))


def conv2d_backward(x, w, gout, pad):
    k = w.shape[2]
    h, wd = x.shape[2], x.shape[3]
    windows = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))
    gw = np.einsum("bchwij,bohw->ocij", windows, gout, optimize=True)
    # full correlation of gout with the flipped kernel, then crop the padding
    gwin = sliding_window_view(_pad(gout, k - 1), (k, k), axis=(2, 3))
    gxp = np.einsum("bohwij,ocij->bchw", gwin, w[:, :, ::-1, ::-1], optimize=True)
    gx = gxp[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)
