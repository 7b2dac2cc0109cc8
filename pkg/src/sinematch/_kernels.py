"""Numba kernels for the 3x3 convolution hot path.

float64 BLAS on this class of shapes (few channels, 32x32 maps) is
memory-bound and loses badly to a direct channels-last loop; these kernels
run the convolution without materializing im2col patches. Layout at the
tensor API stays NCHW; the wrappers below transpose in and out.

All kernels are single-threaded and IEEE-deterministic run to run.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def _conv3x3_nhwc(xp, w, out):
    # xp: (N, H+2, W+2, C) zero-padded input, w: (3, 3, C, F), out: (N, H, W, F) zeroed
    N, Hp, Wp, C = xp.shape
    F = w.shape[3]
    H, W = Hp - 2, Wp - 2
    for n in range(N):
        for i in range(H):
            for j in range(W):
                acc = out[n, i, j]
                for di in range(3):
                    xr = xp[n, i + di]
                    for dj in range(3):
                        xv = xr[j + dj]
                        wv = w[di, dj]
                        for c in range(C):
                            s = xv[c]
                            for f in range(F):
                                acc[f] += s * wv[c, f]


@njit(cache=True, fastmath=True)
def _conv3x3_grad_w(xp, g, gw):
    # xp: (N, H+2, W+2, C), g: (N, H, W, F) upstream grad, gw: (3, 3, C, F) zeroed
    N, Hp, Wp, C = xp.shape
    F = g.shape[3]
    H, W = Hp - 2, Wp - 2
    for n in range(N):
        for i in range(H):
            for j in range(W):
                gv = g[n, i, j]
                for di in range(3):
                    xr = xp[n, i + di]
                    for dj in range(3):
                        xv = xr[j + dj]
                        acc = gw[di, dj]
                        for c in range(C):
                            s = xv[c]
                            for f in range(F):
                                acc[c, f] += s * gv[f]


def conv3x3_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlate x (N,C,H,W) with w (F,C,3,3), stride 1, zero pad 1."""
    N, C, H, W = x.shape
    F = w.shape[0]
    xp = np.zeros((N, H + 2, W + 2, C), dtype=np.float64)
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    w_cl = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    out = np.zeros((N, H, W, F), dtype=np.float64)
    _conv3x3_nhwc(xp, w_cl, out)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv3x3_backward(
    x: np.ndarray, w: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv3x3_forward w.r.t. x and w given upstream grad g."""
    N, C, H, W = x.shape
    F = w.shape[0]
    g_cl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))

    # grad_x is the full correlation of g with the kernel flipped spatially
    # and transposed in its channel axes.
    gp = np.zeros((N, H + 2, W + 2, F), dtype=np.float64)
    gp[:, 1:-1, 1:-1, :] = g_cl
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1))
    gx = np.zeros((N, H, W, C), dtype=np.float64)
    _conv3x3_nhwc(gp, w_flip, gx)

    xp = np.zeros((N, H + 2, W + 2, C), dtype=np.float64)
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    gw_cl = np.zeros((3, 3, C, F), dtype=np.float64)
    _conv3x3_grad_w(xp, g_cl, gw_cl)

    gx_nchw = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    gw = np.ascontiguousarray(gw_cl.transpose(3, 2, 0, 1))
    return gx_nchw, gw


def warmup() -> None:
    """Trigger JIT compilation (cached on disk after the first call)."""
    x = np.zeros((1, 2, 4, 4))
    w = np.zeros((3, 2, 3, 3))
    y = conv3x3_forward(x, w)
    conv3x3_backward(x, w, y)
