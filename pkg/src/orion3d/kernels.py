"""JIT gather/scatter kernels for the dense 3D convolution and pooling paths.

Layout is channels-last throughout: activations are (N, D, H, W, C).  The
im2col matrix is (N*P, C*k^3) with column order (kd, kh, kw, c) so that the
innermost copy runs over contiguous channel lanes; the matching weight matrix
is (C*k^3, O).  GEMMs stay in BLAS; only the bandwidth-bound reshuffles live
here.  The input-gradient pass fuses the (grad @ W.T) product with the
col2im scatter so the full column-gradient matrix is never materialized.

All kernels are deterministic: parallelism is over disjoint batch slices.
"""

from __future__ import annotations

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def im2col3d(x, col, k, s):
    # x: (N, D, H, W, C) -> col: (N*P, C*k^3), P = Do*Ho*Wo
    N, D, H, W, C = x.shape
    Do = (D - k) // s + 1
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    P = Do * Ho * Wo
    for n in prange(N):
        for d in range(Do):
            for h in range(Ho):
                for w in range(Wo):
                    row = n * P + (d * Ho + h) * Wo + w
                    q = 0
                    for i in range(k):
                        for j in range(k):
                            for l in range(k):
                                for c in range(C):
                                    col[row, q] = x[n, d * s + i, h * s + j, w * s + l, c]
                                    q += 1


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_input_grad(gy, wt, gx, k, s):
    # gy: (N*P, O); wt: (O, C*k^3) row-major; gx: (N, D, H, W, C), pre-zeroed.
    # Fuses gcol = gy @ wt with the overlapping-window scatter-add.
    N, D, H, W, C = gx.shape
    Do = (D - k) // s + 1
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    P = Do * Ho * Wo
    O, CK = wt.shape
    for n in prange(N):
        buf = np.zeros(CK, dtype=gy.dtype)
        for d in range(Do):
            for h in range(Ho):
                for w in range(Wo):
                    row = n * P + (d * Ho + h) * Wo + w
                    for q in range(CK):
                        buf[q] = 0.0
                    for o in range(O):
                        g = gy[row, o]
                        for q in range(CK):
                            buf[q] += g * wt[o, q]
                    q = 0
                    for i in range(k):
                        for j in range(k):
                            for l in range(k):
                                for c in range(C):
                                    gx[n, d * s + i, h * s + j, w * s + l, c] += buf[q]
                                    q += 1


@njit(parallel=True, cache=True)
def maxpool3d_forward(x, y, idx, k, s):
    # y: (N, Do, Ho, Wo, C); idx stores the flat (D*H*W) offset of each
    # window maximum, first occurrence winning on ties.
    N, D, H, W, C = x.shape
    Do = (D - k) // s + 1
    Ho = (H - k) // s + 1
    Wo = (W - k) // s + 1
    for n in prange(N):
        for d in range(Do):
            for h in range(Ho):
                for w in range(Wo):
                    for c in range(C):
                        best = x[n, d * s, h * s, w * s, c]
                        arg = (d * s * H + h * s) * W + w * s
                        for i in range(k):
                            for j in range(k):
                                for l in range(k):
                                    v = x[n, d * s + i, h * s + j, w * s + l, c]
                                    if v > best:
                                        best = v
                                        arg = ((d * s + i) * H + h * s + j) * W + w * s + l
                        y[n, d, h, w, c] = best
                        idx[n, d, h, w, c] = arg


@njit(parallel=True, cache=True)
def maxpool3d_backward(gy, idx, gx):
    # gx: (N, D, H, W, C), pre-zeroed; routes each output grad to its argmax.
    N, Do, Ho, Wo, C = gy.shape
    _, D, H, W, _ = gx.shape
    for n in prange(N):
        for d in range(Do):
            for h in range(Ho):
                for w in range(Wo):
                    for c in range(C):
                        a = idx[n, d, h, w, c]
                        dd = a // (H * W)
                        hh = (a // W) % H
                        ww = a % W
                        gx[n, dd, hh, ww, c] += gy[n, d, h, w, c]


def warmup(dtype=np.float32) -> None:
    """Compile the kernels for one dtype so later timings are steady."""
    x = np.zeros((1, 4, 4, 4, 2), dtype=dtype)
    col = np.zeros((8, 16), dtype=dtype)
    im2col3d(x, col, 2, 2)
    gy = np.zeros((8, 3), dtype=dtype)
    wt = np.zeros((3, 16), dtype=dtype)
    gx = np.zeros_like(x)
    conv3d_input_grad(gy, wt, gx, 2, 2)
    y = np.zeros((1, 2, 2, 2, 2), dtype=dtype)
    idx = np.zeros((1, 2, 2, 2, 2), dtype=np.int64)
    maxpool3d_forward(x, y, idx, 2, 2)
    maxpool3d_backward(y, idx, gx)
