"""Forward kernels with a pinned summation order.

Each output element is accumulated as ``((0 + p0) + p1) + ...`` over
(in_channel, kernel_row, kernel_col) in the same order as a textbook nested
loop, and bias is added last. No fused multiply-add, no reassociation:
results are bit-identical to a scalar reference loop written in that order.
Vectorisation only happens across output positions, which are independent.

Stride-1 convolutions run over flattened padded rows: position ``p`` of a
plane maps to ``p + i*Wp + j`` in the input, so the inner loop is one long
contiguous run. The last ``kw - 1`` columns of every row are junk and get
cropped.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _conv3x3_rows(xp, w, out_full):
    # four output channels per pass share the nine input loads; each keeps its own chain
    B, Cin, Hp, Wp = xp.shape
    Cout = w.shape[0]
    n = (Hp - 3) * Wp + (Wp - 2)
    r1 = Wp
    r2 = 2 * Wp
    blocked = Cout - Cout % 4
    for b in range(B):
        for c0 in range(0, blocked, 4):
            a0 = out_full[b, c0].reshape(-1)
            a1 = out_full[b, c0 + 1].reshape(-1)
            a2 = out_full[b, c0 + 2].reshape(-1)
            a3 = out_full[b, c0 + 3].reshape(-1)
            for ci in range(Cin):
                q = xp[b, ci].reshape(-1)
                k0 = w[c0, ci].reshape(-1)
                k1 = w[c0 + 1, ci].reshape(-1)
                k2 = w[c0 + 2, ci].reshape(-1)
                k3 = w[c0 + 3, ci].reshape(-1)
                for p in range(n):
                    v0 = q[p]
                    v1 = q[p + 1]
                    v2 = q[p + 2]
                    v3 = q[p + r1]
                    v4 = q[p + r1 + 1]
                    v5 = q[p + r1 + 2]
                    v6 = q[p + r2]
                    v7 = q[p + r2 + 1]
                    v8 = q[p + r2 + 2]
                    a0[p] = _taps9(a0[p], k0, v0, v1, v2, v3, v4, v5, v6, v7, v8)
                    a1[p] = _taps9(a1[p], k1, v0, v1, v2, v3, v4, v5, v6, v7, v8)
                    a2[p] = _taps9(a2[p], k2, v0, v1, v2, v3, v4, v5, v6, v7, v8)
                    a3[p] = _taps9(a3[p], k3, v0, v1, v2, v3, v4, v5, v6, v7, v8)
        for co in range(blocked, Cout):
            acc = out_full[b, co].reshape(-1)
            for ci in range(Cin):
                q = xp[b, ci].reshape(-1)
                k = w[co, ci].reshape(-1)
                for p in range(n):
                    acc[p] = _taps9(
                        acc[p], k, q[p], q[p + 1], q[p + 2], q[p + r1], q[p + r1 + 1],
                        q[p + r1 + 2], q[p + r2], q[p + r2 + 1], q[p + r2 + 2],
                    )


@njit(cache=True, inline="always")
def _taps9(s, k, v0, v1, v2, v3, v4, v5, v6, v7, v8):
    s += k[0] * v0
    s += k[1] * v1
    s += k[2] * v2
    s += k[3] * v3
    s += k[4] * v4
    s += k[5] * v5
    s += k[6] * v6
    s += k[7] * v7
    s += k[8] * v8
    return s


@njit(cache=True)
def _conv_rows(xp, w, out_full):
    B, Cin, Hp, Wp = xp.shape
    Cout, _, kh, kw = w.shape
    n = (Hp - kh) * Wp + (Wp - kw + 1)
    for b in range(B):
        for co in range(Cout):
            acc = out_full[b, co].reshape(-1)
            for ci in range(Cin):
                q = xp[b, ci].reshape(-1)
                for i in range(kh):
                    for j in range(kw):
                        wv = w[co, ci, i, j]
                        off = i * Wp + j
                        for p in range(n):
                            acc[p] += wv * q[off + p]


@njit(cache=True)
def _conv_strided(xp, w, stride, out):
    B, Cin = xp.shape[0], xp.shape[1]
    Cout, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    Ho, Wo = out.shape[2], out.shape[3]
    for b in range(B):
        for co in range(Cout):
            acc = out[b, co]
            for ci in range(Cin):
                plane = xp[b, ci]
                for i in range(kh):
                    for j in range(kw):
                        wv = w[co, ci, i, j]
                        for y in range(Ho):
                            row = plane[y * stride + i]
                            for x in range(Wo):
                                acc[y, x] += wv * row[x * stride + j]


@njit(cache=True)
def _add_bias(out, bias):
    B, C, H, W = out.shape
    for b in range(B):
        for c in range(C):
            bv = bias[c]
            for y in range(H):
                for x in range(W):
                    out[b, c, y, x] += bv


@njit(cache=True)
def _matmul_acc(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for p in range(k):
            av = a[i, p]
            for j in range(n):
                out[i, j] += av * b[p, j]


@njit(cache=True)
def _im2col(xp, kh, kw, stride, Ho, Wo, cols):
    B, C = xp.shape[0], xp.shape[1]
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for y in range(Ho):
                        for x in range(Wo):
                            cols[b, c, i, j, y, x] = xp[b, c, y * stride + i, x * stride + j]


@njit(cache=True)
def _col2im(dcols, stride, gxp):
    B, C, kh, kw, Ho, Wo = dcols.shape
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for y in range(Ho):
                        for x in range(Wo):
                            gxp[b, c, y * stride + i, x * stride + j] += dcols[b, c, i, j, y, x]


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Patches as [B, C*kh*kw, Ho*Wo]."""
    B, C = xp.shape[:2]
    cols = np.empty((B, C, kh, kw, Ho, Wo))
    _im2col(np.ascontiguousarray(xp), kh, kw, stride, Ho, Wo, cols)
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def col2im(dcols: np.ndarray, stride: int, padded_shape: tuple[int, ...]) -> np.ndarray:
    """Scatter-add patch gradients [B,C,kh,kw,Ho,Wo] back onto the padded input grid."""
    gxp = np.zeros(padded_shape)
    _col2im(np.ascontiguousarray(dcols), stride, gxp)
    return gxp


def conv2d(xp: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Cross-correlate an already padded input ``xp`` [B,Cin,Hp,Wp] with ``w``."""
    B, _, Hp, Wp = xp.shape
    Cout, _, kh, kw = w.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if stride == 1:
        full = np.zeros((B, Cout, Ho, Wp))
        if kh == 3 and kw == 3:
            _conv3x3_rows(xp, w, full)
        else:
            _conv_rows(xp, w, full)
        out = np.ascontiguousarray(full[:, :, :, :Wo])
    else:
        out = np.zeros((B, Cout, Ho, Wo))
        _conv_strided(xp, w, stride, out)
    _add_bias(out, np.ascontiguousarray(bias, dtype=np.float64))
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    _matmul_acc(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64), out)
    return out
