"""Layer primitives for the shared-encoder U-Net and its two losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, emit, register_op

for _k in (
    "conv2d",
    "max_pool2d",
    "upsample_nn",
    "concat_channels",
    "slice_channels",
    "global_avg_pool",
    "linear",
    "weighted_cross_entropy",
    "mse_loss",
):
    register_op(_k, __name__)


@dataclass
class Conv2dParams:
    weight: Tensor  # [out_ch, in_ch, kh, kw]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ValueError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"conv bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation plus bias over [B,Cin,H,W] with zero padding."""
    w, b, s, pad = p.weight, p.bias, p.stride, p.padding
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be [B,C,H,W], got {x.shape}")
    B, Cin, H, W = x.shape
    Cout, wc, kh, kw = w.shape
    if Cin != wc:
        raise ValueError(f"conv2d channel mismatch: input has {Cin}, weight expects {wc}")
    Ho = (H + 2 * pad - kh) // s + 1
    Wo = (W + 2 * pad - kw) // s + 1
    if H + 2 * pad < kh or W + 2 * pad < kw or Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = kernels.conv2d(xp, w.data, b.data, s)

    def fn(g, needs):
        gx = gw = gb = None
        g2 = g.reshape(B, Cout, Ho * Wo)
        if needs[1]:
            cols = kernels.im2col(xp, kh, kw, s, Ho, Wo)
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if needs[2]:
            gb = g2.sum(axis=(0, 2))
        if needs[0]:
            dcols = np.matmul(w.data.reshape(Cout, -1).T, g2).reshape(B, Cin, kh, kw, Ho, Wo)
            gxp = kernels.col2im(dcols, s, xp.shape)
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gw, gb

    return emit("conv2d", (x, w, b), out, fn)


def max_pool2d(x: Tensor, k: int = 2) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping k x k max pooling.

    Returns the pooled tensor and the flat in-window argmax (row-major scan,
    first maximum wins).
    """
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"max_pool2d needs spatial dims divisible by {k}, got {H}x{W}")
    Hk, Wk = H // k, W // k
    win = x.data.reshape(B, C, Hk, k, Wk, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Hk, Wk, k * k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def fn(g, needs):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(B, C, Hk, Wk, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return emit("max_pool2d", (x,), out, fn), arg


def upsample_nn(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def fn(g, needs):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return emit("upsample_nn", (x,), out, fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError(f"concat_channels needs [B,C,H,W] inputs, got {a.shape} and {b.shape}")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def fn(g, needs):
        return g[:, :c1], g[:, c1:]

    return emit("concat_channels", (a, b), out, fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``[start, stop)``; the inverse of :func:`concat_channels`."""
    C = x.shape[1]
    if not 0 <= start < stop <= C:
        raise ValueError(f"channel slice [{start},{stop}) out of range for {C} channels")
    out = x.data[:, start:stop].copy()

    def fn(g, needs):
        gx = np.zeros(x.shape)
        gx[:, start:stop] = g
        return (gx,)

    return emit("slice_channels", (x,), out, fn)


def split_channels(x: Tensor, c1: int) -> tuple[Tensor, Tensor]:
    return slice_channels(x, 0, c1), slice_channels(x, c1, x.shape[1])


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] spatial mean."""
    B, C, H, W = x.shape
    n = H * W
    out = x.data.reshape(B, C, n).sum(axis=2) / n

    def fn(g, needs):
        return (np.broadcast_to((g / n)[:, :, None, None], x.shape).copy(),)

    return emit("global_avg_pool", (x,), out, fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """[B,in] @ [in,out] + bias row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    out = kernels.matmul(x.data, w.data)
    out += b.data[None, :]

    def fn(g, needs):
        gx = g @ w.data.T if needs[0] else None
        gw = x.data.T @ g if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return emit("linear", (x, w, b), out, fn)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(z, dtype=np.float64)))


def weighted_cross_entropy(logits: Tensor, labels: Sequence[int], weights: np.ndarray | None = None) -> Tensor:
    """Batch mean of ``w[y] * -log softmax(logits)[y]``.

    ``weights=None`` is plain cross entropy; unit weights give the same value.
    """
    B, C = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape != (B,):
        raise ValueError(f"expected {B} labels, got {y.shape[0]}")
    if y.min() < 0 or y.max() >= C:
        raise ValueError(f"labels must lie in [0,{C}), got range [{y.min()},{y.max()}]")
    lsm = log_softmax(logits.data)
    nll = -lsm[np.arange(B), y]
    wy = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)[y]
    out = np.array(np.sum(wy * nll) / B)

    def fn(g, needs):
        d = np.exp(lsm)
        d[np.arange(B), y] -= 1.0
        return (d * (wy * (g.item() / B))[:, None],)

    return emit("weighted_cross_entropy", (logits,), out, fn)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    return weighted_cross_entropy(logits, labels, None)


def mse_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over all pixels, or over ``mask`` pixels if given."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        n = max(float(m.sum()), 1.0)
        diff = diff * m
    else:
        n = float(diff.size)
    out = np.array(np.sum(diff * diff) / n)

    def fn(g, needs):
        return (diff * (2.0 * g.item() / n),)

    return emit("mse_loss", (pred,), out, fn)


def compute_class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``total / (C * max(count, 1))``."""
    c = np.asarray(counts, dtype=np.int64)
    if c.size == 0:
        raise ValueError("class counts are empty")
    if (c < 0).any():
        raise ValueError("class counts must be non-negative")
    total = int(c.sum())
    if total <= 0:
        raise ValueError("class counts sum to zero")
    return total / (c.size * np.maximum(c, 1).astype(np.float64))
