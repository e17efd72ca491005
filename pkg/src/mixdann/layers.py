"""Differentiable layers for the micro U-Net and the domain discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, make_op, matmul, relu, sigmoid, softmax  # noqa: F401

__all__ = [
    "Conv2DParams",
    "GrlConfig",
    "conv2d",
    "maxpool2",
    "upsample2_nearest",
    "dense",
    "grl",
    "soft_dice_loss",
    "softmax_cross_entropy",
    "relu",
    "sigmoid",
    "softmax",
]


@dataclass
class Conv2DParams:
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 1


@dataclass
class GrlConfig:
    gamma: float = 0.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, p: Conv2DParams) -> Tensor:
    """Cross-correlation of [N,C,H,W] input with [O,C,kh,kw] kernel, plus bias."""
    w, b, s, pad = p.kernel, p.bias, p.stride, p.padding
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: expected [N,C,H,W] input, got {x.shape}")
    o, c, kh, kw = w.shape
    n, cx, h, wd = x.shape
    if cx != c:
        raise ShapeError(f"conv2d: input has {cx} channels, kernel expects {c}")
    if b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} vs {o} output channels")
    ho = (h + 2 * pad - kh) // s + 1
    wo = (wd + 2 * pad - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size {(ho, wo)} for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, s, ho, wo)
    w2 = w.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo) + b.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)
    hp, wp = xp.shape[2:]

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad and s == 1 and 2 * pad == kh - 1 == kw - 1:
            # "same" stride-1 conv: input grad is a conv of the grad with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
            wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (wt @ _im2col(gp, kh, kw, 1, h, wd)).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j]
            gx = dxp[:, :, pad : pad + h, pad : pad + wd].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return make_op(out, (x, w, b), bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2. Ties route the gradient to the first position in scan order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_op(out, (x,), bw, "maxpool2")


def upsample2_nearest(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), bw, "upsample2")


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map of [N,in] rows by W [in,out] and bias [out]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"dense: shape mismatch {x.shape} vs {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} vs {W.shape[1]} outputs")
    xd, Wd = x.data, W.data
    out = xd @ Wd + b.data

    def bw(g):
        return (
            g @ Wd.T if x.requires_grad else None,
            xd.T @ g if W.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return make_op(out, (x, W, b), bw, "dense")


def grl(x: Tensor, cfg: GrlConfig) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times -gamma backward."""
    factor = -float(cfg.gamma)
    return make_op(x.data, (x,), lambda g: (g * factor,), "grl")


def soft_dice_loss(pred: Tensor, target, eps: float = 1.0, reduction: str = "mean") -> Tensor:
    """Per-item soft Dice loss ``1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)``.

    The first axis indexes items. ``reduction="none"`` returns one loss per item.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"soft_dice_loss: shape mismatch {pred.shape} vs {t.shape}")
    n = pred.shape[0]
    p2 = pred.data.reshape(n, -1)
    t2 = t.reshape(n, -1)
    inter = (p2 * t2).sum(axis=1)
    denom = p2.sum(axis=1) + t2.sum(axis=1) + eps
    num = 2.0 * inter + eps
    per_item = 1.0 - num / denom

    def grad_items(gi):
        # d/dp of -(num/denom) = -(2 t denom - num) / denom^2
        d = -(2.0 * t2 * denom[:, None] - num[:, None]) / (denom[:, None] ** 2)
        return (gi[:, None] * d).reshape(pred.shape)

    if reduction == "none":
        return make_op(per_item, (pred,), lambda g: (grad_items(g),), "soft_dice")
    if reduction == "mean":
        return make_op(np.array(per_item.mean()), (pred,), lambda g: (grad_items(np.full(n, float(g) / n)),), "soft_dice")
    raise ValueError(f"unknown reduction {reduction!r}")


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or per-row) ``-log softmax(logits)[label]`` for [N,k] logits."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected [N,k] logits, got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {y.size} labels for {n} rows")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    per_row = -logp[rows, y]
    probs = np.exp(logp)

    def grad_rows(gr):
        d = probs.copy()
        d[rows, y] -= 1.0
        return gr[:, None] * d

    if reduction == "none":
        return make_op(per_row, (logits,), lambda g: (grad_rows(g),), "cross_entropy")
    if reduction == "mean":
        return make_op(np.array(per_row.mean()), (logits,), lambda g: (grad_rows(np.full(n, float(g) / n)),), "cross_entropy")
    raise ValueError(f"unknown reduction {reduction!r}")
