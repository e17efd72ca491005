"""Cross-domain mixup, the lambda-balanced losses, and the adversarial weight ramp."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import soft_dice_loss, softmax_cross_entropy
from .tensor import ShapeError, Tensor


@dataclass
class MixupConfig:
    alpha: float = 0.7
    apply_prob: float = 0.5
    mix_domain_labels: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"mixup alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError(f"mixup apply_prob must lie in [0, 1], got {self.apply_prob}")


@dataclass
class GammaSchedule:
    xi: float = 0.1
    kappa: float = 3.0
    max_epoch: int = 60
    literal: bool = False


@dataclass
class DomainBatch:
    images: np.ndarray  # [N,C,H,W]
    masks: np.ndarray  # [N,1,H,W]
    domains: np.ndarray  # [N] int


@dataclass
class MixedBatch:
    images: np.ndarray
    lam: np.ndarray
    pair_indices: np.ndarray  # [N,2] (p, q)
    mask_p: np.ndarray
    mask_q: np.ndarray
    dom_p: np.ndarray
    dom_q: np.ndarray
    mixed: np.ndarray


def sample_beta(alpha: float, rng: np.random.Generator, size=None):
    """Beta(alpha, alpha) variates as a ratio of two independent Gamma(alpha, 1) draws."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    x = rng.standard_gamma(alpha, size=size)
    y = rng.standard_gamma(alpha, size=size)
    return x / (x + y)


def unmixed(batch: DomainBatch) -> MixedBatch:
    n = len(batch.images)
    idx = np.arange(n)
    return MixedBatch(
        images=batch.images,
        lam=np.ones(n),
        pair_indices=np.stack([idx, idx], axis=1),
        mask_p=batch.masks,
        mask_q=batch.masks,
        dom_p=batch.domains,
        dom_q=batch.domains,
        mixed=np.zeros(n, dtype=bool),
    )


def mix_batch(batch: DomainBatch, cfg: MixupConfig, rng: np.random.Generator) -> MixedBatch:
    """Replace each item, with probability ``apply_prob``, by ``lam*x_p + (1-lam)*x_q``.

    The partner ``q`` is drawn uniformly from the other items of the batch,
    whatever their domain. A fixed number of draws is consumed per item so the
    stream does not depend on which items end up mixed.
    """
    n = len(batch.images)
    if n < 2:
        if cfg.apply_prob > 0:
            raise ValueError("mixup needs a batch of at least 2 items")
        return unmixed(batch)
    flags = rng.random(n) < cfg.apply_prob
    lam_draw = sample_beta(cfg.alpha, rng, size=n)
    offsets = rng.integers(1, n, size=n)
    p = np.arange(n)
    q = np.where(flags, (p + offsets) % n, p)
    lam = np.where(flags, lam_draw, 1.0)

    images = batch.images.copy()
    lam4 = lam[:, None, None, None]
    images[flags] = (lam4 * batch.images + (1.0 - lam4) * batch.images[q])[flags]
    return MixedBatch(
        images=images,
        lam=lam,
        pair_indices=np.stack([p, q], axis=1),
        mask_p=batch.masks,
        mask_q=batch.masks[q],
        dom_p=batch.domains,
        dom_q=batch.domains[q],
        mixed=flags,
    )


def _balance(loss_p: Tensor, loss_q: Tensor, lam: np.ndarray) -> Tensor:
    mixed = T.add(T.mul(loss_p, lam), T.mul(loss_q, 1.0 - lam))
    return T.mean_all(mixed)


def mixed_task_loss(pred: Tensor, mb: MixedBatch, eps: float = 1.0) -> Tensor:
    """Batch mean of ``lam*dice(pred, mask_p) + (1-lam)*dice(pred, mask_q)``."""
    if pred.shape != mb.mask_p.shape:
        raise ShapeError(f"mixed_task_loss: prediction {pred.shape} vs masks {mb.mask_p.shape}")
    lp = soft_dice_loss(pred, mb.mask_p, eps, reduction="none")
    lq = soft_dice_loss(pred, mb.mask_q, eps, reduction="none")
    return _balance(lp, lq, mb.lam)


def mixed_domain_loss(logits: Tensor, mb: MixedBatch, mix_labels: bool = True) -> Tensor:
    """Batch mean of ``lam*CE(dom_p) + (1-lam)*CE(dom_q)``.

    With ``mix_labels=False`` each mixed item takes the label of its dominant parent.
    """
    if logits.shape[0] != len(mb.lam):
        raise ShapeError(f"mixed_domain_loss: {logits.shape[0]} logit rows for {len(mb.lam)} items")
    if not mix_labels:
        dominant = np.where(mb.lam >= 0.5, mb.dom_p, mb.dom_q)
        return softmax_cross_entropy(logits, dominant)
    lp = softmax_cross_entropy(logits, mb.dom_p, reduction="none")
    lq = softmax_cross_entropy(logits, mb.dom_q, reduction="none")
    return _balance(lp, lq, mb.lam)


def gamma_at(sched: GammaSchedule, epoch: float) -> float:
    """Adversarial weight ramp ``xi * (2 / (1 + exp(-kappa p)) - 1)`` with p = epoch / max_epoch.

    ``literal=True`` evaluates ``2 xi / (1 + exp(-kappa p)) - 1`` instead, which is
    negative for every p when xi = 0.1; it exists for comparison only.
    """
    if not 0 <= epoch <= sched.max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {sched.max_epoch}]")
    p = epoch / sched.max_epoch
    s = 1.0 + math.exp(-sched.kappa * p)
    if sched.literal:
        return 2.0 * sched.xi / s - 1.0
    return sched.xi * (2.0 / s - 1.0)
