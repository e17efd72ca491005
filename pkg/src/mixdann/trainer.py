"""Training loop for the four variants (DeepAll, DANN, Mixup, MixDANN).

Per mini-batch: optional mixup, then a task update of (theta, sigma) with one
Adam optimizer, then, for the adversarial variants, a domain update of
(theta, mu) with a second Adam optimizer. The extractor sees the domain loss
through the gradient reversal layer, so the same backward pass makes the
discriminator descend and the extractor ascend.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .dann_mixup import DomainBatch, GammaSchedule, MixupConfig, gamma_at, mix_batch, mixed_domain_loss, mixed_task_loss, unmixed
from .layers import GrlConfig
from .metrics import dsc
from .models import ModelBundle, discriminate, init_params, r_theta, unet_forward
from .synth import DomainDataset

log = logging.getLogger(__name__)

VARIANTS = ("DeepAll", "DANN", "Mixup", "MixDANN")
ADVERSARIAL = {"DANN", "MixDANN"}
MIXING = {"Mixup", "MixDANN"}


class NumericError(RuntimeError):
    def __init__(self, epoch: int, batch: int, what: str):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    variant: str = "MixDANN"
    lr: float = 2e-4
    epochs: int = 40
    batch_size: int = 4
    seed: int = 0
    mixup: MixupConfig = field(default_factory=MixupConfig)
    gamma: GammaSchedule = field(default_factory=GammaSchedule)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augment_rotation: bool = True
    augment_scale: bool = True
    augment_shear: bool = True
    base_channels: int = 8
    in_channels: int = 1
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @property
    def schedule(self) -> GammaSchedule:
        return GammaSchedule(self.gamma.xi, self.gamma.kappa, self.epochs, self.gamma.literal)


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    domain_loss: float
    gamma: float
    val_dsc: float
    seconds: float
    domain_acc: float = float("nan")


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "task_loss", "domain_loss", "gamma", "val_dsc", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.task_loss), repr(r.domain_loss), repr(r.gamma), repr(r.val_dsc), f"{r.seconds:.3f}"])


class Adam:
    """Adam over a named parameter dict; state is kept per name."""

    def __init__(self, params: dict[str, T.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------- data handling


def split_train_val(ds: DomainDataset, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    n = len(ds)
    order = np.random.default_rng([seed, 13, ds.domain_id]).permutation(n)
    n_val = int(round(n * val_fraction))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, cfg: TrainConfig):
    """Random rotation (+-15 deg), isotropic scale (0.9-1.1) and shear (+-0.1), each with p=0.5.

    Always consumes six draws so the stream position does not depend on outcomes.
    """
    coins = rng.random(3)
    angle = np.deg2rad(rng.uniform(-15, 15))
    zoom = rng.uniform(0.9, 1.1)
    shear = rng.uniform(-0.1, 0.1)
    A = np.eye(2)
    used = False
    if cfg.augment_rotation and coins[0] < 0.5:
        c, s = np.cos(angle), np.sin(angle)
        A = A @ np.array([[c, -s], [s, c]])
        used = True
    if cfg.augment_scale and coins[1] < 0.5:
        A = A @ np.diag([zoom, zoom])
        used = True
    if cfg.augment_shear and coins[2] < 0.5:
        A = A @ np.array([[1.0, shear], [0.0, 1.0]])
        used = True
    if not used:
        return image, mask
    # affine_transform maps output coords to input coords: in = inv(A) @ (out - c) + c
    Ainv = np.linalg.inv(A)
    center = (np.array(mask.shape) - 1) / 2.0
    offset = center - Ainv @ center
    img = np.stack([ndimage.affine_transform(ch, Ainv, offset, order=1, mode="nearest") for ch in image])
    msk = ndimage.affine_transform(mask, Ainv, offset, order=0, mode="constant", cval=0.0)
    return img, msk


class StratifiedBatches:
    """Equal number of items per source domain in every batch; reshuffled each epoch."""

    def __init__(self, sources: list[DomainDataset], train_idx: list[list[int]], batch_size: int, seed: int):
        self.sources, self.train_idx = sources, train_idx
        self.per_domain = max(1, batch_size // len(sources))
        self.rng = np.random.default_rng([seed, 10])
        self.n_batches = min(len(ix) for ix in train_idx) // self.per_domain
        if self.n_batches == 0:
            raise ValueError("not enough training subjects for one stratified batch")

    def epoch(self):
        perms = [self.rng.permutation(ix) for ix in self.train_idx]
        for b in range(self.n_batches):
            picks = []
            for d, perm in enumerate(perms):
                for i in perm[b * self.per_domain : (b + 1) * self.per_domain]:
                    picks.append((d, int(i)))
            yield picks


def _gather(sources, picks, aug_rng, cfg: TrainConfig | None) -> DomainBatch:
    imgs, masks, doms = [], [], []
    for d, i in picks:
        s = sources[d].subjects[i]
        img, msk = s.image, s.mask
        if cfg is not None:
            img, msk = augment(img, msk, aug_rng, cfg)
        imgs.append(img)
        masks.append(msk[None])
        doms.append(d)
    return DomainBatch(np.stack(imgs), np.stack(masks), np.array(doms, dtype=np.int64))


# ---------------------------------------------------------------- train / predict


def predict_proba(bundle: ModelBundle, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            _, prob = unet_forward(bundle.unet, T.Tensor(images[i : i + chunk]))
            out.append(prob.data)
    return np.concatenate(out)


def predict(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    """Binary masks [N,H,W]; a pixel is foreground iff its probability is strictly above 0.5."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != bundle.unet.in_channels:
        raise T.ShapeError(f"expected [N,{bundle.unet.in_channels},H,W] images, got {images.shape}")
    return (predict_proba(bundle, images) > 0.5)[:, 0].astype(np.uint8)


def _source_val_dsc(bundle, sources, val_idx) -> float:
    scores = []
    for ds, ix in zip(sources, val_idx):
        if not ix:
            continue
        imgs = np.stack([ds.subjects[i].image for i in ix])
        pred = predict(bundle, imgs)
        scores += [dsc(ds.subjects[i].mask, p) for i, p in zip(ix, pred)]
    return float(np.mean(scores)) if scores else float("nan")


def train(cfg: TrainConfig, sources: list[DomainDataset], on_step=None) -> tuple[ModelBundle, TrainLog]:
    """Train ``cfg.variant`` on ``sources``; returns the best-validation-epoch model and the log.

    ``on_step(kind, bundle)`` is called after every parameter update with kind
    ``"task"`` or ``"domain"``.
    """
    if not sources or any(len(s) == 0 for s in sources):
        raise ValueError("training needs non-empty source datasets")
    adversarial = cfg.variant in ADVERSARIAL
    mixing = cfg.variant in MIXING
    k = len(sources)
    if adversarial and k < 2:
        raise ValueError(f"{cfg.variant} needs at least 2 source domains, got {k}")
    image_size = sources[0].subjects[0].image.shape[-1]

    bundle = init_params(cfg.seed, cfg.in_channels, cfg.base_channels, k if adversarial else 0, image_size)
    task_opt = Adam(bundle.named_params("theta", "sigma"), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    dom_opt = None
    if adversarial:
        dom_opt = Adam(bundle.named_params("theta", "mu"), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    splits = [split_train_val(ds, cfg.val_fraction, cfg.seed) for ds in sources]
    train_idx, val_idx = [s[0] for s in splits], [s[1] for s in splits]
    batches = StratifiedBatches(sources, train_idx, cfg.batch_size, cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 11])
    mix_rng = np.random.default_rng([cfg.seed, 12])
    augment_any = cfg.augment_rotation or cfg.augment_scale or cfg.augment_shear
    schedule = cfg.schedule

    log_ = TrainLog()
    best_dsc, best_snap = -math.inf, None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        gamma = gamma_at(schedule, epoch) if adversarial else 0.0
        if gamma < 0:
            raise ValueError(f"gamma schedule produced a negative weight ({gamma}) at epoch {epoch}")
        grl_cfg = GrlConfig(gamma)
        task_losses, dom_losses, correct, seen = [], [], 0, 0
        for b, picks in enumerate(batches.epoch()):
            batch = _gather(sources, picks, aug_rng, cfg if augment_any else None)
            mb = mix_batch(batch, cfg.mixup, mix_rng) if mixing else unmixed(batch)
            x = T.Tensor(mb.images)

            task_opt.zero_grad()
            _, prob = unet_forward(bundle.unet, x)
            loss = mixed_task_loss(prob, mb)
            if not np.isfinite(loss.item()):
                raise NumericError(epoch, b, "task loss")
            T.backward(loss)
            task_opt.step()
            task_losses.append(loss.item())
            if on_step:
                on_step("task", bundle)

            if adversarial:
                dom_opt.zero_grad()
                features, _ = r_theta(bundle.unet, x)
                logits = discriminate(bundle.disc, features, grl_cfg)
                dloss = mixed_domain_loss(logits, mb, cfg.mixup.mix_domain_labels)
                if not np.isfinite(dloss.item()):
                    raise NumericError(epoch, b, "domain loss")
                T.backward(dloss)
                dom_opt.step()
                dom_losses.append(dloss.item())
                correct += int((logits.data.argmax(axis=1) == mb.dom_p).sum())
                seen += len(mb.dom_p)
                if on_step:
                    on_step("domain", bundle)

        val = _source_val_dsc(bundle, sources, val_idx)
        rec = EpochRecord(
            epoch=epoch,
            task_loss=float(np.mean(task_losses)),
            domain_loss=float(np.mean(dom_losses)) if dom_losses else float("nan"),
            gamma=gamma,
            val_dsc=val,
            seconds=time.perf_counter() - t0,
            domain_acc=correct / seen if seen else float("nan"),
        )
        log_.records.append(rec)
        log.info("%s epoch %d task %.4f domain %.4f gamma %.4f val_dsc %.4f (%.1fs)",
                 cfg.variant, epoch, rec.task_loss, rec.domain_loss, gamma, val, rec.seconds)
        if not np.isnan(val) and val > best_dsc:
            best_dsc, best_snap, log_.best_epoch = val, bundle.snapshot(), epoch
    if best_snap is not None:
        bundle.load_snapshot(best_snap)
    return bundle, log_
