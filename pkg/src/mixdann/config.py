"""Flat ``key=value`` run configuration with dotted namespaces.

Blank lines and ``#`` comments are ignored. Unknown keys are errors, so a typo
never silently falls back to a default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .dann_mixup import GammaSchedule, MixupConfig
from .trainer import VARIANTS, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _variant_list(text: str) -> tuple[str, ...]:
    out = tuple(t.strip() for t in text.split(",") if t.strip())
    for v in out:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    return out


# key -> (section, attribute, parser)
KEYS = {
    "seed": ("train", "seed", int),
    "variant": ("train", "variant", str),
    "lr": ("train", "lr", float),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "val_fraction": ("train", "val_fraction", float),
    "adam.beta1": ("train", "adam_beta1", float),
    "adam.beta2": ("train", "adam_beta2", float),
    "adam.eps": ("train", "adam_eps", float),
    "augment.rotation": ("train", "augment_rotation", _bool),
    "augment.scale": ("train", "augment_scale", _bool),
    "augment.shear": ("train", "augment_shear", _bool),
    "model.base_channels": ("train", "base_channels", int),
    "model.in_channels": ("train", "in_channels", int),
    "mixup.alpha": ("mixup", "alpha", float),
    "mixup.apply_prob": ("mixup", "apply_prob", float),
    "mixup.mix_domain_labels": ("mixup", "mix_domain_labels", _bool),
    "dann.xi": ("gamma", "xi", float),
    "dann.kappa": ("gamma", "kappa", float),
    "dann.literal_gamma": ("gamma", "literal", _bool),
    "data.seed": ("run", "data_seed", int),
    "data.k_domains": ("run", "k_domains", int),
    "data.n_per_domain": ("run", "n_per_domain", int),
    "data.size": ("run", "size", int),
    "experiment.seeds": ("run", "seeds", _int_list),
    "experiment.variants": ("run", "variants", _variant_list),
    "experiment.workers": ("run", "workers", int),
    "probe.folds": ("run", "probe_folds", int),
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_seed: int = 0
    k_domains: int = 3
    n_per_domain: int = 60
    size: int = 64
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = VARIANTS
    workers: int = 1
    probe_folds: int = 5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"], d["variants"] = list(self.seeds), list(self.variants)
        return d


def parse_lines(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def build_config(values: dict[str, str]) -> RunConfig:
    sections = {"train": {}, "mixup": {}, "gamma": {}, "run": {}}
    for key, text in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        section, attr, parse = KEYS[key]
        try:
            sections[section][attr] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    try:
        mixup = MixupConfig(**sections["mixup"])
        gamma = GammaSchedule(**sections["gamma"])
        train = TrainConfig(mixup=mixup, gamma=gamma, **sections["train"])
        cfg = RunConfig(train=train, **sections["run"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.k_domains < 3:
        raise ConfigError("data.k_domains must be at least 3 for leave-one-out")
    if cfg.n_per_domain < 1 or cfg.size < 32 or cfg.size % 4:
        raise ConfigError("data.n_per_domain must be >= 1 and data.size a multiple of 4, at least 32")
    if not cfg.seeds or not cfg.variants or cfg.workers < 1 or cfg.probe_folds < 2:
        raise ConfigError("experiment.seeds/variants must be non-empty, workers >= 1, probe.folds >= 2")
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (or use defaults) and apply ``overrides`` on top."""
    values = {}
    if path is not None:
        try:
            values = parse_lines(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update(overrides or {})
    return build_config(values)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
