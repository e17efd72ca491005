"""Micro U-Net split into feature extractor / task head, plus the domain discriminator.

The feature extractor (role ``theta``) is the downward path up to and
including the second 2x2 pooling. Everything after it (bottleneck, upward
path, output head) is the task head (role ``sigma``). The discriminator
(role ``mu``) reads the extractor output through a gradient reversal layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import Conv2DParams, GrlConfig, conv2d, dense, grl, maxpool2, relu, sigmoid, upsample2_nearest
from .tensor import ShapeError, Tensor

ROLES = ("theta", "sigma", "mu")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _conv_param(rng, c_out, c_in, k=3):
    a = glorot_bound(c_in * k * k, c_out * k * k)
    return rng.uniform(-a, a, size=(c_out, c_in, k, k)), np.zeros(c_out)


def _dense_param(rng, n_in, n_out):
    a = glorot_bound(n_in, n_out)
    return rng.uniform(-a, a, size=(n_in, n_out)), np.zeros(n_out)


def unet_layout(in_channels: int, base: int) -> list[tuple[str, str, int, int, int]]:
    """(name, role, c_in, c_out, kernel) for every U-Net conv, in init order."""
    b = base
    return [
        ("enc1a", "theta", in_channels, b, 3),
        ("enc1b", "theta", b, b, 3),
        ("enc2a", "theta", b, 2 * b, 3),
        ("enc2b", "theta", 2 * b, 4 * b, 3),
        ("bott_a", "sigma", 4 * b, 4 * b, 3),
        ("bott_b", "sigma", 4 * b, b, 3),
        ("dec2", "sigma", 5 * b, b, 3),
        ("dec1a", "sigma", 2 * b, b, 3),
        ("dec1b", "sigma", b, b, 3),
        ("head", "sigma", b, 1, 1),
    ]


DISC_CONV = 32
DISC_HIDDEN = 64


@dataclass
class MicroUNet:
    params: dict[str, Tensor]
    in_channels: int = 1
    base_channels: int = 8

    def conv(self, name: str, x: Tensor) -> Tensor:
        w = self.params[f"{name}.w"]
        return conv2d(x, Conv2DParams(w, self.params[f"{name}.b"], stride=1, padding=w.shape[-1] // 2))


@dataclass
class DomainDiscriminator:
    params: dict[str, Tensor]
    n_domains: int
    feature_shape: tuple[int, int, int]

    def conv(self, name: str, x: Tensor) -> Tensor:
        return conv2d(x, Conv2DParams(self.params[f"{name}.w"], self.params[f"{name}.b"], stride=2, padding=1))

    def fc(self, name: str, x: Tensor) -> Tensor:
        return dense(x, self.params[f"{name}.w"], self.params[f"{name}.b"])


@dataclass
class ModelBundle:
    unet: MicroUNet
    disc: DomainDiscriminator | None = None
    image_size: int = 64
    roles: dict[str, str] = field(default_factory=dict)

    def named_params(self, *roles: str) -> dict[str, Tensor]:
        roles = roles or ROLES
        out = {}
        for name, p in self.all_params().items():
            if self.roles[name] in roles:
                out[name] = p
        return out

    def all_params(self) -> dict[str, Tensor]:
        out = dict(self.unet.params)
        if self.disc is not None:
            out.update(self.disc.params)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.all_params().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, p in self.all_params().items():
            p.data = snap[k].copy()


def _disc_spatial(image_size: int) -> int:
    s = image_size // 4
    for _ in range(3):
        s = (s + 2 - 3) // 2 + 1
    return s


def init_params(seed: int, in_channels: int = 1, base_channels: int = 8, n_domains: int = 0, image_size: int = 64) -> ModelBundle:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``.

    The U-Net and the discriminator draw from separate streams, so the U-Net
    weights do not depend on whether a discriminator is allocated.
    """
    if image_size % 4:
        raise ShapeError(f"image_size must be divisible by 4, got {image_size}")
    rng = np.random.default_rng([seed, 0])
    params, roles = {}, {}
    for name, role, cin, cout, k in unet_layout(in_channels, base_channels):
        w, b = _conv_param(rng, cout, cin, k)
        params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(b, requires_grad=True, name=f"{name}.b")
        roles[f"{name}.w"] = roles[f"{name}.b"] = role
    bundle = ModelBundle(MicroUNet(params, in_channels, base_channels), None, image_size, roles)
    if n_domains:
        bundle.disc = _init_disc(np.random.default_rng([seed, 1]), base_channels, n_domains, image_size)
        roles.update({k: "mu" for k in bundle.disc.params})
    return bundle


def _init_disc(rng, base: int, k: int, image_size: int) -> DomainDiscriminator:
    if k < 2:
        raise ValueError(f"a domain discriminator needs at least 2 domains, got {k}")
    params = {}
    cin = 4 * base
    for name in ("dconv1", "dconv2", "dconv3"):
        w, b = _conv_param(rng, DISC_CONV, cin)
        params[f"{name}.w"], params[f"{name}.b"] = w, b
        cin = DISC_CONV
    s = _disc_spatial(image_size)
    n_in = DISC_CONV * s * s
    for name, n_out in (("fc1", DISC_HIDDEN), ("fc2", DISC_HIDDEN), ("fc3", k)):
        w, b = _dense_param(rng, n_in, n_out)
        params[f"{name}.w"], params[f"{name}.b"] = w, b
        n_in = n_out
    params = {n: Tensor(v, requires_grad=True, name=n) for n, v in params.items()}
    f = image_size // 4
    return DomainDiscriminator(params, k, (4 * base, f, f))


# ---------------------------------------------------------------- forward passes


def r_theta(m: MicroUNet, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Feature extractor: returns (features after second pooling, skip tensors)."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] input, got {x.shape}")
    if x.shape[1] != m.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, model expects {m.in_channels}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeError(f"spatial dims must be divisible by 4, got {x.shape[2:]}")
    s1 = relu(m.conv("enc1b", relu(m.conv("enc1a", x))))
    h = maxpool2(s1)
    s2 = relu(m.conv("enc2b", relu(m.conv("enc2a", h))))
    return maxpool2(s2), [s1, s2]


def c_sigma(m: MicroUNet, features: Tensor, skips: list[Tensor]) -> Tensor:
    s1, s2 = skips
    h = relu(m.conv("bott_b", relu(m.conv("bott_a", features))))
    h = relu(m.conv("dec2", T.concat_channels(upsample2_nearest(h), s2)))
    h = relu(m.conv("dec1a", T.concat_channels(upsample2_nearest(h), s1)))
    h = relu(m.conv("dec1b", h))
    return sigmoid(m.conv("head", h))


def unet_forward(m: MicroUNet, x) -> tuple[Tensor, Tensor]:
    """Returns (features, mask probabilities [N,1,H,W])."""
    x = T.as_tensor(x)
    features, skips = r_theta(m, x)
    return features, c_sigma(m, features, skips)


def discriminate(d: DomainDiscriminator, features: Tensor, grl_cfg: GrlConfig) -> Tensor:
    """Domain logits [N,k] for extractor features, read through the GRL."""
    if features.shape[1:] != d.feature_shape:
        raise ShapeError(f"discriminator expects features {d.feature_shape}, got {features.shape[1:]}")
    return discriminator_logits(d, grl(features, grl_cfg))


def discriminator_logits(d: DomainDiscriminator, h: Tensor) -> Tensor:
    """Conv-Conv-Conv-FC-FC-FC stack without the reversal layer."""
    for name in ("dconv1", "dconv2", "dconv3"):
        h = relu(d.conv(name, h))
    h = T.reshape(h, (h.shape[0], -1))
    h = relu(d.fc("fc1", h))
    h = relu(d.fc("fc2", h))
    return d.fc("fc3", h)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(bundle: ModelBundle, out_dir) -> Path:
    """Write ``params.mxt`` (concatenated MXT1 records) and ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blobs, entries = [], []
    for name, p in bundle.all_params().items():
        blobs.append(T.encode(p.data))
        entries.append({"name": name, "role": bundle.roles[name], "shape": list(p.shape)})
    (out_dir / "params.mxt").write_bytes(b"".join(blobs))
    manifest = {
        "in_channels": bundle.unet.in_channels,
        "base_channels": bundle.unet.base_channels,
        "n_domains": bundle.disc.n_domains if bundle.disc else 0,
        "image_size": bundle.image_size,
        "tensors": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir


def load_checkpoint(ckpt_dir) -> ModelBundle:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    bundle = init_params(0, manifest["in_channels"], manifest["base_channels"], manifest["n_domains"], manifest["image_size"])
    buf = (ckpt_dir / "params.mxt").read_bytes()
    params = bundle.all_params()
    offset = 0
    for entry in manifest["tensors"]:
        arr, offset = T.decode(buf, offset)
        if list(arr.shape) != entry["shape"] or entry["name"] not in params:
            raise ValueError(f"checkpoint entry {entry['name']} does not match the model layout")
        params[entry["name"]].data = arr
    return bundle
