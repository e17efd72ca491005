"""Synthetic multi-scanner lesion data.

Each subject has a domain-independent anatomy (smooth tissue background plus
a few bright elliptical lesions). A ``DomainSpec`` then applies an
intensity-only acquisition transform, so masks never depend on the domain.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import load_tensor, save_tensor

TISSUE_LOW, TISSUE_HIGH = 0.15, 0.6
LESION_CONTRAST = 0.3
MAX_LESIONS = 5


@dataclass(frozen=True)
class DomainSpec:
    name: str
    gain: float = 1.0
    bias: float = 0.0
    gamma_contrast: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: int = 0

    def __post_init__(self):
        if self.gain <= 0 or self.gamma_contrast <= 0:
            raise ValueError(f"{self.name}: gain and gamma_contrast must be positive")
        if self.blur_radius < 0 or self.noise_sigma < 0:
            raise ValueError(f"{self.name}: blur_radius and noise_sigma must be non-negative")


@dataclass
class Subject:
    image: np.ndarray  # [C,H,W]
    mask: np.ndarray  # [H,W] in {0,1}
    domain_id: int
    case_id: int


@dataclass
class DomainDataset:
    spec: DomainSpec
    domain_id: int
    subjects: list[Subject]

    def __len__(self):
        return len(self.subjects)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.subjects])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask[None] for s in self.subjects])


DEFAULT_SPECS = (
    DomainSpec("D0"),
    DomainSpec("D1", gain=1.3, bias=0.1, blur_radius=1),
    DomainSpec("D2", gamma_contrast=1.8, noise_sigma=0.06),
)


def generate_anatomy(rng: np.random.Generator, H: int = 64, W: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Clean image in [0,1] and binary lesion mask for one subject."""
    if H < 32 or W < 32:
        raise ValueError(f"anatomy needs H, W >= 32, got {(H, W)}")
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    tissue = np.zeros((H, W))
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sigma = rng.uniform(min(H, W) / 6, min(H, W) / 3)
        amp = rng.uniform(0.5, 1.0)
        tissue += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    tissue = (tissue - tissue.min()) / (tissue.max() - tissue.min())
    tissue = TISSUE_LOW + (TISSUE_HIGH - TISSUE_LOW) * tissue

    mask = np.zeros((H, W), dtype=bool)
    margin = 8
    for _ in range(rng.integers(1, MAX_LESIONS + 1)):
        cy, cx = rng.uniform(margin, H - margin), rng.uniform(margin, W - margin)
        a, b = rng.uniform(2, 6, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    image = tissue + LESION_CONTRAST * mask
    return image, mask.astype(np.float64)


def apply_domain(clean: np.ndarray, spec: DomainSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """``clip01(gain * blur(clean)**gamma_contrast + bias + noise)``."""
    img = np.asarray(clean, dtype=np.float64)
    if spec.blur_radius:
        img = ndimage.uniform_filter(img, size=2 * spec.blur_radius + 1, mode="nearest")
    img = spec.gain * np.power(img, spec.gamma_contrast) + spec.bias
    if spec.noise_sigma:
        if rng is None:
            raise ValueError("a noisy domain needs an rng")
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def extra_spec(rng: np.random.Generator, i: int) -> DomainSpec:
    return DomainSpec(
        f"D{i}",
        gain=float(rng.uniform(0.7, 1.4)),
        bias=float(rng.uniform(-0.1, 0.15)),
        gamma_contrast=float(rng.uniform(0.6, 1.8)),
        noise_sigma=float(rng.uniform(0.0, 0.06)),
        blur_radius=int(rng.integers(0, 2)),
    )


def domain_specs(k: int, seed: int = 0) -> list[DomainSpec]:
    specs = list(DEFAULT_SPECS[:k])
    rng = np.random.default_rng([seed, 7919])
    for i in range(len(specs), k):
        specs.append(extra_spec(rng, i))
    return specs


def render_subject(seed: int, domain_id: int, case_id: int, spec: DomainSpec, H: int = 64, W: int = 64) -> Subject:
    anatomy_rng = np.random.default_rng([seed, case_id, 0])
    noise_rng = np.random.default_rng([seed, case_id, 1])
    clean, mask = generate_anatomy(anatomy_rng, H, W)
    image = apply_domain(clean, spec, noise_rng)
    return Subject(image[None], mask, domain_id, case_id)


def build_benchmark(seed: int = 0, k_domains: int = 3, n_per_domain: int = 60, H: int = 64, W: int | None = None) -> list[DomainDataset]:
    """``k_domains`` datasets of ``n_per_domain`` subjects; case ids are globally unique."""
    if k_domains < 3:
        raise ValueError(f"the benchmark needs at least 3 domains, got {k_domains}")
    W = W or H
    out = []
    for d, spec in enumerate(domain_specs(k_domains, seed)):
        subjects = [render_subject(seed, d, d * n_per_domain + i, spec, H, W) for i in range(n_per_domain)]
        out.append(DomainDataset(spec, d, subjects))
    return out


# ---------------------------------------------------------------- disk format


def write_dataset(domains: list[DomainDataset], out_dir) -> Path:
    """One directory per domain with MXT1 image/mask files and a global ``index.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ds in domains:
        ddir = out_dir / ds.spec.name
        ddir.mkdir(exist_ok=True)
        for s in ds.subjects:
            img = f"{ds.spec.name}/case{s.case_id:05d}_image.mxt"
            msk = f"{ds.spec.name}/case{s.case_id:05d}_mask.mxt"
            save_tensor(out_dir / img, s.image)
            save_tensor(out_dir / msk, s.mask)
            rows.append((s.case_id, s.domain_id, img, msk))
    with open(out_dir / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "domain_id", "image_path", "mask_path"])
        w.writerows(rows)
    specs = [asdict(ds.spec) for ds in domains]
    with open(out_dir / "domains.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(specs[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(specs)
    return out_dir


def read_dataset(data_dir) -> list[DomainDataset]:
    data_dir = Path(data_dir)
    index = data_dir / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"no index.csv in {data_dir}")
    specs = {}
    spec_file = data_dir / "domains.csv"
    if spec_file.exists():
        with open(spec_file) as fh:
            for i, row in enumerate(csv.DictReader(fh)):
                specs[i] = DomainSpec(
                    row["name"], float(row["gain"]), float(row["bias"]), float(row["gamma_contrast"]),
                    float(row["noise_sigma"]), int(row["blur_radius"]),
                )
    by_domain: dict[int, list[Subject]] = {}
    with open(index) as fh:
        for row in csv.DictReader(fh):
            d = int(row["domain_id"])
            img = load_tensor(data_dir / row["image_path"])
            mask = load_tensor(data_dir / row["mask_path"])
            by_domain.setdefault(d, []).append(Subject(img, mask, d, int(row["case_id"])))
    return [DomainDataset(specs.get(d, DomainSpec(f"D{d}")), d, subs) for d, subs in sorted(by_domain.items())]


def write_pgm(image: np.ndarray, path) -> None:
    """8-bit binary PGM of a [H,W] (or [1,H,W]) array in [0,1]."""
    arr = np.asarray(image).reshape(image.shape[-2:])
    data = np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode() + data.tobytes())
