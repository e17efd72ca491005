"""Frozen-feature domain probe: how much domain information is left in extractor features."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import ModelBundle, r_theta
from .synth import DomainDataset


@dataclass
class FeatureRecord:
    case_id: int
    domain_id: int
    feature_vector: np.ndarray


def pool_features(fmap: np.ndarray) -> np.ndarray:
    """Spatial average of [N,C,h,w] feature maps -> [N,C]."""
    return fmap.mean(axis=(2, 3))


def export_features(bundle: ModelBundle, datasets: list[DomainDataset], chunk: int = 32) -> list[FeatureRecord]:
    records = []
    with T.no_grad():
        for ds in datasets:
            imgs = ds.images()
            for i in range(0, len(imgs), chunk):
                feats, _ = r_theta(bundle.unet, T.Tensor(imgs[i : i + chunk]))
                for s, vec in zip(ds.subjects[i : i + chunk], pool_features(feats.data)):
                    records.append(FeatureRecord(s.case_id, s.domain_id, vec))
    return records


def write_features_csv(records: list[FeatureRecord], path) -> Path:
    path = Path(path)
    n = len(records[0].feature_vector) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "domain_id"] + [f"f_{i}" for i in range(n)])
        for r in records:
            w.writerow([r.case_id, r.domain_id] + [repr(float(v)) for v in r.feature_vector])
    return path


def read_features_csv(path) -> list[FeatureRecord]:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return [FeatureRecord(int(r[0]), int(r[1]), np.array([float(v) for v in r[2:]])) for r in rows[1:]]


def fit_logistic(X: np.ndarray, y: np.ndarray, k: int, iters: int = 500, lr: float = 0.5, l2: float = 1e-3):
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = X.shape
    W, b = np.zeros((d, k)), np.zeros(k)
    Y = np.eye(k)[y]
    for _ in range(iters):
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - Y) / n
        W -= lr * (X.T @ g + l2 * W)
        b -= lr * g.sum(axis=0)
    return W, b


def domain_probe_accuracy(records: list[FeatureRecord], folds: int = 5, seed: int = 0) -> float:
    """Cross-validated accuracy of a linear domain classifier on frozen features."""
    X = np.stack([r.feature_vector for r in records]).astype(np.float64)
    domains = np.array([r.domain_id for r in records])
    classes, y = np.unique(domains, return_inverse=True)
    k = len(classes)
    if k < 2:
        raise ValueError("the domain probe needs at least 2 domains")
    folds = min(folds, len(y))
    order = np.random.default_rng([seed, 31]).permutation(len(y))
    correct = 0
    for f in range(folds):
        test = order[f::folds]
        train = np.setdiff1d(order, test)
        mu = X[train].mean(axis=0)
        sd = X[train].std(axis=0)
        sd[sd == 0] = 1.0
        W, b = fit_logistic((X[train] - mu) / sd, y[train], k)
        pred = (((X[test] - mu) / sd) @ W + b).argmax(axis=1)
        correct += int((pred == y[test]).sum())
    return correct / len(y)


def write_probe_report(path, variant: str, accuracy: float, k: int, folds: int, seed: int) -> Path:
    path = Path(path)
    report = {"variant": variant, "accuracy": accuracy, "k": k, "folds": folds, "seed": seed}
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path
