"""Segmentation metrics: DSC, H95, AVD, lesion recall and lesion F1."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

METRICS = ("DSC", "H95", "AVD", "Recall", "F1")
LOWER_IS_BETTER = {"H95", "AVD"}


class UndefinedMetric(ValueError):
    """Raised when a metric has no value for the given masks (e.g. empty ground truth)."""


@dataclass
class LesionMatch:
    tp: int
    fp: int
    fn: int
    tp_pred: int = 0


def _binary(m) -> np.ndarray:
    return np.asarray(m) > 0


def _check(y, yhat):
    y, yhat = _binary(y), _binary(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"mask shapes differ: {y.shape} vs {yhat.shape}")
    return y, yhat


def dsc(y, yhat) -> float:
    y, yhat = _check(y, yhat)
    total = int(y.sum()) + int(yhat.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(y, yhat).sum()) / total


def avd(y, yhat) -> float:
    """Absolute volume difference as a percentage of the true volume."""
    y, yhat = _check(y, yhat)
    vol = int(y.sum())
    if vol == 0:
        raise UndefinedMetric("AVD undefined for an empty ground truth")
    return 100.0 * abs(int(yhat.sum()) - vol) / vol


def boundary(m) -> np.ndarray:
    """Foreground voxels with at least one face-adjacent background voxel (image border counts as background)."""
    m = _binary(m)
    struct = ndimage.generate_binary_structure(m.ndim, 1)
    return m & ~ndimage.binary_erosion(m, structure=struct, border_value=0)


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    """The ceil(q/100 * n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise UndefinedMetric("percentile of an empty set")
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def _distances_to(points_mask: np.ndarray, target_mask: np.ndarray) -> np.ndarray:
    # Euclidean distance from every point of points_mask to the nearest voxel of target_mask,
    # recomputed from integer offsets so values match an all-pairs computation bit for bit.
    _, idx = ndimage.distance_transform_edt(~target_mask, return_indices=True)
    pts = np.nonzero(points_mask)
    sq = np.zeros(len(pts[0]))
    for axis, coords in enumerate(pts):
        diff = (coords - idx[axis][pts]).astype(np.float64)
        sq += diff * diff
    return np.sqrt(sq)


def h95(y, yhat, surface: bool = True) -> float:
    """Symmetric 95th-percentile Hausdorff distance in voxel units.

    With ``surface=True`` both point sets are boundary voxels (challenge
    convention); otherwise full foreground sets are used.
    """
    y, yhat = _check(y, yhat)
    if not y.any() or not yhat.any():
        raise UndefinedMetric("H95 undefined when either mask is empty")
    a, b = (boundary(y), boundary(yhat)) if surface else (y, yhat)
    return max(nearest_rank(_distances_to(a, b)), nearest_rank(_distances_to(b, a)))


def connected_components(m) -> tuple[np.ndarray, int]:
    """Full-connectivity labeling (8 in 2D, 26 in 3D); labels follow scan order."""
    m = _binary(m)
    struct = ndimage.generate_binary_structure(m.ndim, m.ndim)
    labels, n = ndimage.label(m, structure=struct)
    return labels, int(n)


def lesion_match(y, yhat) -> LesionMatch:
    y, yhat = _check(y, yhat)
    gt_lab, n_gt = connected_components(y)
    pr_lab, n_pr = connected_components(yhat)
    detected = np.unique(gt_lab[yhat & (gt_lab > 0)])
    hit_pred = np.unique(pr_lab[y & (pr_lab > 0)])
    tp = int(detected.size)
    return LesionMatch(tp=tp, fp=n_pr - int(hit_pred.size), fn=n_gt - tp, tp_pred=int(hit_pred.size))


def lesion_recall_f1(y, yhat) -> tuple[float, float, LesionMatch]:
    m = lesion_match(y, yhat)
    if m.tp + m.fn + m.fp == 0:
        return 1.0, 1.0, m
    recall = m.tp / (m.tp + m.fn) if m.tp + m.fn else 1.0
    f1 = m.tp / (m.tp + 0.5 * (m.fp + m.fn))
    return recall, f1, m


def case_metrics(y, yhat) -> dict[str, float]:
    """All five metrics for one case; undefined values are NaN."""
    out = {"DSC": dsc(y, yhat)}
    try:
        out["H95"] = h95(y, yhat)
    except UndefinedMetric:
        out["H95"] = float("nan")
    try:
        out["AVD"] = avd(y, yhat)
    except UndefinedMetric:
        out["AVD"] = float("nan")
    out["Recall"], out["F1"], _ = lesion_recall_f1(y, yhat)
    return out


@dataclass
class MetricsReport:
    case_ids: list[int]
    cases: list[dict[str, float]]
    avg: dict[str, float] = field(default_factory=dict)
    n_undefined: dict[str, int] = field(default_factory=dict)
    gain: dict[str, float] | None = None

    def with_baseline(self, baseline: "MetricsReport") -> "MetricsReport":
        self.gain = {k: self.avg[k] - baseline.avg[k] for k in METRICS}
        return self

    def to_json(self) -> dict:
        return {
            "n_cases": len(self.cases),
            "avg": self.avg,
            "gain": self.gain,
            "n_undefined": self.n_undefined,
        }

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case_id", "dsc", "h95", "avd", "recall", "f1"])
            for cid, row in zip(self.case_ids, self.cases):
                w.writerow([cid] + [repr(float(row[k])) for k in METRICS])
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    @classmethod
    def read_json(cls, path) -> "MetricsReport":
        data = json.loads(Path(path).read_text())
        return cls([], [], data["avg"], data["n_undefined"], data.get("gain"))


def evaluate_all(y_set, yhat_set, case_ids=None, baseline: MetricsReport | None = None) -> MetricsReport:
    """Per-case metrics plus macro averages; undefined values are counted and excluded."""
    y_set, yhat_set = list(y_set), list(yhat_set)
    if len(y_set) != len(yhat_set):
        raise ValueError(f"{len(y_set)} ground-truth masks vs {len(yhat_set)} predictions")
    if case_ids is None:
        case_ids = list(range(len(y_set)))
    elif len(case_ids) != len(y_set):
        raise ValueError("case_ids do not align with masks")
    cases = [case_metrics(y, yh) for y, yh in zip(y_set, yhat_set)]
    avg, n_undef = {}, {}
    for k in METRICS:
        vals = np.array([c[k] for c in cases], dtype=np.float64)
        ok = ~np.isnan(vals)
        n_undef[k] = int((~ok).sum())
        avg[k] = float(vals[ok].mean()) if ok.any() else float("nan")
    report = MetricsReport(list(case_ids), cases, avg, n_undef)
    if baseline is not None:
        report.with_baseline(baseline)
    return report
