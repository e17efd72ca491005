"""Leave-one-domain-out runs and the variant x metric ablation table."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .metrics import METRICS, MetricsReport, evaluate_all
from .models import save_checkpoint
from .probe import domain_probe_accuracy, export_features, write_features_csv
from .synth import DomainDataset
from .trainer import VARIANTS, TrainConfig, TrainLog, predict, train

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    variant: str
    seed: int
    target: int
    report: MetricsReport
    probe_accuracy: float
    log: TrainLog
    seconds: float = 0.0


def run_dir(out_dir, variant: str, seed: int, target: int) -> Path:
    return Path(out_dir) / "runs" / variant / f"seed{seed}" / f"target{target}"


def run_one(cfg: TrainConfig, domains: list[DomainDataset], target: int, probe_folds: int = 5, out_dir=None) -> RunResult:
    """Train on every domain except ``target``, score the target, probe the source features."""
    if not 0 <= target < len(domains):
        raise ValueError(f"target {target} out of range for {len(domains)} domains")
    t0 = time.perf_counter()
    sources = [d for i, d in enumerate(domains) if i != target]
    bundle, tlog = train(cfg, sources)
    tgt = domains[target]
    pred = predict(bundle, tgt.images())
    report = evaluate_all([s.mask for s in tgt.subjects], pred, [s.case_id for s in tgt.subjects])
    records = export_features(bundle, sources)
    acc = domain_probe_accuracy(records, folds=probe_folds, seed=cfg.seed)
    if out_dir is not None:
        d = run_dir(out_dir, cfg.variant, cfg.seed, target)
        save_checkpoint(bundle, d / "checkpoint")
        tlog.write_csv(d / "train_log.csv")
        report.write(d)
        write_features_csv(records, d / "features.csv")
    log.info("%s seed %d target %d: DSC %.4f probe %.3f", cfg.variant, cfg.seed, target, report.avg["DSC"], acc)
    return RunResult(cfg.variant, cfg.seed, target, report, acc, tlog, time.perf_counter() - t0)


def _job(args):
    return run_one(*args)


def _run_jobs(jobs: list[tuple], workers: int) -> list[RunResult]:
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    # each job owns its RNG streams, so completion order cannot change results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def leave_one_out(cfg: TrainConfig, domains: list[DomainDataset], baseline: dict[int, MetricsReport] | None = None,
                  workers: int = 1, probe_folds: int = 5, out_dir=None) -> dict[int, RunResult]:
    """One run per held-out target. ``baseline`` maps target -> DeepAll report and fills the gain fields."""
    if cfg.variant in ("DANN", "MixDANN") and len(domains) < 3:
        raise ValueError(f"{cfg.variant} leave-one-out needs at least 3 domains (2 sources), got {len(domains)}")
    jobs = [(cfg, domains, t, probe_folds, out_dir) for t in range(len(domains))]
    results = {r.target: r for r in _run_jobs(jobs, workers)}
    if baseline is not None:
        for t, r in results.items():
            r.report.with_baseline(baseline[t])
    return results


@dataclass
class AblationTable:
    """``cells[variant][metric]`` maps each target name plus "avg" and "gain" to a value."""

    targets: list[str]
    cells: dict[str, dict[str, dict[str, float]]]
    probe: dict[str, float]

    def columns(self) -> list[str]:
        return self.targets + ["avg", "gain"]

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cols = self.columns()
        csv_path = out_dir / "table.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "metric"] + cols)
            for v, rows in self.cells.items():
                for m in METRICS:
                    w.writerow([v, m] + [repr(rows[m][c]) for c in cols])
        txt_path = out_dir / "table.txt"
        txt_path.write_text(self.render())
        return csv_path, txt_path

    def render(self) -> str:
        cols = self.columns()
        head = f"{'variant':<9} {'metric':<7}" + "".join(f"{c:>10}" for c in cols)
        lines = [head, "-" * len(head)]
        for v, rows in self.cells.items():
            for m in METRICS:
                lines.append(f"{v:<9} {m:<7}" + "".join(f"{rows[m][c]:>10.4f}" for c in cols))
        lines.append("")
        lines.append("domain probe accuracy (source features, mean over runs)")
        for v, acc in self.probe.items():
            lines.append(f"{v:<9} {acc:.4f}")
        return "\n".join(lines) + "\n"


def build_table(results: list[RunResult], target_names: list[str]) -> AblationTable:
    variants = [v for v in VARIANTS if any(r.variant == v for r in results)]
    cells, probe = {}, {}
    for v in variants:
        mine = [r for r in results if r.variant == v]
        probe[v] = float(np.mean([r.probe_accuracy for r in mine]))
        rows = {}
        for m in METRICS:
            row = {}
            for t, name in enumerate(target_names):
                vals = [r.report.avg[m] for r in mine if r.target == t]
                row[name] = float(np.nanmean(vals)) if vals and not np.all(np.isnan(vals)) else float("nan")
            row["avg"] = float(np.mean([row[n] for n in target_names]))
            rows[m] = row
        cells[v] = rows
    for v in variants:
        for m in METRICS:
            base = cells["DeepAll"][m]["avg"] if "DeepAll" in cells else float("nan")
            cells[v][m]["gain"] = cells[v][m]["avg"] - base
    return AblationTable(list(target_names), cells, probe)


def run_ablation(cfg: TrainConfig, domains: list[DomainDataset], variants=VARIANTS, seeds=(0, 1, 2),
                 workers: int = 1, probe_folds: int = 5, out_dir=None) -> tuple[AblationTable, list[RunResult]]:
    """Every (variant, seed, target) combination, reduced to one table."""
    for v in variants:
        if v in ("DANN", "MixDANN") and len(domains) < 3:
            raise ValueError(f"{v} needs at least 3 domains for leave-one-out, got {len(domains)}")
    jobs = [
        (replace(cfg, variant=v, seed=s), domains, t, probe_folds, out_dir)
        for v in variants
        for s in seeds
        for t in range(len(domains))
    ]
    results = _run_jobs(jobs, workers)
    names = [d.spec.name for d in domains]
    table = build_table(results, names)
    if out_dir is not None:
        table.write(out_dir)
        write_probe_results(results, Path(out_dir), probe_folds, len(domains) - 1)
        write_timing(results, Path(out_dir))
    return table, results


def write_timing(results: list[RunResult], out_dir: Path) -> None:
    """Wall time per run; kept apart from the tables so those stay byte-reproducible."""
    with open(out_dir / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "target", "seconds"])
        for r in results:
            w.writerow([r.variant, r.seed, r.target, f"{r.seconds:.3f}"])


def write_probe_results(results: list[RunResult], out_dir: Path, folds: int, k: int) -> None:
    with open(out_dir / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "target", "accuracy"])
        for r in results:
            w.writerow([r.variant, r.seed, r.target, repr(r.probe_accuracy)])
    summary = []
    for v in VARIANTS:
        mine = [r for r in results if r.variant == v]
        if mine:
            summary.append({
                "variant": v,
                "accuracy": float(np.mean([r.probe_accuracy for r in mine])),
                "k": k,
                "folds": folds,
                "seed": sorted({r.seed for r in mine}),
            })
    (out_dir / "probe.json").write_text(json.dumps(summary, indent=2) + "\n")
