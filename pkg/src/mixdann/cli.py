"""Command line entry point: generate, train, evaluate, experiment, export-features.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .experiment import run_ablation
from .metrics import MetricsReport, evaluate_all
from .models import load_checkpoint, save_checkpoint
from .probe import export_features, write_features_csv
from .synth import DomainDataset, build_benchmark, read_dataset, write_dataset
from .tensor import ShapeError
from .trainer import NumericError, predict, train

log = logging.getLogger("mixdann")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"


class DataError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def hash_tree(root) -> dict[str, str]:
    """sha256 of every file below ``root`` (or of ``root`` itself), keyed by relative path."""
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in files}


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    version: str = __version__
    inputs: dict[str, dict[str, str]] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0

    def write(self, out_dir: Path) -> Path:
        self.outputs = hash_tree(out_dir)
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _overrides(args) -> dict[str, str]:
    out = {}
    if getattr(args, "variant", None):
        out["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    return out


def _load_domains(data_dir) -> list[DomainDataset]:
    try:
        domains = read_dataset(data_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read dataset from {data_dir}: {exc}") from None
    if not domains:
        raise DataError(f"dataset at {data_dir} is empty")
    return domains


def _resolve_target(domains: list[DomainDataset], target: str) -> int:
    names = [d.spec.name for d in domains]
    if target in names:
        return names.index(target)
    if target.isdigit() and int(target) < len(domains):
        return int(target)
    raise DataError(f"unknown target domain {target!r}; available: {', '.join(names)}")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, out_dir) -> Path:
    started = time.time()
    out = _out_dir(out_dir)
    domains = build_benchmark(cfg.data_seed, cfg.k_domains, cfg.n_per_domain, cfg.size)
    write_dataset(domains, out)
    RunManifest("generate", cfg.to_dict(), [cfg.data_seed], started=started, finished=time.time()).write(out)
    return out


def cmd_train(cfg: RunConfig, data_dir, target: str, out_dir) -> Path:
    started = time.time()
    domains = _load_domains(data_dir)
    t = _resolve_target(domains, target)
    sources = [d for i, d in enumerate(domains) if i != t]
    out = _out_dir(out_dir)
    bundle, tlog = train(cfg.train, sources)
    save_checkpoint(bundle, out / "checkpoint")
    tlog.write_csv(out / "train_log.csv")
    m = RunManifest("train", cfg.to_dict(), [cfg.train.seed], started=started)
    m.inputs = {"data": hash_tree(data_dir)}
    m.finished = time.time()
    m.write(out)
    return out


def cmd_evaluate(checkpoint, data_dir, target: str, out_dir, baseline=None) -> MetricsReport:
    started = time.time()
    domains = _load_domains(data_dir)
    t = _resolve_target(domains, target)
    try:
        bundle = load_checkpoint(checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {checkpoint}: {exc}") from None
    tgt = domains[t]
    try:
        pred = predict(bundle, tgt.images())
    except ShapeError as exc:
        raise DataError(str(exc)) from None
    base = MetricsReport.read_json(baseline) if baseline else None
    report = evaluate_all([s.mask for s in tgt.subjects], pred, [s.case_id for s in tgt.subjects], base)
    out = _out_dir(out_dir)
    report.write(out)
    m = RunManifest("evaluate", {"target": tgt.spec.name}, [], started=started)
    m.inputs = {"checkpoint": hash_tree(checkpoint), "data": hash_tree(data_dir)}
    if baseline:
        m.inputs["baseline"] = hash_tree(baseline)
    m.finished = time.time()
    m.write(out)
    return report


def cmd_experiment(cfg: RunConfig, data_dir, out_dir, workers: int | None = None) -> Path:
    started = time.time()
    if data_dir is not None:
        domains = _load_domains(data_dir)
    else:
        domains = build_benchmark(cfg.data_seed, cfg.k_domains, cfg.n_per_domain, cfg.size)
    if len(domains) < 3:
        raise ConfigError(f"leave-one-out needs at least 3 domains so that 2 remain as sources, got {len(domains)}")
    out = _out_dir(out_dir)
    table, _ = run_ablation(cfg.train, domains, cfg.variants, cfg.seeds, workers or cfg.workers, cfg.probe_folds, out)
    print(table.render(), end="")
    m = RunManifest("experiment", cfg.to_dict(), list(cfg.seeds), started=started)
    if data_dir is not None:
        m.inputs = {"data": hash_tree(data_dir)}
    m.finished = time.time()
    m.write(out)
    return out


def cmd_export_features(checkpoint, data_dir, out_path) -> Path:
    domains = _load_domains(data_dir)
    try:
        bundle = load_checkpoint(checkpoint)
        records = export_features(bundle, domains)
    except (OSError, ValueError, KeyError, ShapeError) as exc:
        raise DataError(f"cannot export features: {exc}") from None
    out_path = Path(out_path)
    _out_dir(out_path.parent)
    return write_features_csv(records, out_path)


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixdann", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="key=value config file")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("generate", help="write the synthetic multi-domain benchmark")
    common(g, data=False)
    g.add_argument("--seed", type=int, help="overrides data.seed")

    t = sub.add_parser("train", help="train one variant on every domain except the target")
    common(t)
    t.add_argument("--target", required=True, help="held-out domain name or index")
    t.add_argument("--variant")
    t.add_argument("--seed", type=int)

    e = sub.add_parser("evaluate", help="score a checkpoint on the target domain")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", help="metrics.json of the baseline, fills the gain fields")

    x = sub.add_parser("experiment", help="leave-one-out ablation over variants and seeds")
    x.add_argument("--config")
    x.add_argument("--data", help="dataset directory; generated from the config when omitted")
    x.add_argument("--out", required=True)
    x.add_argument("--workers", type=int)
    x.add_argument("--seed", type=int, help="run a single seed instead of experiment.seeds")

    f = sub.add_parser("export-features", help="pooled extractor features as CSV")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True, help="output CSV path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            ov = {"data.seed": str(args.seed)} if args.seed is not None else {}
            cmd_generate(load_config(args.config, ov), args.out)
        elif args.command == "train":
            cmd_train(load_config(args.config, _overrides(args)), args.data, args.target, args.out)
        elif args.command == "evaluate":
            report = cmd_evaluate(args.checkpoint, args.data, args.target, args.out, args.baseline)
            print(json.dumps(report.to_json(), indent=2, sort_keys=True))
        elif args.command == "experiment":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = replace(cfg, seeds=(args.seed,))
            cmd_experiment(cfg, args.data, args.out, args.workers)
        elif args.command == "export-features":
            cmd_export_features(args.checkpoint, args.data, args.out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        # precondition failures raised by the library (too few sources, bad variant)
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
