import csv
import json

import pytest

from mixdann import cli
from mixdann.cli import hash_tree, main
from mixdann.metrics import METRICS
from mixdann.synth import build_benchmark, write_dataset
from mixdann.trainer import NumericError

TINY = "epochs=1\nbatch_size=4\ndata.n_per_domain=5\ndata.size=32\nmodel.base_channels=2\nexperiment.seeds=0\n"


@pytest.fixture()
def tiny(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    return cfg, tmp_path / "data"


def test_generate_default_layout_and_reproducible(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--out", str(tmp_path / "b")]) == 0
    ha, hb = hash_tree(tmp_path / "a"), hash_tree(tmp_path / "b")
    assert ha == hb
    with open(tmp_path / "a" / "index.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 180 and {r["domain_id"] for r in rows} == {"0", "1", "2"}
    manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert manifest["outputs"] == ha and manifest["command"] == "generate"


def test_train_evaluate_export(tiny, tmp_path):
    cfg, data = tiny
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--target", "D2", "--variant", "DANN", "--out", str(run)]) == 0
    assert (run / "checkpoint" / "params.mxt").exists() and (run / "train_log.csv").exists()
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["config"]["train"]["variant"] == "DANN"
    assert "checkpoint/params.mxt" in manifest["outputs"]

    ev = tmp_path / "ev"
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint"), "--data", str(data), "--target", "2", "--out", str(ev)]) == 0
    header = (ev / "metrics.csv").read_text().splitlines()[0]
    assert header == "case_id,dsc,h95,avd,recall,f1"
    ev2 = tmp_path / "ev2"
    args = ["evaluate", "--checkpoint", str(run / "checkpoint"), "--data", str(data), "--target", "D2", "--out", str(ev2)]
    assert main(args + ["--baseline", str(ev / "metrics.json")]) == 0
    gain = json.loads((ev2 / "metrics.json").read_text())["gain"]
    assert all(gain[m] == 0.0 for m in ("DSC", "AVD"))

    feats = tmp_path / "f" / "features.csv"
    assert main(["export-features", "--checkpoint", str(run / "checkpoint"), "--data", str(data), "--out", str(feats)]) == 0
    assert len(feats.read_text().splitlines()) == 1 + 15


def test_experiment_table_shape(tiny, tmp_path):
    cfg, data = tiny
    out = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    with open(out / "table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 5
    assert list(rows[0]) == ["variant", "metric", "D0", "D1", "D2", "avg", "gain"]
    assert [r["metric"] for r in rows[:5]] == list(METRICS)
    assert all(float(r["gain"]) == 0.0 for r in rows if r["variant"] == "DeepAll")
    probe = json.loads((out / "probe.json").read_text())
    assert [p["variant"] for p in probe] == ["DeepAll", "DANN", "Mixup", "MixDANN"]
    assert len(list((out / "runs").glob("*/seed0/target*/checkpoint"))) == 12


def test_experiment_refuses_two_domains(tmp_path):
    doms = build_benchmark(seed=0, n_per_domain=3, H=32)[:2]
    write_dataset(doms, tmp_path / "two")
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["experiment", "--config", str(cfg), "--data", str(tmp_path / "two"), "--out", str(tmp_path / "x")]) == 2


def test_exit_codes(tiny, tmp_path, monkeypatch):
    cfg, data = tiny
    bad = tmp_path / "bad.cfg"
    bad.write_text("mixup.alpah=0.7\n")
    out = str(tmp_path / "o")
    assert main(["train", "--config", str(bad), "--data", str(data), "--target", "D0", "--out", out]) == 2
    assert main(["train", "--config", str(cfg), "--data", str(data), "--target", "D0", "--variant", "Foo", "--out", out]) == 2
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "missing"), "--target", "D0", "--out", out]) == 3
    assert main(["train", "--config", str(cfg), "--data", str(data), "--target", "D7", "--out", out]) == 3

    def boom(*a, **k):
        raise NumericError(3, 5, "task loss")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--config", str(cfg), "--data", str(data), "--target", "D0", "--out", out]) == 4
