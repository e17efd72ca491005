import json

import numpy as np
import pytest

from mixdann.models import init_params
from mixdann.probe import (
    FeatureRecord,
    domain_probe_accuracy,
    export_features,
    pool_features,
    read_features_csv,
    write_features_csv,
    write_probe_report,
)
from mixdann.synth import build_benchmark


def _records(X, y):
    return [FeatureRecord(i, int(d), np.asarray(x, dtype=float)) for i, (x, d) in enumerate(zip(X, y))]


def test_pooling_of_ones():
    assert np.array_equal(pool_features(np.ones((2, 5, 8, 8))), np.ones((2, 5)))


def test_export_counts_and_zero_features():
    doms = build_benchmark(seed=0, n_per_domain=4, H=32)
    b = init_params(0, base_channels=2, image_size=32)
    recs = export_features(b, doms)
    assert len(recs) == 12 and all(len(r.feature_vector) == 8 for r in recs)
    assert [r.domain_id for r in recs] == [0] * 4 + [1] * 4 + [2] * 4
    for p in b.all_params().values():
        p.data = np.zeros_like(p.data)
    assert all(np.all(r.feature_vector == 0) for r in export_features(b, doms))


def test_export_is_pure():
    doms = build_benchmark(seed=1, n_per_domain=3, H=32)
    b = init_params(2, base_channels=2, image_size=32)
    a, c = export_features(b, doms), export_features(b, doms)
    assert all(x.feature_vector.tobytes() == y.feature_vector.tobytes() for x, y in zip(a, c))


def test_one_hot_features_are_separable():
    y = np.repeat([0, 1, 2], 30)
    assert domain_probe_accuracy(_records(np.eye(3)[y], y)) == pytest.approx(1.0)


def test_shuffled_labels_give_chance():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 6))
    y = rng.permutation(np.repeat([0, 1, 2], 100))
    assert abs(domain_probe_accuracy(_records(X, y)) - 1 / 3) < 0.1


def test_raw_pixel_means_reveal_domain():
    doms = build_benchmark(seed=0)
    X = [[s.image.mean()] for d in doms for s in d.subjects]
    y = [d.domain_id for d in doms for s in d.subjects]
    assert domain_probe_accuracy(_records(X, y)) > 0.8


def test_probe_deterministic_and_label_agnostic():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 3)) + np.repeat([[0, 0, 0], [1, 1, 1]], 30, axis=0)
    y = np.repeat([4, 7], 30)
    acc = domain_probe_accuracy(_records(X, y), seed=3)
    assert acc == domain_probe_accuracy(_records(X, y), seed=3)
    assert 0.5 <= acc <= 1.0


def test_single_domain_rejected():
    with pytest.raises(ValueError):
        domain_probe_accuracy(_records(np.zeros((5, 2)), np.zeros(5, dtype=int)))


def test_csv_roundtrip_and_report(tmp_path):
    recs = _records(np.random.default_rng(2).random((4, 3)), [0, 1, 0, 1])
    write_features_csv(recs, tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "case_id,domain_id,f_0,f_1,f_2"
    back = read_features_csv(tmp_path / "f.csv")
    assert all(a.feature_vector.tobytes() == b.feature_vector.tobytes() for a, b in zip(recs, back))
    write_probe_report(tmp_path / "p.json", "DANN", 0.75, 2, 5, 0)
    assert json.loads((tmp_path / "p.json").read_text()) == {"variant": "DANN", "accuracy": 0.75, "k": 2, "folds": 5, "seed": 0}
