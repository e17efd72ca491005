import dataclasses

import numpy as np
import pytest

from mixdann import tensor as T
from mixdann.dann_mixup import GammaSchedule, MixupConfig
from mixdann.synth import build_benchmark
from mixdann.trainer import (
    Adam,
    NumericError,
    StratifiedBatches,
    TrainConfig,
    augment,
    predict,
    split_train_val,
    train,
)


@pytest.fixture(scope="module")
def small():
    return build_benchmark(seed=0, n_per_domain=10, H=32)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=4, base_channels=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_first_step_by_hand():
    p = T.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    g = np.array([0.3, -4.0, 0.0])
    p.grad = g.copy()
    opt.step()
    # fresh state: m_hat = g, v_hat = g^2
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_adam_second_step_by_hand():
    p = T.Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    for g in (1.0, -3.0):
        p.grad = np.array([g])
        opt.step()
    m = 0.9 * 0.1 * 1.0 + 0.1 * -3.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
    step2 = 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = 0.1 * 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(-step1 - step2, abs=1e-15)


def test_adam_zero_gradient_leaves_parameters_untouched():
    p = T.Tensor(np.array([0.25, -1.5]), requires_grad=True)
    opt = Adam({"p": p}, lr=1.0)
    p.grad = np.zeros(2)
    opt.step()
    assert p.data.tobytes() == np.array([0.25, -1.5]).tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="ResNet")
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_preconditions(small):
    with pytest.raises(ValueError):
        train(tiny_cfg(variant="DANN"), small[:1])
    with pytest.raises(ValueError):
        train(tiny_cfg(), [])


def test_split_is_a_partition(small):
    tr, va = split_train_val(small[1], 0.2, seed=0)
    assert sorted(tr + va) == list(range(len(small[1])))
    assert len(va) == 2
    assert split_train_val(small[1], 0.2, seed=0) == (tr, va)


def test_stratified_batches_are_balanced(small):
    idx = [list(range(8)), list(range(8))]
    sb = StratifiedBatches(small[:2], idx, batch_size=4, seed=0)
    batches = list(sb.epoch())
    assert len(batches) == 4
    for picks in batches:
        doms = [d for d, _ in picks]
        assert doms.count(0) == doms.count(1) == 2


def test_augment_keeps_mask_binary_and_draw_count():
    img = np.random.default_rng(0).random((1, 32, 32))
    mask = np.zeros((32, 32))
    mask[10:20, 12:18] = 1
    cfg = tiny_cfg()
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a_img, a_mask = augment(img, mask, rng, cfg)
        assert set(np.unique(a_mask)) <= {0.0, 1.0}
        assert a_img.shape == img.shape
        ref = np.random.default_rng(seed)
        ref.random(6)
        assert rng.random() == ref.random()


def test_augment_disabled_is_identity():
    img = np.random.default_rng(0).random((1, 32, 32))
    mask = (img[0] > 0.5).astype(float)
    cfg = tiny_cfg(augment_rotation=False, augment_scale=False, augment_shear=False)
    out_img, out_mask = augment(img, mask, np.random.default_rng(1), cfg)
    assert out_img is img and out_mask is mask


def test_update_disjointness(small):
    seen = []
    prev = {}

    def on_step(kind, bundle):
        now = bundle.snapshot()
        if prev:
            frozen = "mu" if kind == "task" else "sigma"
            for name in bundle.named_params(frozen):
                assert now[name].tobytes() == prev[name].tobytes(), (kind, name)
        seen.append(kind)
        prev.clear()
        prev.update(now)

    train(tiny_cfg(variant="MixDANN", epochs=1), small[:2], on_step=on_step)
    assert seen[:4] == ["task", "domain", "task", "domain"]


def test_deepall_never_allocates_discriminator(small):
    bundle, log = train(tiny_cfg(variant="DeepAll", epochs=1), small[:2])
    assert bundle.disc is None
    assert np.isnan(log.records[0].domain_loss)


def test_same_seed_is_bit_identical(small):
    runs = [train(tiny_cfg(variant="MixDANN"), small[:2]) for _ in range(2)]
    (b1, l1), (b2, l2) = runs
    for k, v in b1.snapshot().items():
        assert v.tobytes() == b2.snapshot()[k].tobytes()
    strip = lambda log: [dataclasses.replace(r, seconds=0.0) for r in log.records]
    assert repr(strip(l1)) == repr(strip(l2))
    assert l1.best_epoch == l2.best_epoch


def _task_trajectory(cfg, sources):
    traj = []
    train(cfg, sources, on_step=lambda kind, b: traj.append(b.snapshot()) if kind == "task" else None)
    return traj


def _unet_equal(ta, tb):
    assert len(ta) == len(tb)
    for a, b in zip(ta, tb):
        for k in (k for k in a if not k.startswith(("dconv", "fc"))):
            assert a[k].tobytes() == b[k].tobytes(), k


def test_mixdann_without_gamma_or_mixing_equals_deepall(small):
    off = GammaSchedule(xi=0.0)
    ta = _task_trajectory(tiny_cfg(variant="MixDANN", gamma=off, mixup=MixupConfig(apply_prob=0.0)), small[:2])
    tb = _task_trajectory(tiny_cfg(variant="DeepAll"), small[:2])
    _unet_equal(ta, tb)


def test_mixdann_without_gamma_equals_mixup(small):
    off = GammaSchedule(xi=0.0)
    ta = _task_trajectory(tiny_cfg(variant="MixDANN", gamma=off), small[:2])
    tb = _task_trajectory(tiny_cfg(variant="Mixup"), small[:2])
    _unet_equal(ta, tb)


def test_gamma_changes_the_trajectory(small):
    ta = _task_trajectory(tiny_cfg(variant="MixDANN", gamma=GammaSchedule(xi=1.0)), small[:2])
    tb = _task_trajectory(tiny_cfg(variant="Mixup"), small[:2])
    assert any(not np.array_equal(a["enc1a.w"], b["enc1a.w"]) for a, b in zip(ta, tb))


def test_literal_schedule_refused_in_training(small):
    with pytest.raises(ValueError, match="negative"):
        train(tiny_cfg(variant="DANN", gamma=GammaSchedule(literal=True)), small[:2])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_input_raises_numeric_error(small):
    bad = build_benchmark(seed=0, n_per_domain=10, H=32)[:2]
    for s in bad[0].subjects:
        s.image[:] = np.inf
    with pytest.raises(NumericError) as info:
        train(tiny_cfg(variant="DeepAll"), bad)
    assert info.value.epoch == 0 and info.value.batch == 0


def test_log_csv(small, tmp_path):
    _, log = train(tiny_cfg(variant="DANN"), small[:2])
    assert [r.epoch for r in log.records] == [0, 1]
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,task_loss,domain_loss,gamma,val_dsc,seconds"
    assert len(lines) == 3


def test_discriminator_learns_early():
    # default benchmark with all three domains as sources; gamma is still small
    doms = build_benchmark(seed=0)
    _, log = train(TrainConfig(variant="DANN", epochs=3, seed=0), doms)
    best = max(r.domain_acc for r in log.records)
    assert best > 1 / 3 + 0.1


def _constant_bundle(prob_logit):
    from mixdann.models import init_params

    b = init_params(0, base_channels=2, image_size=32)
    for p in b.all_params().values():
        p.data = np.zeros_like(p.data)
    b.unet.params["head.b"].data = np.array([prob_logit])
    return b


def test_predict_threshold_is_strict():
    x = np.random.default_rng(0).random((2, 1, 32, 32))
    assert predict(_constant_bundle(0.0), x).sum() == 0
    high = predict(_constant_bundle(np.log(9.0)), x)
    assert high.shape == (2, 32, 32) and high.all()


def test_predict_deterministic_and_checks_channels():
    b = _constant_bundle(0.3)
    b.unet.params["head.w"].data[:] = 0.7
    x = np.random.default_rng(1).random((3, 1, 32, 32))
    assert np.array_equal(predict(b, x), predict(b, x))
    with pytest.raises(T.ShapeError):
        predict(b, np.zeros((1, 2, 32, 32)))
