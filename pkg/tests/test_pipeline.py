import math

import numpy as np
import pytest

from helpers import brute_confusion, brute_miou
from segda import kernels
from segda.etf import ClassMemory
from segda.networks import ArchConfig
from segda.pipeline import (
    ABLATIONS,
    ConfigError,
    ExperimentConfig,
    SourceArtifacts,
    adapt_target,
    build_models,
    evaluate,
    iou_from_confusion,
    load_data,
    run_ablation,
    train_source,
)
from segda.synthdata import BenchmarkConfig, SceneConfig

TINY = ExperimentConfig(
    data=BenchmarkConfig(scene=SceneConfig(height=16, width=16, min_size=4, max_size=8),
                         source_train=6, source_val=3, target_train=6, target_val=3),
    arch=ArchConfig(stem_channels=4, mid_channels=6, enc_channels=8, dec_channels=6, feature_dim=8, ffn_hidden=8),
    source_iters=6, adapt_iters=6, eval_interval=3, probe_images=2,
)


@pytest.fixture(scope="module")
def data():
    return load_data(TINY)


@pytest.fixture(scope="module")
def source(data):
    return train_source(TINY, data)


@pytest.mark.parametrize("seed", range(200))
def test_miou_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 9))
    truth = rng.integers(0, C, (16, 16))
    pred = np.where(rng.random((16, 16)) < rng.random(), truth, rng.integers(0, C, (16, 16)))
    conf = kernels.confusion_counts(truth, pred, C)
    assert np.array_equal(conf, brute_confusion(truth, pred, C))
    assert np.array_equal(conf.sum(axis=1), np.bincount(truth.ravel(), minlength=C))
    _, miou = iou_from_confusion(conf)
    assert miou == brute_miou(truth, pred, C)


def test_miou_examples():
    truth = np.zeros((8, 8), int)
    truth[0:4, 0:4] = 1
    pred = np.zeros((8, 8), int)
    pred[0:4, 2:6] = 1  # shifted by half a square
    ious, _ = iou_from_confusion(kernels.confusion_counts(truth, pred, 3))
    assert ious[1] == pytest.approx(1 / 3, abs=1e-15)
    assert ious[2] is None
    ious, miou = iou_from_confusion(kernels.confusion_counts(truth, truth, 3))
    assert miou == 1.0 and ious == [1.0, 1.0, None]


def test_confusion_rejects_bad_ids():
    with pytest.raises(ValueError):
        kernels.confusion_counts(np.array([0, 3]), np.array([0, 1]), 3)
    with pytest.raises(ValueError):
        kernels.confusion_counts(np.array([0, 1]), np.array([0]), 3)


def test_config_validation():
    with pytest.raises(ConfigError):
        TINY.with_overrides(tau_l=0.9)
    with pytest.raises(ConfigError):
        TINY.with_overrides(head="svm")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"arch": {"width": 3}})
    cfg = ExperimentConfig.from_dict(TINY.to_dict())
    assert cfg == TINY


def test_zero_iterations_returns_initialisation(data):
    src = train_source(TINY.with_overrides(source_iters=0), data)
    fresh, _ = build_models(TINY)
    for k, v in fresh.state().items():
        assert np.array_equal(src.pixel.state()[k], v)
    assert [r["iter"] for r in src.log] == [0]


def test_source_training_is_deterministic(data, source):
    again = train_source(TINY, data)
    for k, v in source.pixel.state().items():
        assert again.pixel.state()[k].tobytes() == v.tobytes()
    assert again.log == source.log
    assert again.memory.sums.tobytes() == source.memory.sums.tobytes()


def test_source_log_and_memory(source):
    assert [r["iter"] for r in source.log] == [0, 3, 6]
    for r in source.log:
        assert {"NC1", "NC2", "NC3", "mIoU", "skipped_images", "clamp_counter"} <= set(r)
    assert source.memory.counts.sum() == 6 * 16 * 16


def test_empty_source_rejected(data):
    with pytest.raises(ValueError):
        train_source(TINY, {**data, "source_train": []})


def test_evaluate_report(source, data):
    rep = evaluate(source.pixel, source.classifier, data["target_val"])
    truth = np.stack([s.mask for s in data["target_val"]])
    assert np.array_equal(rep.confusion.sum(axis=1), np.bincount(truth.ravel(), minlength=6))
    assert 0.0 <= rep.miou <= 1.0
    with pytest.raises(ValueError):
        evaluate(source.pixel, source.classifier, [])


def test_adaptation_checks_ema_and_logs_finite_losses(source, data):
    ad = adapt_target(TINY, source, data, check_ema=True)
    assert [r["iter"] for r in ad.log] == [0, 3, 6]
    assert ad.teacher.step == TINY.adapt_iters
    for r in ad.log[1:]:
        for k in ("dapt", "mem", "corr", "dis", "total"):
            assert math.isfinite(r["losses"][k]) and r["losses"][k] >= 0.0
    # the source model is left untouched
    assert source.pixel.state()["enc.conv1.w"].tobytes() == train_source(TINY, data).pixel.state()["enc.conv1.w"].tobytes()


def test_alpha_one_freezes_teacher(source, data):
    ad = adapt_target(TINY.with_overrides(alpha=1.0), source, data, check_ema=True)
    for k, v in source.pixel.state().items():
        assert np.array_equal(ad.teacher.params[k], v)


def test_adaptation_is_deterministic(source, data):
    a = adapt_target(TINY, source, data)
    b = adapt_target(TINY, source, data)
    assert a.log == b.log
    assert a.pixel.state()["dec.conv2.w"].tobytes() == b.pixel.state()["dec.conv2.w"].tobytes()


@pytest.mark.parametrize("overrides", [{"noise_correction": False}, {"teacher": "latest"},
                                       {"reference": "projection"}, {"mem_mode": "literal"}])
def test_adaptation_variants_run(source, data, overrides):
    ad = adapt_target(TINY.with_overrides(adapt_iters=2, **overrides), source, data, check_ema=True)
    assert all(math.isfinite(v) for v in ad.log[-1]["losses"].values())


def test_adaptation_needs_memory(source, data):
    broken = SourceArtifacts(source.pixel, source.classifier, None, [], TINY)
    with pytest.raises(ValueError):
        adapt_target(TINY, broken, data)


def test_zero_adaptation_iterations(source, data):
    ad = adapt_target(TINY.with_overrides(adapt_iters=0), source, data)
    assert [r["iter"] for r in ad.log] == [0]
    assert ad.log[0]["mIoU"] == evaluate(source.pixel, source.classifier, data["target_val"]).miou


def test_ablation_shares_source_models(data):
    cfg = TINY.with_overrides(adapt_iters=2)
    one = run_ablation(cfg, {"full": {}}, data)
    assert len(one["rows"]) == 1
    grid = {k: ABLATIONS[k] for k in ("full", "no_noise_correction", "latest_teacher", "mlp_head")}
    res = run_ablation(cfg, grid, data, supervised_target=True)
    rows = {r["name"]: r for r in res["rows"]}
    assert rows["full"]["source_key"] == rows["no_noise_correction"]["source_key"] == rows["latest_teacher"]["source_key"]
    assert rows["mlp_head"]["source_key"] != rows["full"]["source_key"]
    assert rows["full"]["target_mIoU"] == one["rows"][0]["target_mIoU"]
    assert all(r["rel"] == pytest.approx(r["target_mIoU"] / res["supervised_target_mIoU"]) for r in rows.values())


def test_empty_memory_skips_literal_term(source, data):
    empty = SourceArtifacts(source.pixel, source.classifier, ClassMemory.empty(8, 6), [], TINY)
    ad = adapt_target(TINY.with_overrides(adapt_iters=2, mem_mode="literal"), empty, data)
    assert ad.counters["mem_skipped"] > 0 or ad.counters["skipped_images"] == 2 * TINY.batch_size
