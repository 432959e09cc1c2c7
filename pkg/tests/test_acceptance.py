"""Acceptance checks, one test per criterion.

The reference-run tests (8 to 11) share session fixtures and take a while on a
single core. The terminal summary prints one PASS/FAIL line per criterion.
"""
import json
import time

import numpy as np
import pytest

from helpers import (
    NUM_CLASSES,
    TINY,
    brute_confusion,
    brute_miou,
    make_instance,
    pseudo_label_oracle,
    random_prob_field,
    reached,
)
from segda import kernels
from segda.autograd import Parameter, Tensor, backprop, finite_diff_check, softmax
from segda.etf import dr_loss, dr_loss_grad, make_etf, verify_etf
from segda.losses import corrected_loss, cross_entropy
from segda.networks import ArchConfig
from segda.noise import noise_transition
from segda.pipeline import (
    ABLATIONS,
    ExperimentConfig,
    adapt_target,
    evaluate,
    iou_from_confusion,
    load_data,
    run_ablation,
    source_key,
    train_source,
)
from segda.synthdata import BenchmarkConfig, SceneConfig
from segda.teacher import TeacherState, ema_update, make_bundle

FD_SEEDS = range(20)
FD_EPSILON = 1e-5
FD_TOLERANCE = 1e-5
FD_LOGIT_SCALE = 3.0

REFERENCE_CONFIG = ExperimentConfig()
ABLATION_VARIANTS = ("mlp_head", "no_noise_correction", "latest_teacher")

# margins of criterion 9 and the reference run they were checked against
GAP_MIN = 0.10
RECOVERY_FRACTION = 1.0 / 3.0
REFERENCE = {
    "source_val": 0.9055,
    "source_only_target": 0.6596,
    "full": 0.8298,
    "mlp_head": 0.3390,
    "no_noise_correction": 0.7857,
    "latest_teacher": 0.7800,
}
# tolerated drift from the pinned numbers on other BLAS builds
REFERENCE_DRIFT = 0.02


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def _detail(record_property, text):
    record_property("detail", text)


# criteria 1 to 7: exact properties

@criterion(1, "ETF geometry")
def test_criterion_1_etf_geometry(record_property):
    start = time.perf_counter()
    worst_norm = worst_off = 0.0
    cases = 0
    for C in range(2, 33):
        for d in sorted({C, 2 * C, 64}):
            if d < C:
                continue
            rep = verify_etf(make_etf(C, d), tolerance=1e-10)
            worst_norm = max(worst_norm, rep["max_norm_deviation"])
            worst_off = max(worst_off, rep["max_offdiag_deviation"])
            assert rep["pass"], rep
            cases += 1
    elapsed = time.perf_counter() - start
    _detail(record_property, f"{cases} cases, norm {worst_norm:.1e}, off-diag {worst_off:.1e}, {elapsed:.2f}s")
    assert elapsed < 5.0


@pytest.fixture(scope="module")
def instances():
    return [make_instance(seed, logit_scale=FD_LOGIT_SCALE) for seed in FD_SEEDS]


@criterion(2, "gradient correctness")
def test_criterion_2_gradients(instances, record_property):
    start = time.perf_counter()
    worst = {}
    for seed, inst in zip(FD_SEEDS, instances):
        for name, fn in inst.losses.items():
            err = finite_diff_check(fn, {k: inst.params[k] for k in reached(inst, name)}, FD_EPSILON)
            if err > worst.get(name, (0.0, None))[0]:
                worst[name] = (err, seed)

    dr_gap = 0.0
    for seed in FD_SEEDS:
        rng = np.random.default_rng(seed)
        etf = make_etf(NUM_CLASSES, TINY.feature_dim, rotation_seed=seed + 1)
        f = rng.standard_normal((TINY.feature_dim, 64))
        f /= np.linalg.norm(f, axis=0)
        labels = rng.integers(0, NUM_CLASSES, 64)
        p = Parameter(f.copy(), "f")
        auto = backprop(dr_loss(p, labels, etf, reduction="sum"), {"f": p})["f"]
        for j in range(64):
            dr_gap = max(dr_gap, np.abs(auto[:, j] - dr_loss_grad(f[:, j], labels[j], etf)).max())
    elapsed = time.perf_counter() - start

    summary = ", ".join(f"{k} {v[0]:.1e}@{v[1]}" for k, v in worst.items())
    _detail(record_property, f"{summary}; dr analytic {dr_gap:.1e}; {elapsed:.0f}s")
    assert dr_gap <= 1e-10
    assert elapsed < 120.0
    failing = {k: v for k, v in worst.items() if v[0] > FD_TOLERANCE}
    assert not failing, f"finite-difference error above {FD_TOLERANCE}: {failing}"


@criterion(3, "gradient routing")
def test_criterion_3_routing(instances, record_property):
    checked = 0
    for inst in instances:
        for name in ("dr", "dapt", "corr", "dis", "combined"):
            grads = backprop(inst.losses[name](), inst.params)
            inside = set(reached(inst, name))
            for k, g in grads.items():
                if k not in inside:
                    assert np.all(g == 0.0), (name, k)
                    checked += 1
        # the exact statements: dapt never reaches the pixel decoder, corr and dis never the segment decoder
        for name, group in (("dapt", "pixel_decoder"), ("corr", "segment_decoder"), ("dis", "segment_decoder")):
            grads = backprop(inst.losses[name](), inst.params)
            assert all(np.all(grads[k] == 0.0) for k, p in inst.params.items() if p.group == group)
    _detail(record_property, f"{len(instances)} instances, {checked} zero blocks")


@criterion(4, "noise-transition algebra")
def test_criterion_4_noise_algebra(record_property):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d, k = int(rng.integers(4, 33)), int(rng.integers(2, 5))
        k = min(k, d)
        S, _ = np.linalg.qr(rng.standard_normal((d, k)))
        worst = max(worst, np.abs(noise_transition(S, S).matrix - np.eye(k)).max())
        P = np.eye(k)[rng.permutation(k)]
        worst = max(worst, np.abs(noise_transition(S, S @ P).matrix - P).max())

        probs = softmax(Tensor(rng.standard_normal((k, 6, 6))), axis=0).data
        y = np.eye(k)[rng.integers(0, k, (6, 6))].transpose(2, 0, 1)
        mask = rng.random((6, 6)) < 0.7
        mask[0, 0] = True
        a = corrected_loss(probs, np.eye(k), y, mask).data
        b = cross_entropy(probs, y, mask).data
        worst = max(worst, abs(float(a - b)))
    _detail(record_property, f"max deviation {worst:.1e}")
    assert worst <= 1e-12


@criterion(5, "EMA teacher")
def test_criterion_5_ema(record_property):
    t = TeacherState.from_student({"w": np.zeros(3)}, alpha=0.999)
    ones = {"w": np.ones(3)}
    worst = 0.0
    for step in range(1, 10_001):
        t = ema_update(t, ones)
        worst = max(worst, float(np.abs(t.params["w"] - (1.0 - 0.999 ** step)).max()))
    # every adaptation step checks the gradient map and the EMA rule
    cfg = ExperimentConfig(
        data=BenchmarkConfig(scene=SceneConfig(height=16, width=16, min_size=4, max_size=8),
                             source_train=4, source_val=2, target_train=4, target_val=2),
        arch=ArchConfig(stem_channels=4, mid_channels=6, enc_channels=8, dec_channels=6, feature_dim=8, ffn_hidden=8),
        source_iters=10, adapt_iters=25, eval_interval=25, probe_images=2,
    )
    data = load_data(cfg)
    for overrides in ({}, {"teacher": "latest"}):
        c = cfg.with_overrides(**overrides)
        ad = adapt_target(c, train_source(c, data), data, check_ema=True)
        assert ad.teacher.step == c.adapt_iters
    _detail(record_property, f"closed form {worst:.1e} over 10^4 steps")
    assert worst <= 1e-12


@criterion(6, "pseudo-labelling oracle")
def test_criterion_6_pseudo_labels(record_property):
    confident = discovery = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(6, 12))
        probs = random_prob_field(rng, C)
        b = make_bundle(probs, 0.8, 0.2)
        present, residual, conf, disc = pseudo_label_oracle(probs, 0.8, 0.2)
        assert b.present_classes == present and b.residual_classes == residual
        assert not np.any(b.confident_mask & b.discovery_mask)
        assert {(int(i), int(j)) for i, j in zip(*np.nonzero(b.confident_mask))} == set(conf)
        assert {(int(i), int(j)) for i, j in zip(*np.nonzero(b.discovery_mask))} == set(disc)
        for (i, j), c in conf.items():
            assert b.confident_onehot[:, i, j].tolist() == [float(c == k) for k in present]
        for (i, j), c in disc.items():
            assert b.discovery_onehot[:, i, j].tolist() == [float(c == k) for k in residual]
        assert not b.confident_onehot[:, ~b.confident_mask].any()
        assert not b.discovery_onehot[:, ~b.discovery_mask].any()
        confident += len(conf)
        discovery += len(disc)
    _detail(record_property, f"200 fields, {confident} confident and {discovery} discovery pixels")
    assert confident > 0 and discovery > 0


@criterion(7, "mIoU oracle")
def test_criterion_7_miou(record_property):
    for seed in range(200):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(2, 9))
        truth = rng.integers(0, C, (16, 16))
        pred = np.where(rng.random((16, 16)) < rng.random(), truth, rng.integers(0, C, (16, 16)))
        conf = kernels.confusion_counts(truth, pred, C)
        assert np.array_equal(conf, brute_confusion(truth, pred, C))
        assert iou_from_confusion(conf)[1] == brute_miou(truth, pred, C)
    _detail(record_property, "200 pairs")


# criteria 8 to 11: the reference run

def _run_reference():
    cfg = REFERENCE_CONFIG
    data = load_data(cfg)
    start = time.perf_counter()
    source = train_source(cfg, data)
    source_time = time.perf_counter() - start
    start = time.perf_counter()
    full = adapt_target(cfg, source, data, check_ema=True)
    adapt_time = time.perf_counter() - start
    reports = {
        "source_val": evaluate(source.pixel, source.classifier, data["source_val"]).to_dict(),
        "source_only_target": evaluate(source.pixel, source.classifier, data["target_val"]).to_dict(),
        "full": evaluate(full.pixel, full.classifier, data["target_val"]).to_dict(),
    }
    ablation = run_ablation(cfg, {k: ABLATIONS[k] for k in ABLATION_VARIANTS}, data,
                            sources={source_key(cfg): source})
    return {
        "source": source, "source_time": source_time, "full": full, "adapt_time": adapt_time,
        "reports": reports, "ablation": ablation,
    }


def _fingerprint(run):
    """Everything criteria 8 to 10 look at, serialised for byte comparison."""
    weights = {k: v.tobytes().hex() for k, v in sorted(run["full"].pixel.state().items())}
    return json.dumps({
        "source_log": run["source"].log,
        "adapt_log": run["full"].log,
        "counters": run["full"].counters,
        "reports": run["reports"],
        "ablation": run["ablation"],
        "weights": weights,
    }, sort_keys=True, default=float)


@pytest.fixture(scope="session")
def reference_run():
    return _run_reference()


def _miou(run, name):
    if name in run["reports"]:
        return run["reports"][name]["mIoU"]
    return next(r["target_mIoU"] for r in run["ablation"]["rows"] if r["name"] == name)


@pytest.mark.slow
@criterion(8, "neural-collapse trend")
def test_criterion_8_neural_collapse(reference_run, record_property):
    log = reference_run["source"].log
    nc1 = [r["NC1"] for r in log]
    nc3 = [r["NC3"] for r in log]
    violations = sum(b > a for a, b in zip(nc3, nc3[1:]))
    _detail(record_property, f"NC1 {nc1[0]:.3g} -> {nc1[-1]:.3g}, NC3 {nc3[0]:.3g} -> {nc3[-1]:.3g}, "
                             f"{violations} NC3 rises, {reference_run['source_time']:.0f}s")
    assert nc1[-1] <= 0.1 * nc1[0]
    assert violations <= 1
    assert reference_run["source_time"] < 300.0


@pytest.mark.slow
@criterion(9, "adaptation delta")
def test_criterion_9_adaptation_delta(reference_run, record_property):
    src_val = _miou(reference_run, "source_val")
    before = _miou(reference_run, "source_only_target")
    after = _miou(reference_run, "full")
    gap = src_val - before
    elapsed = reference_run["source_time"] + reference_run["adapt_time"]
    _detail(record_property, f"source-val {src_val:.4f}, source-only target {before:.4f}, adapted {after:.4f}, "
                             f"gap {gap:.4f}, recovered {after - before:.4f}, {elapsed:.0f}s")
    assert gap >= GAP_MIN
    assert after - before >= RECOVERY_FRACTION * gap
    assert elapsed < 600.0
    for name in ("source_val", "source_only_target", "full"):
        assert abs(_miou(reference_run, name) - REFERENCE[name]) <= REFERENCE_DRIFT, name


@pytest.mark.slow
@criterion(10, "ablation direction")
def test_criterion_10_ablation(reference_run, record_property):
    full = _miou(reference_run, "full")
    variants = {name: _miou(reference_run, name) for name in ABLATION_VARIANTS}
    _detail(record_property, f"full {full:.4f}, " + ", ".join(f"{k} {v:.4f}" for k, v in variants.items()))
    for name, value in variants.items():
        assert full >= value, name
        assert abs(value - REFERENCE[name]) <= REFERENCE_DRIFT, name


@pytest.mark.slow
@criterion(11, "determinism")
def test_criterion_11_determinism(reference_run, record_property):
    again = _run_reference()
    a, b = _fingerprint(reference_run), _fingerprint(again)
    _detail(record_property, f"{len(a)} byte fingerprint, identical: {a == b}")
    assert a == b
