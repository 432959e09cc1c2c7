"""Source training, target adaptation, evaluation and ablation runs."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kernels
from .autograd import Tensor, backprop, l2_normalize, reshape, scale, softmax, take, transpose
from .etf import ClassMemory, EtfClassifier, accumulate_class_means, dr_loss, make_etf, nc_metrics, predict_scores
from .losses import (
    adaptation_loss,
    combined_loss,
    corrected_distribution,
    cross_entropy,
    discovery_loss,
    memory_loss,
    restricted_softmax,
)
from .networks import ArchConfig, ClassEmbedder, LinearHead, PixelModule, SegmentModule, class_embeddings
from .noise import FeatureReferenceEmbedder, ReferenceEmbedder, crop_segments, noise_transition, reference_embed
from .synthdata import BenchmarkConfig, build_benchmark, color_augment, read_benchmark
from .teacher import TeacherState, ema_update, make_bundle

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


HEADS = ("etf", "mlp")
TEACHERS = ("ema", "latest")
MEM_MODES = ("replay", "literal")
REFERENCES = ("source", "projection")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: BenchmarkConfig = BenchmarkConfig()
    data_dir: str | None = None
    arch: ArchConfig = ArchConfig()
    rotation_seed: int = 1
    source_iters: int = 2000
    adapt_iters: int = 2000
    batch_size: int = 2
    lr_encoder: float = 0.005
    lr_decoder: float = 0.05
    momentum: float = 0.9
    warmup_frac: float = 0.1
    tau_h: float = 0.8
    tau_l: float = 0.2
    alpha: float = 0.999
    logit_scale: float = 3.0
    head: str = "etf"
    teacher: str = "ema"
    noise_correction: bool = True
    reference: str = "source"
    color_aug: bool = True
    mem_mode: str = "replay"
    reduction: str = "mean"
    eval_interval: int = 250
    probe_images: int = 4

    def validate(self) -> "ExperimentConfig":
        if not 0.0 < self.tau_l < self.tau_h < 1.0:
            raise ConfigError(f"need 0 < tau_l < tau_h < 1, got tau_l={self.tau_l}, tau_h={self.tau_h}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.teacher not in TEACHERS:
            raise ConfigError(f"teacher must be one of {TEACHERS}")
        if self.reference not in REFERENCES:
            raise ConfigError(f"reference must be one of {REFERENCES}")
        if self.mem_mode not in MEM_MODES:
            raise ConfigError(f"mem_mode must be one of {MEM_MODES}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction must be 'mean' or 'sum'")
        for name in ("source_iters", "adapt_iters", "eval_interval"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be positive")
        if self.lr_encoder < 0 or self.lr_decoder < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning rates must be non-negative and momentum in [0, 1)")
        self.data.scene.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "data" in d:
                d["data"] = BenchmarkConfig.from_dict(d["data"])
            if "arch" in d:
                d["arch"] = ArchConfig(**d["arch"])
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw).validate()


# helpers

def load_data(config: ExperimentConfig) -> dict:
    if config.data_dir:
        return read_benchmark(config.data_dir)
    return build_benchmark(config.data)


def unit_features(feats) -> np.ndarray:
    f = feats.data if isinstance(feats, Tensor) else feats
    return f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)


def _stack(scenes) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in scenes]), np.stack([s.mask for s in scenes])


class SGD:
    """Momentum SGD with per-group learning rates and linear warmup."""

    def __init__(self, params: dict, lrs: dict, momentum: float, warmup: int):
        self.params = params
        self.lrs = lrs
        self.momentum = momentum
        self.warmup = max(int(warmup), 0)
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        factor = min(1.0, (self.t + 1) / self.warmup) if self.warmup else 1.0
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k]
            p.data -= factor * self.lrs[p.group] * v
        self.t += 1


def _lrs(config: ExperimentConfig) -> dict:
    d = config.lr_decoder
    return {"encoder": config.lr_encoder, "pixel_decoder": d, "segment_decoder": d, "head": d}


@dataclass
class Classifier:
    """Either the fixed ETF or a learnable linear head behind one interface."""

    etf: EtfClassifier
    head: LinearHead | None = None

    @property
    def params(self) -> dict:
        return dict(self.head.params) if self.head is not None else {}

    def scores(self, features) -> Tensor:
        """Class scores of per-pixel L2-normalised features ``(B, d, H, W)``."""
        unit = l2_normalize(features, axis=1)
        return self.head.scores(unit) if self.head is not None else predict_scores(unit, self.etf)

    def prototypes(self) -> np.ndarray:
        return self.head.prototypes() if self.head is not None else self.etf.weights

    def logits(self, features, logit_scale: float) -> Tensor:
        s = self.scores(features)
        return s if self.head is not None else scale(s, logit_scale)

    def clone(self) -> "Classifier":
        if self.head is None:
            return Classifier(self.etf)
        h = LinearHead.__new__(LinearHead)
        h.params = {k: type(p)(p.data.copy(), p.name, p.group) for k, p in self.head.params.items()}
        return Classifier(self.etf, h)


def supervised_loss(features, labels: np.ndarray, clf: Classifier, config: ExperimentConfig) -> Tensor:
    """DR loss against the ETF, or pixel CE for the linear-head ablation."""
    B, d, H, W = features.shape
    if clf.head is None:
        unit = l2_normalize(features, axis=1)
        flat = reshape(transpose(unit, (1, 0, 2, 3)), (d, B * H * W))
        return dr_loss(flat, labels.reshape(-1), clf.etf, reduction=config.reduction)
    logits = clf.logits(features, config.logit_scale)
    C = clf.head.num_classes
    total = None
    for b in range(B):
        probs = softmax(take(logits, [b], axis=0).reshape(C, H, W), axis=0)
        onehot = np.eye(C)[labels[b]].transpose(2, 0, 1)
        ce = cross_entropy(probs, onehot, np.ones((H, W), dtype=bool))
        total = ce if total is None else total + ce
    return total * (1.0 / B)


# evaluation

@dataclass
class EvalReport:
    per_class_iou: list
    miou: float
    confusion: np.ndarray
    nc: dict | None = None
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_class_iou": self.per_class_iou, "mIoU": self.miou,
                "confusion": self.confusion.tolist(), "nc": self.nc}


def iou_from_confusion(conf: np.ndarray) -> tuple[list, float]:
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    ious = [None if denom[c] == 0 else float(tp[c] / denom[c]) for c in range(conf.shape[0])]
    valid = [v for v in ious if v is not None]
    # plain left-to-right mean, so the result is independent of numpy's pairwise summation
    return ious, sum(valid) / len(valid) if valid else float("nan")


def predict(pixel: PixelModule, clf: Classifier, images: np.ndarray, chunk: int = 8) -> np.ndarray:
    preds = []
    for i in range(0, len(images), chunk):
        _, feats = pixel.forward(images[i:i + chunk], training=False)
        preds.append(clf.scores(feats).data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(pixel: PixelModule, clf: Classifier, scenes, num_classes: int | None = None,
             with_nc: bool = False) -> EvalReport:
    if not scenes:
        raise ValueError("evaluation dataset is empty")
    images, masks = _stack(scenes)
    C = num_classes or scenes[0].num_classes
    pred = predict(pixel, clf, images)
    conf = kernels.confusion_counts(masks, pred, C)
    ious, miou = iou_from_confusion(conf)
    nc = None
    if with_nc:
        nc = probe_nc(pixel, clf, scenes[:4])
    return EvalReport(ious, miou, conf, nc)


def probe_nc(pixel: PixelModule, clf: Classifier, scenes) -> dict:
    images, masks = _stack(scenes)
    _, feats = pixel.forward(images, training=False)
    d = feats.shape[1]
    flat = unit_features(feats).transpose(1, 0, 2, 3).reshape(d, -1)
    etf = EtfClassifier(clf.prototypes(), clf.etf.rotation) if clf.head is not None else clf.etf
    return nc_metrics(flat, masks.reshape(-1), etf)


# source stage

@dataclass
class SourceArtifacts:
    pixel: PixelModule
    classifier: Classifier
    memory: ClassMemory
    log: list
    config: ExperimentConfig


def build_models(config: ExperimentConfig) -> tuple[PixelModule, Classifier]:
    C = config.data.scene.num_classes
    pixel = PixelModule(config.arch, seed=config.seed * 1000 + 11)
    etf = make_etf(C, config.arch.feature_dim, config.rotation_seed)
    head = LinearHead(config.arch.feature_dim, C, seed=config.seed * 1000 + 13) if config.head == "mlp" else None
    return pixel, Classifier(etf, head)


def train_source(config: ExperimentConfig, data: dict | None = None, split: str = "source_train",
                 val_split: str = "source_val") -> SourceArtifacts:
    config.validate()
    data = load_data(config) if data is None else data
    train = data[split]
    if not train:
        raise ValueError(f"split {split!r} is empty")
    val = data.get(val_split) or []
    pixel, clf = build_models(config)
    params = {**pixel.params, **clf.params}
    opt = SGD(params, _lrs(config), config.momentum, config.warmup_frac * config.source_iters)
    rng = np.random.default_rng([config.seed, 101])
    probe = train[: config.probe_images]
    history = []

    def record(it, loss):
        rec = {"iter": it, "losses": {"sup": loss}}
        if val:
            rec["mIoU"] = evaluate(pixel, clf, val).miou
        rec.update({k: v for k, v in probe_nc(pixel, clf, probe).items() if k != "degenerate"})
        rec.update(skipped_images=0, clamp_counter=0)
        history.append(rec)
        log.info("source iter %d: %s", it, rec)

    record(0, None)
    for it in range(1, config.source_iters + 1):
        idx = rng.integers(0, len(train), size=config.batch_size)
        images, masks = _stack([train[i] for i in idx])
        if config.color_aug:
            images = np.stack([color_augment(im, rng) for im in images])
        _, feats = pixel.forward(images, training=True)
        loss = supervised_loss(feats, masks, clf, config)
        opt.step(backprop(loss, params))
        if it % config.eval_interval == 0 or it == config.source_iters:
            record(it, float(loss.data))

    memory = ClassMemory.empty(config.arch.feature_dim, config.data.scene.num_classes)
    for i in range(0, len(train), 8):
        images, masks = _stack(train[i:i + 8])
        _, feats = pixel.forward(images, training=False)
        d = feats.shape[1]
        flat = unit_features(feats).transpose(1, 0, 2, 3).reshape(d, -1)
        memory = accumulate_class_means(flat, masks.reshape(-1), memory)
    return SourceArtifacts(pixel, clf, memory, history, config)


# adaptation stage

@dataclass
class AdaptArtifacts:
    pixel: PixelModule
    classifier: Classifier
    segment: SegmentModule
    teacher: TeacherState
    log: list
    counters: dict


def adapt_target(config: ExperimentConfig, source: SourceArtifacts, data: dict | None = None,
                 check_ema: bool = False) -> AdaptArtifacts:
    config.validate()
    if source is None or source.memory is None:
        raise ValueError("adaptation needs source artifacts with a class memory")
    data = load_data(config) if data is None else data
    target, target_val = data["target_train"], data.get("target_val") or []
    source_train = data["source_train"]
    C = config.data.scene.num_classes
    d = config.arch.feature_dim

    student = source.pixel.clone()
    clf = source.classifier.clone()
    segment = SegmentModule(d, config.arch.enc_channels, config.arch.ffn_hidden, seed=config.seed * 1000 + 17)
    embedder = ClassEmbedder(C, d, seed=config.seed * 1000 + 19)
    if config.reference == "source":
        ref = FeatureReferenceEmbedder(source.pixel)
    else:
        ref = ReferenceEmbedder(d, seed=config.seed * 1000 + 23)
    teacher_state = TeacherState.from_student(student.state(), config.alpha)
    teacher_net = student.clone()

    params = {**student.params, **clf.params, **segment.params}
    opt = SGD(params, _lrs(config), config.momentum, config.warmup_frac * config.adapt_iters)
    rng = np.random.default_rng([config.seed, 202])
    counters = {"skipped_images": 0, "clamp_counter": 0, "mem_skipped": 0}
    history = []
    window = []

    def record(it):
        rec = {"iter": it}
        if window:
            rec["losses"] = {k: float(np.mean([w[k] for w in window])) for k in window[0]}
        else:
            rec["losses"] = None
        if target_val:
            rec["mIoU"] = evaluate(student, clf, target_val).miou
        rec.update({k: v for k, v in probe_nc(student, clf, source_train[: config.probe_images]).items()
                    if k != "degenerate"})
        rec.update(skipped_images=counters["skipped_images"], clamp_counter=counters["clamp_counter"])
        history.append(rec)
        window.clear()
        log.info("adapt iter %d: %s", it, rec)

    record(0)
    for it in range(1, config.adapt_iters + 1):
        idx = rng.integers(0, len(target), size=config.batch_size)
        scenes = [target[i] for i in idx]
        images, _ = _stack(scenes)

        teacher_net.load_state(teacher_state.params)
        _, t_feats = teacher_net.forward(images, training=False)
        t_probs = softmax(clf.logits(Tensor(t_feats.data), config.logit_scale), axis=1).data

        F, feats = student.forward(images, training=True)
        logits = clf.logits(feats, config.logit_scale)
        protos = clf.prototypes()
        H, W = images.shape[-2:]

        dapt = corr = dis = None
        used = corr_px = dis_px = 0
        mem_literal = []
        for b in range(len(scenes)):
            bundle = make_bundle(t_probs[b], config.tau_h, config.tau_l)
            present = bundle.present_classes
            if not present:
                counters["skipped_images"] += 1
                continue
            used += 1
            S = segment.forward(take(F, [b], axis=0), class_embeddings(present, embedder))
            l_dapt = adaptation_loss(S, present, protos)
            lb = reshape(take(logits, [b], axis=0), (C, H, W))
            p_present = restricted_softmax(lb, present)
            if config.noise_correction:
                crops = crop_segments(scenes[b].image, bundle)
                noisy = np.stack([reference_embed(c, ref) for c in crops], axis=1)
                N = noise_transition(S.data, noisy, present)
                q, fallback = corrected_distribution(N.matrix, p_present)
                counters["clamp_counter"] += fallback
                l_corr = cross_entropy(q, bundle.confident_onehot, bundle.confident_mask)
                if bundle.residual_classes and bundle.discovery_mask.any():
                    p_rest = restricted_softmax(lb, bundle.residual_classes)
                    l_dis = discovery_loss(p_rest, bundle.discovery_onehot, bundle.discovery_mask)
                else:
                    l_dis = Tensor(0.0)
                dis_px += int(bundle.discovery_mask.sum())
            else:
                l_corr = cross_entropy(p_present, bundle.confident_onehot, bundle.confident_mask)
                l_dis = Tensor(0.0)
            corr_px += int(bundle.confident_mask.sum())
            m_val, m_skip = memory_loss(source.memory, present, protos)
            counters["mem_skipped"] += m_skip
            mem_literal.append(m_val)
            dapt = l_dapt if dapt is None else dapt + l_dapt
            corr = l_corr if corr is None else corr + l_corr
            dis = l_dis if dis is None else dis + l_dis

        if used:
            dapt, corr, dis = dapt * (1.0 / used), corr * (1.0 / used), dis * (1.0 / used)
        else:
            dapt = corr = dis = Tensor(0.0)
        mem_lit = float(np.mean(mem_literal)) if mem_literal else 0.0
        if config.mem_mode == "replay":
            j = int(rng.integers(0, len(source_train)))
            s_img, s_mask = _stack([source_train[j]])
            _, s_feats = student.forward(s_img, training=True, update_stats=False)
            mem = supervised_loss(s_feats, s_mask, clf, config)
        else:
            mem = Tensor(mem_lit)

        parts = combined_loss(dapt, mem, corr, dis, corr_px, dis_px, mem_literal=mem_lit)
        grads = backprop(parts.total, params)
        if check_ema:
            teacher_ids = {id(p) for p in teacher_net.params.values()} | {id(a) for a in teacher_state.params.values()}
            if any(id(p) in teacher_ids or id(p.data) in teacher_ids for p in params.values()):
                raise AssertionError("teacher array entered the gradient map")
        opt.step(grads)

        prev = teacher_state
        if config.teacher == "ema":
            teacher_state = ema_update(teacher_state, student.state(), config.alpha)
        else:
            teacher_state = ema_update(teacher_state, student.state(), 0.0)
        if check_ema:
            a = config.alpha if config.teacher == "ema" else 0.0
            st = student.state()
            for k, phi in teacher_state.params.items():
                if not np.array_equal(phi, a * prev.params[k] + (1.0 - a) * st[k]):
                    raise AssertionError(f"teacher parameter {k} changed outside the EMA rule")
        window.append(parts.values())
        if it % config.eval_interval == 0 or it == config.adapt_iters:
            record(it)
    return AdaptArtifacts(student, clf, segment, teacher_state, history, counters)


# ablation

ABLATIONS = {
    "full": {},
    "mlp_head": {"head": "mlp"},
    "no_noise_correction": {"noise_correction": False},
    "latest_teacher": {"teacher": "latest"},
    "no_color_aug": {"color_aug": False},
}

SOURCE_KEYS = ("head", "color_aug", "source_iters", "arch", "seed", "rotation_seed", "data", "data_dir")


def source_key(config: ExperimentConfig) -> str:
    """Canonical string of the settings that determine the source model."""
    return json.dumps({k: getattr(config, k) if k not in ("arch", "data") else asdict(getattr(config, k))
                       for k in SOURCE_KEYS}, sort_keys=True, default=str)


def run_ablation(config: ExperimentConfig, variants: dict | None = None, data: dict | None = None,
                 supervised_target: bool = False, sources: dict | None = None) -> dict:
    """Adapt once per variant; variants with identical source settings share one source model."""
    variants = ABLATIONS if variants is None else variants
    data = load_data(config) if data is None else data
    sources = {} if sources is None else sources
    rows = []
    source_only = None
    for name, overrides in variants.items():
        cfg = config.with_overrides(**overrides)
        key = source_key(cfg)
        if key not in sources:
            sources[key] = train_source(cfg, data)
        src = sources[key]
        if source_only is None:
            source_only = {
                "source_val": evaluate(src.pixel, src.classifier, data["source_val"]).miou,
                "target_val": evaluate(src.pixel, src.classifier, data["target_val"]).miou,
            }
        adapted = adapt_target(cfg, src, data)
        report = evaluate(adapted.pixel, adapted.classifier, data["target_val"])
        rows.append({"name": name, "overrides": overrides, "source_key": key,
                     "target_mIoU": report.miou, "per_class_iou": report.per_class_iou,
                     "source_only_target_mIoU": evaluate(src.pixel, src.classifier, data["target_val"]).miou})
    result = {"rows": rows, "source_only": source_only}
    if supervised_target:
        sup = train_source(config, data, split="target_train", val_split="target_val")
        sup_miou = evaluate(sup.pixel, sup.classifier, data["target_val"]).miou
        result["supervised_target_mIoU"] = sup_miou
        for r in rows:
            r["rel"] = r["target_mIoU"] / sup_miou if sup_miou > 0 else float("nan")
    return result


def write_jsonl(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")
