"""Fixed simplex equiangular-tight-frame classifier and dot-regression loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, as_tensor, matmul, reshape, square, sub, mul, reduce_sum, reduce_mean


class UnsupportedDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class EtfClassifier:
    """Prototype matrix ``weights`` (d x C) whose columns form a simplex ETF."""

    weights: np.ndarray
    rotation: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def prototype(self, c: int) -> np.ndarray:
        return self.weights[:, c]


def ideal_gram(num_classes: int) -> np.ndarray:
    C = num_classes
    return (C / (C - 1)) * np.eye(C) - np.full((C, C), 1.0 / (C - 1))


def make_etf(num_classes: int, dim: int, rotation_seed: int = 1) -> EtfClassifier:
    """Build ``sqrt(C/(C-1)) U (I - 11^T/C)`` with orthonormal ``U`` (d x C).

    ``rotation_seed=0`` selects ``U = I`` (first C columns of the identity);
    any other seed draws ``U`` as the Q factor of a seeded Gaussian matrix with
    a positive-diagonal R.
    """
    C, d = int(num_classes), int(dim)
    if C < 2:
        raise ValueError(f"need at least 2 classes, got {C}")
    if d < C:
        raise UnsupportedDimensionError(f"feature dim {d} < class count {C}: no orthonormal d x C rotation exists")
    if rotation_seed == 0:
        U = np.eye(d, C)
    else:
        A = np.random.default_rng(rotation_seed).standard_normal((d, C))
        Q, R = np.linalg.qr(A)
        U = Q * np.sign(np.diag(R))
    W = np.sqrt(C / (C - 1)) * U @ (np.eye(C) - np.ones((C, C)) / C)
    W.setflags(write=False)
    U.setflags(write=False)
    return EtfClassifier(weights=W, rotation=U)


def verify_etf(etf, tolerance: float = 1e-9) -> dict:
    """Compare the Gram matrix of the prototypes with the ideal simplex Gram."""
    W = etf.weights if isinstance(etf, EtfClassifier) else np.asarray(etf, dtype=np.float64)
    C = W.shape[1]
    G = W.T @ W
    dev = np.abs(G - ideal_gram(C))
    # column norms are sqrt of the Gram diagonal
    norm_dev = np.abs(np.sqrt(np.diag(G)) - 1.0)
    off = dev[~np.eye(C, dtype=bool)]
    report = {
        "num_classes": C,
        "dim": W.shape[0],
        "max_norm_deviation": float(norm_dev.max()),
        "max_offdiag_deviation": float(off.max()) if off.size else 0.0,
        "tolerance": tolerance,
    }
    report["pass"] = bool(report["max_norm_deviation"] <= tolerance and report["max_offdiag_deviation"] <= tolerance)
    return report


def predict_scores(pixel_features, etf: EtfClassifier) -> Tensor:
    """Scores ``<f, w_c>`` for features shaped ``(d, H, W)`` or ``(B, d, H, W)``."""
    f = as_tensor(pixel_features)
    if f.ndim not in (3, 4) or f.shape[-3] != etf.dim:
        raise ValueError(f"feature map {f.shape} does not match ETF dim {etf.dim}")
    lead = f.shape[:-2]
    H, W = f.shape[-2:]
    flat = reshape(f, lead + (H * W,))
    scores = matmul(Tensor(etf.weights.T), flat)
    return reshape(scores, lead[:-1] + (etf.num_classes, H, W))


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def dr_loss(features, labels, etf: EtfClassifier, reduction: str = "mean") -> Tensor:
    """Dot-regression loss ``1/2 (w_{c_i}^T f_i - 1)^2`` over columns of ``features`` (d x n)."""
    f = as_tensor(features)
    labels = _check_labels(labels, etf.num_classes)
    if f.ndim != 2 or f.shape[0] != etf.dim or f.shape[1] != labels.size:
        raise ValueError(f"features {f.shape} incompatible with {labels.size} labels and dim {etf.dim}")
    proj = reduce_sum(mul(f, Tensor(etf.weights[:, labels])), axis=0)
    per = square(sub(proj, 1.0)) * 0.5
    if reduction == "sum":
        return reduce_sum(per)
    if reduction == "mean":
        return reduce_mean(per)
    raise ValueError(f"unknown reduction {reduction!r}")


def dr_loss_grad(feature: np.ndarray, label: int, etf: EtfClassifier) -> np.ndarray:
    """Analytic gradient ``(w^T f - 1) w``; equals ``-(1 - cos(f, w)) w`` for unit ``f``."""
    w = etf.weights[:, _check_labels(label, etf.num_classes)]
    return (w @ np.asarray(feature, dtype=np.float64) - 1.0) * w


@dataclass
class ClassMemory:
    """Per-class running sums; ``means`` is the exact mean of everything accumulated."""

    sums: np.ndarray
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.sums.shape[1], dtype=np.int64)

    @classmethod
    def empty(cls, dim: int, num_classes: int) -> "ClassMemory":
        return cls(np.zeros((dim, num_classes)))

    @property
    def means(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            m = self.sums / self.counts
        m[:, self.counts == 0] = 0.0
        return m

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0


def accumulate_class_means(features, labels, memory: ClassMemory) -> ClassMemory:
    f = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    labels = _check_labels(labels, memory.sums.shape[1])
    sums = memory.sums.copy()
    counts = memory.counts.copy()
    for c in np.unique(labels):
        sel = labels == c
        sums[:, c] += f[:, sel].sum(axis=1)
        counts[c] += int(sel.sum())
    return ClassMemory(sums, counts)


def nc_metrics(features, labels, etf: EtfClassifier) -> dict:
    """Neural-collapse diagnostics.

    NC1: trace of within-class scatter over trace of between-class scatter.
    NC2: max deviation of the Gram of centred, normalised class means from
    the ideal simplex Gram over the present classes.
    NC3: ``1 - min_c cos(M_c, w_c)``.
    """
    f = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    labels = _check_labels(labels, etf.num_classes)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("nc_metrics needs at least two classes present")
    means = np.stack([f[:, labels == c].mean(axis=1) for c in present], axis=1)
    centre = means.mean(axis=1, keepdims=True)
    within = float(((f - means[:, np.searchsorted(present, labels)]) ** 2).sum() / labels.size)
    between = float(((means - centre) ** 2).sum() / present.size)
    degenerate = between <= 1e-300
    if degenerate:
        nc1 = 0.0 if within <= 1e-300 else float("inf")
    else:
        nc1 = within / between

    centred = means - centre
    norms = np.linalg.norm(centred, axis=0)
    if np.any(norms <= 1e-300):
        nc2 = float("nan")
    else:
        u = centred / norms
        nc2 = float(np.abs(u.T @ u - ideal_gram(present.size)).max())

    w = etf.weights[:, present]
    mnorm = np.linalg.norm(means, axis=0)
    cos = (w * means).sum(axis=0) / (np.maximum(mnorm, 1e-300) * np.linalg.norm(w, axis=0))
    nc3 = float(1.0 - cos.min())
    return {"NC1": nc1, "NC2": nc2, "NC3": nc3, "degenerate": bool(degenerate)}
