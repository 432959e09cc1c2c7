"""Training objectives: pixel cross-entropy, segment adaptation, memory,
noise-corrected pseudo-label loss, and pixel discovery loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Tensor,
    as_tensor,
    clamp_min,
    div,
    log,
    matmul,
    mul,
    reduce_sum,
    reshape,
    softmax,
    square,
    sub,
    take,
)

CLAMP_EPS = 1e-12


class ContractError(ValueError):
    pass


def cross_entropy(probs, target_onehot, valid_mask, reduction: str = "mean") -> Tensor:
    """``-sum_c y log p`` averaged over valid pixels of a ``(C, H, W)`` map.

    An empty mask yields a constant zero.
    """
    p = as_tensor(probs)
    y = np.asarray(target_onehot, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    if p.shape != y.shape or p.shape[1:] != mask.shape:
        raise ValueError(f"shape mismatch: probs {p.shape}, targets {y.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    sums = p.data[:, mask].sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-6 or p.data[:, mask].min() < 0:
        raise ContractError("probabilities must be non-negative and sum to 1 at valid pixels")
    # only the target class enters the log; avoid log(0) at other classes
    weight = y * mask
    picked = reduce_sum(mul(p, weight), axis=0)
    safe = np.where(mask, 0.0, 1.0)
    nll = mul(log(picked + safe), -1.0 * mask)
    total = reduce_sum(nll)
    return total * (1.0 / n) if reduction == "mean" else total


def _segment_alignment(vectors, class_ids, prototypes: np.ndarray) -> Tensor:
    v = as_tensor(vectors)
    ids = np.asarray(list(class_ids), dtype=np.int64)
    if v.ndim != 2 or v.shape[0] != prototypes.shape[0]:
        raise ValueError(f"representation dim {v.shape} does not match prototype dim {prototypes.shape[0]}")
    if v.shape[1] != ids.size:
        raise ValueError(f"{v.shape[1]} columns but {ids.size} class ids")
    proj = reduce_sum(mul(v, Tensor(prototypes[:, ids])), axis=0)
    return reduce_sum(square(sub(proj, 1.0))) * (0.5 / ids.size)


def adaptation_loss(segrep, present_classes, etf) -> Tensor:
    """Mean over present classes of ``1/2 (w_c^T S_c - 1)^2``."""
    protos = etf.weights if hasattr(etf, "weights") else np.asarray(etf)
    return _segment_alignment(segrep, present_classes, protos)


def memory_loss(memory, present_classes, etf) -> tuple[float, int]:
    """Frozen diagnostic ``1/2 (w_c^T M_c - 1)^2`` averaged over present classes.

    Returns ``(value, skipped)``; classes with no stored mean are skipped.
    """
    protos = etf.weights if hasattr(etf, "weights") else np.asarray(etf)
    ids = [c for c in present_classes if memory.counts[c] > 0]
    skipped = len(list(present_classes)) - len(ids)
    if not ids:
        return 0.0, skipped
    loss = _segment_alignment(memory.means[:, ids], ids, protos)
    return float(loss.data), skipped


def corrected_distribution(transition, probs, eps: float = CLAMP_EPS) -> tuple[Tensor, int]:
    """``normalize(max(N p, eps))`` per pixel; returns the count of all-clamped pixels."""
    N = np.asarray(transition.data if isinstance(transition, Tensor) else transition, dtype=np.float64)
    if not np.all(np.isfinite(N)):
        raise ValueError("transition matrix has non-finite entries")
    p = as_tensor(probs)
    K = p.shape[0]
    if N.shape != (K, K):
        raise ValueError(f"transition {N.shape} does not match {K} classes")
    flat = reshape(p, (K, -1))
    mixed = clamp_min(matmul(Tensor(N), flat), eps)
    fallback = int(np.all(mixed.data <= eps, axis=0).sum())
    q = div(mixed, reduce_sum(mixed, axis=0, keepdims=True))
    return reshape(q, p.shape), fallback


def corrected_loss(student_probs, transition, pseudo_onehot, confident_mask) -> Tensor:
    q, _ = corrected_distribution(transition, student_probs)
    return cross_entropy(q, pseudo_onehot, confident_mask)


def discovery_loss(student_probs_rest, discovery_onehot, discovery_mask) -> Tensor:
    p = as_tensor(student_probs_rest)
    if p.shape[0] == 0:
        return Tensor(0.0)
    return cross_entropy(p, discovery_onehot, discovery_mask)


def restricted_softmax(logits, class_ids) -> Tensor:
    """Softmax over a subset of class rows of ``(C, H, W)`` logits."""
    ids = np.asarray(list(class_ids), dtype=np.int64)
    return softmax(take(logits, ids, axis=0), axis=0)


@dataclass
class LossBreakdown:
    dapt: Tensor
    mem: Tensor
    corr: Tensor
    dis: Tensor
    total: Tensor
    corr_pixels: int = 0
    dis_pixels: int = 0
    extras: dict = field(default_factory=dict)

    def values(self) -> dict:
        out = {k: float(getattr(self, k).data) for k in ("dapt", "mem", "corr", "dis", "total")}
        out.update(corr_pixels=self.corr_pixels, dis_pixels=self.dis_pixels)
        out.update(self.extras)
        return out


def combined_loss(dapt, mem, corr, dis, corr_pixels: int = 0, dis_pixels: int = 0, **extras) -> LossBreakdown:
    """Unit-weight sum of the four adaptation terms."""
    parts = [as_tensor(x) for x in (dapt, mem, corr, dis)]
    total = parts[0] + parts[1] + parts[2] + parts[3]
    return LossBreakdown(*parts, total=total, corr_pixels=corr_pixels, dis_pixels=dis_pixels, extras=extras)
