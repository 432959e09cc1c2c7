"""EMA teacher and pseudo-label construction from teacher class probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TAU_HIGH = 0.8
TAU_LOW = 0.2
EMA_ALPHA = 0.999


@dataclass(frozen=True)
class TeacherState:
    """Snapshot of pixel-module arrays (parameters and BN buffers)."""

    params: dict
    alpha: float
    step: int = 0

    @classmethod
    def from_student(cls, student_state: dict, alpha: float = EMA_ALPHA) -> "TeacherState":
        return cls({k: np.array(v, dtype=np.float64, copy=True) for k, v in student_state.items()}, alpha, 0)


def ema_update(teacher: TeacherState, student_params: dict, alpha: float | None = None) -> TeacherState:
    """``phi <- alpha * phi + (1 - alpha) * theta`` for every array; returns a new state."""
    a = teacher.alpha if alpha is None else float(alpha)
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {a}")
    if set(student_params) != set(teacher.params):
        raise ValueError("teacher and student parameter names differ")
    new = {}
    for k, phi in teacher.params.items():
        theta = np.asarray(student_params[k], dtype=np.float64)
        if theta.shape != phi.shape:
            raise ValueError(f"shape mismatch for {k}: {phi.shape} vs {theta.shape}")
        new[k] = a * phi + (1.0 - a) * theta
    return TeacherState(new, teacher.alpha, teacher.step + 1)


@dataclass
class PseudoLabelBundle:
    present_classes: list
    confident_onehot: np.ndarray  # (C', H, W)
    confident_mask: np.ndarray  # (H, W) bool
    residual_classes: list = None
    discovery_onehot: np.ndarray = None  # (C - C', H, W)
    discovery_mask: np.ndarray = None  # (H, W) bool

    @property
    def confident_labels(self) -> np.ndarray:
        """Global class id per pixel, -1 where not confident."""
        out = np.full(self.confident_mask.shape, -1, dtype=np.int64)
        if self.present_classes:
            local = self.confident_onehot.argmax(axis=0)
            out[self.confident_mask] = np.asarray(self.present_classes)[local[self.confident_mask]]
        return out


def generate_pseudo_labels(teacher_probs: np.ndarray, tau_h: float = TAU_HIGH) -> PseudoLabelBundle:
    """Confident pixels are those whose max probability strictly exceeds ``tau_h``."""
    probs = np.asarray(teacher_probs, dtype=np.float64)
    top = probs.max(axis=0)
    arg = probs.argmax(axis=0)
    mask = top > tau_h
    present = sorted(int(c) for c in np.unique(arg[mask]))
    onehot = np.zeros((len(present),) + mask.shape)
    for row, c in enumerate(present):
        onehot[row] = (arg == c) & mask
    return PseudoLabelBundle(present, onehot, mask)


def discovery_targets(teacher_probs: np.ndarray, tau_l: float, present_classes) -> tuple:
    """Low-confidence pixels whose argmax lies outside the present set.

    Returns ``(residual_classes, onehot over residual classes, mask)``.
    """
    probs = np.asarray(teacher_probs, dtype=np.float64)
    C = probs.shape[0]
    present = set(int(c) for c in present_classes)
    residual = [c for c in range(C) if c not in present]
    arg = probs.argmax(axis=0)
    mask = (probs.max(axis=0) < tau_l) & ~np.isin(arg, list(present))
    onehot = np.zeros((len(residual),) + arg.shape)
    for row, c in enumerate(residual):
        onehot[row] = (arg == c) & mask
    return residual, onehot, mask


def make_bundle(teacher_probs: np.ndarray, tau_h: float = TAU_HIGH, tau_l: float = TAU_LOW) -> PseudoLabelBundle:
    if not tau_l < tau_h:
        raise ValueError(f"need tau_l < tau_h, got {tau_l} >= {tau_h}")
    bundle = generate_pseudo_labels(teacher_probs, tau_h)
    residual, onehot, mask = discovery_targets(teacher_probs, tau_l, bundle.present_classes)
    bundle.residual_classes = residual
    bundle.discovery_onehot = onehot
    bundle.discovery_mask = mask
    return bundle
