"""Noise transition estimation from segment representations and crop embeddings."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .losses import CLAMP_EPS, corrected_distribution

log = logging.getLogger(__name__)

CROP_SIZE = 16


@dataclass(frozen=True)
class SegmentCrop:
    class_id: int
    box: tuple  # (row_min, row_max, col_min, col_max), inclusive
    patch: np.ndarray  # (3, CROP_SIZE, CROP_SIZE)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``(C, H, W)`` with pixel-centre alignment and edge clamping."""
    C, H, W = image.shape

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(H, out_h)
    c0, c1, fc = axis(W, out_w)
    top = image[:, r0][:, :, c0] * (1 - fc) + image[:, r0][:, :, c1] * fc
    bot = image[:, r1][:, :, c0] * (1 - fc) + image[:, r1][:, :, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def crop_segments(image: np.ndarray, bundle, size: int = CROP_SIZE) -> list:
    """One crop per present class, in ``present_classes`` order."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if not bundle.present_classes:
        raise ValueError("no present classes to crop")
    H, W = image.shape[1:]
    crops = []
    for row, c in enumerate(bundle.present_classes):
        rr, cc = np.nonzero(bundle.confident_onehot[row] > 0)
        if rr.size == 0:
            continue
        r0, r1 = max(int(rr.min()), 0), min(int(rr.max()), H - 1)
        c0, c1 = max(int(cc.min()), 0), min(int(cc.max()), W - 1)
        patch = resize_bilinear(image[:, r0:r1 + 1, c0:c1 + 1], size, size)
        crops.append(SegmentCrop(int(c), (r0, r1, c0, c1), patch))
    return crops


class ReferenceEmbedder:
    """Frozen seeded random projection of flattened crops onto the unit sphere."""

    def __init__(self, dim: int, patch_size: int = CROP_SIZE, channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        n = channels * patch_size * patch_size
        proj = rng.standard_normal((dim, n)) / np.sqrt(n)
        proj.setflags(write=False)
        self.projection = proj
        fallback = np.ones(dim) / np.sqrt(dim)
        fallback.setflags(write=False)
        self.fallback = fallback
        self.degenerate_count = 0

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def project(self, patch: np.ndarray) -> np.ndarray:
        return self.projection @ patch.reshape(-1)


class FeatureReferenceEmbedder:
    """Frozen copy of a trained pixel module; a crop maps to its mean unit feature.

    Lives in the same space as the segment representations, unlike the random projection.
    """

    def __init__(self, pixel):
        self.pixel = pixel.clone()
        d = pixel.arch.feature_dim
        fallback = np.ones(d) / np.sqrt(d)
        fallback.setflags(write=False)
        self.fallback = fallback
        self.degenerate_count = 0

    @property
    def dim(self) -> int:
        return self.fallback.shape[0]

    def project(self, patch: np.ndarray) -> np.ndarray:
        _, f = self.pixel.forward(patch[None], training=False)
        f = f.data[0]
        unit = f / np.maximum(np.linalg.norm(f, axis=0, keepdims=True), 1e-12)
        return unit.reshape(unit.shape[0], -1).mean(axis=1)


def reference_embed(crop, embedder) -> np.ndarray:
    patch = crop.patch if isinstance(crop, SegmentCrop) else np.asarray(crop, dtype=np.float64)
    v = embedder.project(patch)
    norm = np.linalg.norm(v)
    if norm <= 1e-12:
        embedder.degenerate_count += 1
        log.warning("degenerate crop embedding; using fallback vector")
        return embedder.fallback.copy()
    return v / norm


@dataclass(frozen=True)
class NoiseTransition:
    matrix: np.ndarray
    classes: tuple


def noise_transition(segrep, noisy, classes=None, normalize: bool = True) -> NoiseTransition:
    """``N = S^T S_noisy`` with optional column normalisation (entries become cosines)."""
    S = np.asarray(segrep.data if isinstance(segrep, Tensor) else segrep, dtype=np.float64)
    Sn = np.asarray(noisy.data if isinstance(noisy, Tensor) else noisy, dtype=np.float64)
    if S.shape != Sn.shape:
        raise ValueError(f"segment representation {S.shape} and noisy representation {Sn.shape} differ")
    if normalize:
        S = S / np.maximum(np.linalg.norm(S, axis=0, keepdims=True), 1e-12)
        Sn = Sn / np.maximum(np.linalg.norm(Sn, axis=0, keepdims=True), 1e-12)
    classes = tuple(range(S.shape[1])) if classes is None else tuple(classes)
    # fixed summation order over the feature axis, so results do not depend on the BLAS build
    N = np.zeros((S.shape[1], Sn.shape[1]))
    for t in range(S.shape[0]):
        N += S[t][:, None] * Sn[t][None, :]
    return NoiseTransition(N, classes)


def apply_correction(transition, student_probs, eps: float = CLAMP_EPS) -> tuple[Tensor, int]:
    """Corrected per-pixel distribution and the number of uniform-fallback pixels."""
    N = transition.matrix if isinstance(transition, NoiseTransition) else transition
    return corrected_distribution(N, student_probs, eps)
