"""Hot kernels with a compiled backend and a pure numpy fallback.

The backend is chosen once at import. Set ``SEGDA_PURE_PYTHON=1`` to force
the numpy path (useful for benchmarking and for checking that both paths
agree bit for bit).
"""
from __future__ import annotations

import os

import numpy as np


def _im2col3x3_numpy(x: np.ndarray, stride: int) -> np.ndarray:
    B, C, H, W = x.shape
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, Ho, Wo), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
    return cols


def _col2im3x3_numpy(cols: np.ndarray, H: int, W: int, stride: int) -> np.ndarray:
    B, C, _, _, Ho, Wo = cols.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            xp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += cols[:, :, ki, kj]
    return np.ascontiguousarray(xp[:, :, 1:H + 1, 1:W + 1])


def _confusion_counts_numpy(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    flat = truth * num_classes + pred
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


BACKEND = "numpy"
_ext = None
if not os.environ.get("SEGDA_PURE_PYTHON"):
    try:
        from . import _kernels as _ext  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _ext = None


def im2col3x3(x: np.ndarray, stride: int) -> np.ndarray:
    """Unfold ``(B, C, H, W)`` into ``(B, C, 3, 3, Ho, Wo)`` patches (zero pad 1)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _ext is not None:
        return _ext.im2col3x3(x, int(stride))
    return _im2col3x3_numpy(x, stride)


def col2im3x3(cols: np.ndarray, H: int, W: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`."""
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if _ext is not None:
        return _ext.col2im3x3(cols, int(H), int(W), int(stride))
    return _col2im3x3_numpy(cols, H, W, stride)


def confusion_counts(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Count matrix with ground truth on rows and predictions on columns."""
    truth = np.ascontiguousarray(truth, dtype=np.int64).ravel()
    pred = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"truth and prediction sizes differ: {truth.shape} vs {pred.shape}")
    if truth.size and (min(truth.min(), pred.min()) < 0 or max(truth.max(), pred.max()) >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    if _ext is not None:
        return _ext.confusion_counts(truth, pred, int(num_classes))
    return _confusion_counts_numpy(truth, pred, num_classes)
