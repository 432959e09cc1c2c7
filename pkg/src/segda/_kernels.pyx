# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for 3x3 convolution and confusion counting.

Every routine mirrors a function in ``segda.kernels`` and must produce
bit-identical results: the per-element summation order in ``col2im3x3``
follows the same (ki, kj) order as the numpy fallback.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3x3(const double[:, :, :, ::1] x, int stride):
    """Unfold (B, C, H, W) into (B, C, 3, 3, Ho, Wo) with zero padding 1."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H - 1) // stride + 1
    cdef Py_ssize_t Wo = (W - 1) // stride + 1
    out = np.zeros((B, C, 3, 3, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] o = out
    cdef Py_ssize_t b, c, ki, kj, yo, xo, y0, y1, x0, x1, off
    for b in range(B):
        for c in range(C):
            for ki in range(3):
                y0 = 1 if ki == 0 else 0
                y1 = min(Ho, (H - ki) // stride + 1)
                for kj in range(3):
                    x0 = 1 if kj == 0 else 0
                    x1 = min(Wo, (W - kj) // stride + 1)
                    for yo in range(y0, y1):
                        off = yo * stride + ki - 1
                        for xo in range(x0, x1):
                            o[b, c, ki, kj, yo, xo] = x[b, c, off, xo * stride + kj - 1]
    return out


def col2im3x3(const double[:, :, :, :, :, ::1] cols, Py_ssize_t H, Py_ssize_t W, int stride):
    """Adjoint of ``im2col3x3``: scatter-add columns back to (B, C, H, W)."""
    cdef Py_ssize_t B = cols.shape[0], C = cols.shape[1]
    cdef Py_ssize_t Ho = cols.shape[4], Wo = cols.shape[5]
    out = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, ki, kj, yo, xo, y0, y1, x0, x1, off
    for b in range(B):
        for c in range(C):
            for ki in range(3):
                y0 = 1 if ki == 0 else 0
                y1 = min(Ho, (H - ki) // stride + 1)
                for kj in range(3):
                    x0 = 1 if kj == 0 else 0
                    x1 = min(Wo, (W - kj) // stride + 1)
                    for yo in range(y0, y1):
                        off = yo * stride + ki - 1
                        for xo in range(x0, x1):
                            o[b, c, off, xo * stride + kj - 1] += cols[b, c, ki, kj, yo, xo]
    return out


def confusion_counts(const long[::1] truth, const long[::1] pred, Py_ssize_t num_classes):
    """Dense (num_classes, num_classes) count matrix; rows are ground truth."""
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef Py_ssize_t i, n = truth.shape[0]
    for i in range(n):
        o[truth[i], pred[i]] += 1
    return out
