"""Desk-scale domain adaptation for semantic segmentation.

A fixed simplex classifier, class-query segment decoding and
noise-corrected pseudo labels, built on a small numpy autodiff core.
"""
from .autograd import Parameter, Tensor, backprop, finite_diff_check
from .etf import ClassMemory, EtfClassifier, dr_loss, make_etf, nc_metrics, verify_etf
from .kernels import BACKEND
from .pipeline import ExperimentConfig, adapt_target, evaluate, run_ablation, train_source

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ClassMemory", "EtfClassifier", "ExperimentConfig", "Parameter", "Tensor",
    "adapt_target", "backprop", "dr_loss", "evaluate", "finite_diff_check", "make_etf",
    "nc_metrics", "run_ablation", "train_source", "verify_etf",
]
