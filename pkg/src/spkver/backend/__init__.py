"""Scoring back-end: cosine scoring, AS-Norm, QMF calibration, fusion and metrics."""

from .metrics import compute_eer, compute_min_dcf
from .scoring import asnorm_score, build_cohort, cosine_score, fuse_scores

__all__ = ["compute_eer", "compute_min_dcf", "asnorm_score", "build_cohort", "cosine_score",
           "fuse_scores"]
