"""Evaluation: overlap metrics, proxy generation metrics, augmentation and ablation runs."""

from .metrics import FeatureStats, MetricError, alignment_score, dsc, feature_stats, iou, proxy_fid, proxy_is
from .report import Report

__all__ = [
    "FeatureStats", "MetricError", "Report", "alignment_score", "dsc", "feature_stats", "iou",
    "proxy_fid", "proxy_is",
]
