"""Overlap metrics, Frechet distance and inception-style score on proxy features."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..corpus import CorpusConfig, PairedSample, oracle_segment

NEG_EIG_TOL = 1e-6


class MetricError(ValueError):
    pass


def _sets(a, b, cls: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"label maps have different shapes {a.shape} and {b.shape}")
    return a == cls, b == cls


def dsc(a, b, cls: int = 1) -> float:
    """Dice overlap of the class-``cls`` pixels; 1.0 when both sets are empty."""
    A, B = _sets(a, b, cls)
    denom = int(A.sum()) + int(B.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((A & B).sum()) / denom


def iou(a, b, cls: int = 1) -> float:
    A, B = _sets(a, b, cls)
    union = int((A | B).sum())
    if union == 0:
        return 1.0
    return int((A & B).sum()) / union


def alignment_score(pair: PairedSample, cfg: CorpusConfig = CorpusConfig()) -> float:
    """Dice between the oracle segmentation of the image and the paired mask.

    With more than one foreground class the per-class scores are averaged.
    """
    seg = oracle_segment(pair.image, cfg)
    return float(np.mean([dsc(seg, pair.mask, k) for k in range(1, cfg.num_classes)]))


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise MetricError(f"covariance shape {self.sigma.shape} does not match mean dim {d}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-8, rtol=0):
            raise MetricError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def feature_stats(features: np.ndarray) -> FeatureStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise MetricError(f"need a (n >= 2, d) feature matrix, got shape {f.shape}")
    n, d = f.shape
    if n < d + 1:
        warnings.warn(f"only {n} samples for {d}-dim features; covariance is rank deficient", stacklevel=2)
    sigma = np.cov(f, rowvar=False)
    return FeatureStats(f.mean(axis=0), 0.5 * (sigma + sigma.T), n)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < -NEG_EIG_TOL:
        raise MetricError(f"{what} has eigenvalue {vals.min():.3g}; not positive semidefinite")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def proxy_fid(real: FeatureStats, gen: FeatureStats) -> float:
    """Frechet distance between two Gaussians fitted to feature sets.

    The cross term uses tr((Sr Sg)^1/2) = tr((Sr^1/2 Sg Sr^1/2)^1/2), whose
    argument is symmetric, so both roots come from ``eigh``.
    """
    if real.dim != gen.dim:
        raise MetricError(f"feature dims differ: {real.dim} vs {gen.dim}")
    for s in (real, gen):
        if not (np.isfinite(s.mu).all() and np.isfinite(s.sigma).all()):
            raise MetricError("feature statistics contain NaN or inf")
    root_r = _psd_sqrt(real.sigma, "real covariance")
    cross = _psd_sqrt(root_r @ gen.sigma @ root_r, "covariance product")
    diff = real.mu - gen.mu
    value = float(diff @ diff + np.trace(real.sigma) + np.trace(gen.sigma) - 2.0 * np.trace(cross))
    return value


def proxy_is(probs: np.ndarray) -> float:
    """exp of the mean KL divergence between each row and the marginal; 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise MetricError(f"need a non-empty (n, k) probability matrix, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any():
        raise MetricError("probability rows must be finite and nonnegative")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise MetricError("probability rows must sum to 1")
    marg = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marg)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))
