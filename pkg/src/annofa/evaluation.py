"""Metrics and analyses for fitted models: mask-recovery F1, per-factor
variance explained, relevance ranking, AUROC, factor matching, and
annotation refinement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .datatypes import AnnotationMask, ExpressionMatrix, TrainedModel
from .model import reconstruct


class MaskF1(NamedTuple):
    per_factor: np.ndarray
    overall: float


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2.0 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def mask_f1(truth: AnnotationMask, w: np.ndarray, threshold: float) -> MaskF1:
    """F1 of thresholded loadings against true activity, per factor and
    pooled (micro-averaged) over all entries.

    Predicted-active is |w| > threshold; F1 is 0 when there are neither
    predicted nor true actives.
    """
    w = np.asarray(w, dtype=np.float64)
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if w.shape != truth.active.shape:
        raise ValueError(f"loadings shape {w.shape} != mask shape {truth.active.shape}")
    pred = np.abs(w) > threshold
    true = truth.active
    tp = (pred & true).sum(axis=0).astype(np.float64)
    fp = (pred & ~true).sum(axis=0).astype(np.float64)
    fn = (~pred & true).sum(axis=0).astype(np.float64)
    per_factor = np.array([_f1(*t) for t in zip(tp, fp, fn)])
    overall = _f1(tp.sum(), fp.sum(), fn.sum())
    return MaskF1(per_factor, overall)


def factor_r2(y: ExpressionMatrix, model: TrainedModel, k: int) -> float:
    """Variance explained by factor k alone: 1 - |Y - x_k w_k^T|^2 / |Y|^2
    over observed entries, using posterior means."""
    if not 0 <= k < model.n_factors:
        raise IndexError(f"factor index {k} out of range for K={model.n_factors}")
    recon_k = np.outer(model.x_mean[:, k], model.w_mean[:, k])
    if y.fully_observed:
        total = float(np.sum(y.data * y.data))
        resid = y.data - recon_k
    else:
        total = float(np.sum(np.where(y.observed, y.data, 0.0) ** 2))
        resid = np.where(y.observed, y.data - recon_k, 0.0)
    if total == 0.0:
        raise ValueError("cannot compute variance explained on all-missing or all-zero data")
    return 1.0 - float(np.sum(resid * resid)) / total


@dataclass(frozen=True)
class FactorReport:
    """Per-factor relevance summary used for ranking tables."""

    name: str
    kind: str
    index: int
    r2: float
    n_active: int
    top_weights: tuple  # ((feature name, signed weight), ...) by |weight| desc


def rank_factors(y: ExpressionMatrix, model: TrainedModel, top_n: Optional[int] = None,
                 threshold: float = 0.1, n_top_weights: int = 10) -> list:
    """Factors sorted by variance explained (descending, ties by index).

    ``top_n`` limits the returned list; each report carries the factor's
    strongest loadings for inspection.
    """
    k_total = model.n_factors
    if top_n is None:
        top_n = k_total
    if top_n > k_total:
        raise ValueError(f"top_n={top_n} exceeds K={k_total}")
    r2 = np.array([factor_r2(y, model, k) for k in range(k_total)])
    order = np.lexsort((np.arange(k_total), -r2))
    reports = []
    for k in order[:top_n]:
        w = model.w_mean[:, k]
        strongest = np.argsort(-np.abs(w))[:n_top_weights]
        reports.append(FactorReport(
            name=model.mask.factor_names[k],
            kind=model.mask.kinds[k],
            index=int(k),
            r2=float(r2[k]),
            n_active=int(np.count_nonzero(np.abs(w) > threshold)),
            top_weights=tuple((y.feature_names[g], float(w[g])) for g in strongest),
        ))
    return reports


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties 1/2).

    Computed by the rank-sum formulation, which matches the all-pairs count
    exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined without both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _column_correlations(w_true: np.ndarray, w_learned: np.ndarray) -> np.ndarray:
    """|Pearson correlation| between all column pairs; constant columns -> 0."""
    a = w_true - w_true.mean(axis=0)
    b = w_learned - w_learned.mean(axis=0)
    sa = np.sqrt((a * a).sum(axis=0))
    sb = np.sqrt((b * b).sum(axis=0))
    num = np.abs(a.T @ b)
    denom = np.outer(sa, sb)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, num / denom, 0.0)
    return corr


def match_factors(w_true: np.ndarray, w_learned: np.ndarray) -> list:
    """Optimal one-to-one factor assignment maximizing total |correlation|.

    Returns (true index, learned index, |corr|) triples sorted by true
    index.  Requires at least as many learned as true factors; solved
    exactly by the assignment algorithm.
    """
    w_true = np.asarray(w_true, dtype=np.float64)
    w_learned = np.asarray(w_learned, dtype=np.float64)
    if w_true.shape[0] != w_learned.shape[0]:
        raise ValueError(
            f"feature dimensions differ: {w_true.shape[0]} vs {w_learned.shape[0]}"
        )
    if w_true.shape[1] > w_learned.shape[1]:
        raise ValueError("need at least as many learned factors as true factors")
    corr = _column_correlations(w_true, w_learned)
    rows, cols = linear_sum_assignment(-corr)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return [(i, j, float(corr[i, j])) for i, j in pairs]


def refined_annotations(model: TrainedModel, threshold: float = 0.1) -> list:
    """Data-driven mask edits per factor: feature indices that became active
    (added) or fell inactive (removed) relative to the prior annotations."""
    out = []
    active = np.abs(model.w_mean) > threshold
    for k in range(model.n_factors):
        prior = model.mask.active[:, k]
        learned = active[:, k]
        out.append({
            "added": frozenset(np.flatnonzero(learned & ~prior).tolist()),
            "removed": frozenset(np.flatnonzero(prior & ~learned).tolist()),
        })
    return out


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average used for trajectory monotonicity checks."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be at least 1")
    if values.size == 0:
        return values
    cum = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty_like(values)
    for i in range(values.size):
        lo = max(0, i - window + 1)
        out[i] = (cum[i + 1] - cum[lo]) / (i + 1 - lo)
    return out
