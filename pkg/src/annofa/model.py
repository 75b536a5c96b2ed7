"""Reconstruction, residuals, imputation, and invariant checking."""

from __future__ import annotations

import numpy as np

from .datatypes import AnnotationMask, ExpressionMatrix, TrainedModel


def reconstruct(model: TrainedModel) -> np.ndarray:
    """Posterior-mean reconstruction x_mean @ w_mean.T (N x G), noise excluded."""
    return model.x_mean @ model.w_mean.T


def _check_dims(model: TrainedModel, y: ExpressionMatrix):
    if (y.n_samples, y.n_features) != (model.n_samples, model.n_features):
        raise ValueError(
            f"data shape {(y.n_samples, y.n_features)} != model shape "
            f"{(model.n_samples, model.n_features)}"
        )


def residuals(model: TrainedModel, y: ExpressionMatrix) -> np.ndarray:
    """Observed-entry residuals y - reconstruction; missing entries are zero."""
    _check_dims(model, y)
    r = y.data - reconstruct(model)
    if not y.fully_observed:
        r = np.where(y.observed, r, 0.0)
    return r


def impute(model: TrainedModel, y: ExpressionMatrix) -> ExpressionMatrix:
    """Fill missing entries with the posterior-mean reconstruction.

    Observed entries pass through unchanged; the returned matrix is fully
    observed.  Idempotent: imputing an already-complete matrix is a no-op.
    """
    _check_dims(model, y)
    if y.fully_observed:
        filled = y.data
    else:
        filled = np.where(y.observed, y.data, reconstruct(model))
    return ExpressionMatrix(filled, None, y.sample_names, y.feature_names)


def _validate_matrix(y: ExpressionMatrix) -> list:
    problems = []
    bad = ~np.isfinite(y.data) & y.observed
    if bad.any():
        i, g = np.argwhere(bad)[0]
        problems.append(f"data: nonfinite observed entry at ({i}, {g})")
    return problems


def _validate_mask(mask: AnnotationMask) -> list:
    problems = []
    for k, kind in enumerate(mask.kinds):
        col = mask.active[:, k]
        if kind == "dense" and not col.all():
            problems.append(f"mask column {k} ({mask.factor_names[k]}): dense kind but not all-active")
        elif kind == "sparse" and col.any():
            problems.append(f"mask column {k} ({mask.factor_names[k]}): sparse kind but has active entries")
        elif kind == "annotated" and not col.any():
            problems.append(f"mask column {k} ({mask.factor_names[k]}): annotated kind but empty")
    return problems


def _validate_model(model: TrainedModel) -> list:
    problems = []
    bad = np.flatnonzero(~(model.sigma2 > 0) | ~np.isfinite(model.sigma2))
    for g in bad[:5]:
        problems.append(f"sigma2[{g}] = {model.sigma2[g]} is not strictly positive")
    for name in ("w_scale", "x_scale"):
        arr = getattr(model, name)
        bad = np.argwhere(~(arr > 0) | ~np.isfinite(arr))
        for idx in bad[:5]:
            problems.append(f"{name}[{idx[0]}, {idx[1]}] = {arr[tuple(idx)]} is not strictly positive")
    for name in ("w_mean", "x_mean"):
        arr = getattr(model, name)
        if not np.isfinite(arr).all():
            idx = np.argwhere(~np.isfinite(arr))[0]
            problems.append(f"{name}[{idx[0]}, {idx[1]}] is not finite")
    problems.extend(_validate_mask(model.mask))
    return problems


def validate(obj) -> list:
    """Diagnostic invariant sweep; returns all violations with their location.

    Accepts an :class:`ExpressionMatrix`, :class:`AnnotationMask`, or
    :class:`TrainedModel`.  An empty list means the object is well formed.
    """
    if isinstance(obj, TrainedModel):
        return _validate_model(obj)
    if isinstance(obj, AnnotationMask):
        return _validate_mask(obj)
    if isinstance(obj, ExpressionMatrix):
        return _validate_matrix(obj)
    raise TypeError(f"cannot validate object of type {type(obj).__name__}")
