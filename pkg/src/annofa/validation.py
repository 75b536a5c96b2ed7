"""Input coercion helpers shared by the estimator, CLI, and inference entry
points."""

from __future__ import annotations

import numpy as np

from .datatypes import AnnotationMask, ExpressionMatrix, FactorConfig


def check_expression_matrix(X) -> ExpressionMatrix:
    """Coerce raw input to an :class:`ExpressionMatrix`.

    Arrays (or anything array-like) are accepted with NaN marking missing
    entries; existing ExpressionMatrix instances pass through.
    """
    if isinstance(X, ExpressionMatrix):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d samples-by-features matrix, got shape {arr.shape}")
    if np.isinf(arr).any():
        raise ValueError("input contains infinite values; use NaN for missing entries")
    if np.isnan(arr).any():
        return ExpressionMatrix.from_array(arr)
    return ExpressionMatrix(arr)


def check_annotation_mask(mask, n_features: int, n_sparse: int = 0, n_dense: int = 0) -> AnnotationMask:
    """Coerce ``mask`` to an :class:`AnnotationMask` aligned with the data.

    A boolean array is wrapped as all-annotated columns; ``None`` yields a
    mask with placeholder factors only.  ``n_sparse``/``n_dense`` placeholder
    columns are appended unless ``mask`` is already an AnnotationMask (which
    fixes its own kinds).
    """
    if isinstance(mask, AnnotationMask):
        out = mask
    elif mask is None:
        out = AnnotationMask.from_active(np.zeros((n_features, 0), dtype=bool)).extended(
            n_sparse, n_dense
        )
    else:
        arr = np.asarray(mask)
        if arr.ndim != 2:
            raise ValueError(f"annotation mask must be 2-d, got shape {arr.shape}")
        out = AnnotationMask.from_active(arr != 0).extended(n_sparse, n_dense)
    if out.n_features != n_features:
        raise ValueError(
            f"annotation mask has {out.n_features} features, data has {n_features}"
        )
    if out.n_factors < 1:
        raise ValueError("model needs at least one factor (mask columns or placeholders)")
    return out


def check_seed(seed) -> int:
    if seed is None:
        return 0
    out = int(seed)
    if out < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    return out
