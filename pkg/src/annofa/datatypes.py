"""Core data containers: expression matrices, annotation masks, model output.

Arrays held by these containers are treated as immutable after construction;
operations never write into them.  Constructors enforce shape consistency
(hard errors), while semantic invariants are reported by
:func:`annofa.model.validate`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

FACTOR_KINDS = ("annotated", "sparse", "dense")


def _float_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


def _names(names: Optional[Sequence[str]], n: int, prefix: str, label: str) -> tuple:
    if names is None:
        return tuple(f"{prefix}{i}" for i in range(n))
    names = tuple(str(s) for s in names)
    if len(names) != n:
        raise ValueError(f"{label}: expected {n} names, got {len(names)}")
    return names


@dataclass(frozen=True)
class ExpressionMatrix:
    """Dense samples-by-features observation matrix with an observed mask.

    ``data`` is N x G; ``observed`` marks which entries were measured (missing
    entries carry an arbitrary finite placeholder, by convention 0).
    """

    data: np.ndarray
    observed: Optional[np.ndarray] = None
    sample_names: tuple = ()
    feature_names: tuple = ()

    def __post_init__(self):
        data = _float_matrix(self.data, "data")
        n, g = data.shape
        if n < 1 or g < 1:
            raise ValueError(f"data must be nonempty, got shape {data.shape}")
        if self.observed is None:
            observed = np.ones((n, g), dtype=bool)
        else:
            observed = np.asarray(self.observed, dtype=bool)
            if observed.shape != data.shape:
                raise ValueError(
                    f"observed mask shape {observed.shape} != data shape {data.shape}"
                )
        if not np.all(np.isfinite(data) | ~observed):
            raise ValueError("observed entries must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(
            self, "sample_names", _names(self.sample_names or None, n, "sample-", "sample_names")
        )
        object.__setattr__(
            self, "feature_names", _names(self.feature_names or None, g, "feature-", "feature_names")
        )

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        return self.data.shape[1]

    @property
    def fully_observed(self) -> bool:
        return bool(self.observed.all())

    @classmethod
    def from_array(cls, data, sample_names=None, feature_names=None) -> "ExpressionMatrix":
        """Build from a raw array, treating NaN entries as missing."""
        data = _float_matrix(data, "data")
        observed = np.isfinite(data)
        clean = np.where(observed, data, 0.0)
        return cls(clean, observed, sample_names or (), feature_names or ())


@dataclass(frozen=True)
class FactorConfig:
    """Factor counts and shrinkage hyperparameters.

    The total number of latent factors is ``n_annotated`` plus the sparse and
    dense unannotated placeholder counts.  Slab widths bound how far a
    loading's prior scale can escape the global shrinkage: wide
    (``slab_annotated``, around 1) for entries flagged by the annotations,
    narrow (``slab_unannotated``, below 0.1) for everything else.  ``tau0``
    is the scale of the half-Cauchy hyperprior on the global shrinkage.
    """

    n_annotated: int
    n_sparse_unannotated: int = 0
    n_dense_unannotated: int = 0
    slab_annotated: float = 1.0
    slab_unannotated: float = 0.05
    tau0: float = 0.1

    def __post_init__(self):
        counts = (self.n_annotated, self.n_sparse_unannotated, self.n_dense_unannotated)
        if any(c < 0 for c in counts):
            raise ValueError(f"factor counts must be nonnegative, got {counts}")
        if self.n_factors < 1:
            raise ValueError("need at least one factor")
        if not (0.0 < self.slab_unannotated < 0.1 <= self.slab_annotated):
            raise ValueError(
                "slab widths must satisfy 0 < slab_unannotated < 0.1 <= slab_annotated, "
                f"got {self.slab_unannotated} / {self.slab_annotated}"
            )
        if not (np.isfinite(self.tau0) and self.tau0 > 0):
            raise ValueError(f"tau0 must be positive, got {self.tau0}")

    @property
    def n_factors(self) -> int:
        return self.n_annotated + self.n_sparse_unannotated + self.n_dense_unannotated

    @classmethod
    def for_mask(cls, mask: "AnnotationMask", **kwargs) -> "FactorConfig":
        """Config whose factor counts match the kinds of ``mask``."""
        kinds = mask.kinds
        return cls(
            n_annotated=kinds.count("annotated"),
            n_sparse_unannotated=kinds.count("sparse"),
            n_dense_unannotated=kinds.count("dense"),
            **kwargs,
        )


@dataclass(frozen=True)
class AnnotationMask:
    """Boolean features-by-factors matrix of prior active/inactive signals.

    Each column carries a kind: ``annotated`` columns come from a gene set,
    ``sparse`` columns are all-inactive placeholders for unknown sparse
    structure, ``dense`` columns are all-active placeholders for global
    (e.g. technical) effects.
    """

    active: np.ndarray
    kinds: tuple
    factor_names: tuple = ()

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        if active.ndim != 2:
            raise ValueError(f"active must be 2-d, got shape {active.shape}")
        kinds = tuple(self.kinds)
        if len(kinds) != active.shape[1]:
            raise ValueError(
                f"{len(kinds)} kinds for {active.shape[1]} mask columns"
            )
        bad = sorted({k for k in kinds if k not in FACTOR_KINDS})
        if bad:
            raise ValueError(f"unknown factor kinds {bad}; expected one of {FACTOR_KINDS}")
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(
            self,
            "factor_names",
            _names(self.factor_names or None, len(kinds), "factor-", "factor_names"),
        )

    @property
    def n_features(self) -> int:
        return self.active.shape[0]

    @property
    def n_factors(self) -> int:
        return self.active.shape[1]

    @property
    def annotated_columns(self) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.kinds) if k == "annotated"], dtype=int)

    def kind_counts(self) -> dict:
        return {k: self.kinds.count(k) for k in FACTOR_KINDS}

    @classmethod
    def from_active(cls, active, factor_names=None) -> "AnnotationMask":
        """Wrap a boolean matrix as all-annotated factors."""
        active = np.asarray(active, dtype=bool)
        return cls(active, ("annotated",) * active.shape[1], factor_names or ())

    def extended(self, n_sparse: int = 0, n_dense: int = 0) -> "AnnotationMask":
        """Append unannotated placeholder columns (sparse all-false, dense all-true)."""
        if n_sparse < 0 or n_dense < 0:
            raise ValueError("placeholder counts must be nonnegative")
        g = self.n_features
        cols = [self.active]
        cols.append(np.zeros((g, n_sparse), dtype=bool))
        cols.append(np.ones((g, n_dense), dtype=bool))
        kinds = self.kinds + ("sparse",) * n_sparse + ("dense",) * n_dense
        names = self.factor_names
        names += tuple(f"sparse-{i}" for i in range(n_sparse))
        names += tuple(f"dense-{i}" for i in range(n_dense))
        return AnnotationMask(np.hstack(cols), kinds, names)


@dataclass(frozen=True)
class TrainingTrace:
    """Per-checkpoint training history.

    ``elbo`` holds the running mean of the mini-batch objective since the
    previous checkpoint.  ``seconds`` (wall clock, not serialized) and ``f1``
    (only when a ground-truth mask was supplied to ``fit``) align with
    ``iterations``.
    """

    iterations: tuple = ()
    elbo: tuple = ()
    seconds: tuple = ()
    f1: Optional[tuple] = None

    def __post_init__(self):
        iters = tuple(int(i) for i in self.iterations)
        if any(b <= a for a, b in zip(iters, iters[1:])):
            raise ValueError("checkpoint iterations must be strictly increasing")
        elbo = tuple(float(v) for v in self.elbo)
        seconds = tuple(float(v) for v in self.seconds)
        if len(elbo) != len(iters) or len(seconds) != len(iters):
            raise ValueError("trace columns must have equal length")
        f1 = self.f1
        if f1 is not None:
            f1 = tuple(float(v) for v in f1)
            if len(f1) != len(iters):
                raise ValueError("trace columns must have equal length")
        object.__setattr__(self, "iterations", iters)
        object.__setattr__(self, "elbo", elbo)
        object.__setattr__(self, "seconds", seconds)
        object.__setattr__(self, "f1", f1)

    def __len__(self) -> int:
        return len(self.iterations)


@dataclass(frozen=True)
class TrainedModel:
    """Posterior summaries of a fitted factor model.

    ``w_mean``/``w_scale`` summarize the loadings (G x K), ``x_mean``/
    ``x_scale`` the factor states (N x K), ``sigma2`` the per-feature
    residual variances.  Summaries are plug-in values of the mean-field
    posterior: locations for means, location-scale propagation for scales
    (positive quantities are summarized at their posterior median).
    """

    w_mean: np.ndarray
    w_scale: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    sigma2: np.ndarray
    config: FactorConfig
    mask: AnnotationMask
    trace: TrainingTrace = field(default_factory=TrainingTrace)

    def __post_init__(self):
        w_mean = _float_matrix(self.w_mean, "w_mean")
        w_scale = _float_matrix(self.w_scale, "w_scale")
        x_mean = _float_matrix(self.x_mean, "x_mean")
        x_scale = _float_matrix(self.x_scale, "x_scale")
        sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        g, k = w_mean.shape
        if sigma2.shape != (g,):
            raise ValueError(f"sigma2 shape {sigma2.shape} != ({g},)")
        if w_scale.shape != (g, k):
            raise ValueError(f"w_scale shape {w_scale.shape} != w_mean shape {(g, k)}")
        if x_mean.shape[1] != k or x_scale.shape != x_mean.shape:
            raise ValueError(
                f"factor-state shapes {x_mean.shape}/{x_scale.shape} inconsistent with K={k}"
            )
        if self.mask.n_features != g or self.mask.n_factors != k:
            raise ValueError(
                f"mask shape {(self.mask.n_features, self.mask.n_factors)} != loadings shape {(g, k)}"
            )
        if self.config.n_factors != k:
            raise ValueError(f"config declares {self.config.n_factors} factors, loadings have {k}")
        for name, arr in (
            ("w_mean", w_mean), ("w_scale", w_scale), ("x_mean", x_mean),
            ("x_scale", x_scale), ("sigma2", sigma2),
        ):
            object.__setattr__(self, name, arr)

    @property
    def n_samples(self) -> int:
        return self.x_mean.shape[0]

    @property
    def n_features(self) -> int:
        return self.w_mean.shape[0]

    @property
    def n_factors(self) -> int:
        return self.w_mean.shape[1]
