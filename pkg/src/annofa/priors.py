"""Global-local shrinkage machinery for the loading matrix.

Loadings get a regularized-horseshoe prior: conditional on a global scale
tau, local scales lambda and fixed slab widths c, each loading is Gaussian
with standard deviation tau * lambda_tilde, where

    lambda_tilde = sqrt(c^2 lambda^2 / (c^2 + tau^2 lambda^2)).

lambda_tilde grows with lambda like the plain horseshoe while the slab caps
the escaped prior scale at c / tau, so tau * lambda_tilde never exceeds c.
Slab widths encode annotation confidence: wide slabs where the mask says
active, narrow slabs elsewhere; dense placeholder factors get wide slabs
everywhere and sparse placeholders narrow slabs everywhere.

Hyperpriors are half-Cauchy: lambda ~ C+(0, 1) and tau ~ C+(0, tau0).
Residual variances get a conjugate inverse-gamma prior with the constants
below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datatypes import AnnotationMask, FactorConfig

# Inverse-gamma prior on per-feature residual variance sigma_g^2.
SIGMA2_PRIOR_SHAPE = 1.0
SIGMA2_PRIOR_RATE = 1.0


def _check_positive_finite(name, *values):
    for v in values:
        arr = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(arr) & (arr > 0)):
            raise ValueError(f"{name}: arguments must be positive and finite")


def regularized_scale(lam, tau, c):
    """Regularized local scale lambda_tilde = sqrt(c^2 l^2 / (c^2 + t^2 l^2)).

    Accepts scalars or broadcastable arrays; all inputs must be positive and
    finite.  Monotone nondecreasing in ``lam`` and in ``c``, and bounded by
    min(lam, c / tau).
    """
    _check_positive_finite("regularized_scale", lam, tau, c)
    lam = np.asarray(lam, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    # log-space form avoids overflow for extreme scales
    log_c, log_p = np.log(c), np.log(tau) + np.log(lam)
    out = np.exp(log_c + np.log(lam) - 0.5 * np.logaddexp(2 * log_c, 2 * log_p))
    return out if out.ndim else float(out)


def slab_widths(mask: AnnotationMask, config: FactorConfig) -> np.ndarray:
    """Per-loading slab widths (G x K) derived from the annotation mask.

    Annotated columns: ``slab_annotated`` where the mask is active,
    ``slab_unannotated`` elsewhere.  Dense columns are wide everywhere,
    sparse columns narrow everywhere, regardless of mask entries.
    """
    counts = mask.kind_counts()
    expected = {
        "annotated": config.n_annotated,
        "sparse": config.n_sparse_unannotated,
        "dense": config.n_dense_unannotated,
    }
    if counts != expected:
        raise ValueError(f"mask kinds {counts} do not match config {expected}")
    slab = np.where(mask.active, config.slab_annotated, config.slab_unannotated)
    for k, kind in enumerate(mask.kinds):
        if kind == "dense":
            slab[:, k] = config.slab_annotated
        elif kind == "sparse":
            slab[:, k] = config.slab_unannotated
    return slab


@dataclass(frozen=True)
class HorseshoeState:
    """One realization of the shrinkage scales: global tau, local lambda,
    fixed slab widths, and the derived regularized scales."""

    tau: float
    lam: np.ndarray
    slab: np.ndarray
    lambda_tilde: np.ndarray = None

    def __post_init__(self):
        tau = float(self.tau)
        lam = np.asarray(self.lam, dtype=np.float64)
        slab = np.asarray(self.slab, dtype=np.float64)
        if lam.shape != slab.shape:
            raise ValueError(f"lam shape {lam.shape} != slab shape {slab.shape}")
        _check_positive_finite("HorseshoeState", tau, lam, slab)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "slab", slab)
        object.__setattr__(self, "lambda_tilde", regularized_scale(lam, tau, slab))


def weight_prior_scale(state: HorseshoeState) -> np.ndarray:
    """Conditional prior standard deviation of each loading, tau * lambda_tilde."""
    return state.tau * state.lambda_tilde


def half_cauchy_log_density(x, scale):
    """Log density of a half-Cauchy C+(0, scale) at x > 0."""
    _check_positive_finite("half_cauchy_log_density", x, scale)
    x = np.asarray(x, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    out = np.log(2.0 / np.pi) - np.log(scale) - np.logaddexp(0.0, 2 * (np.log(x) - np.log(scale)))
    return out if out.ndim else float(out)


def sample_weights_from_prior(state: HorseshoeState, seed) -> np.ndarray:
    """Draw a loading matrix from N(0, (tau * lambda_tilde)^2) elementwise.

    ``seed`` may be an int or a ``numpy.random.Generator``; draws are
    deterministic given the seed.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    return rng.standard_normal(state.lam.shape) * weight_prior_scale(state)
