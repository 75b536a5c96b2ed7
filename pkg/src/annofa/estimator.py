"""Scikit-learn style estimator wrapping the factor model.

``AnnotatedFactorAnalysis`` follows the fit/transform contract so the model
composes with pipelines and model selection utilities; the full posterior
lives in ``model_`` for the package's evaluation and io tooling.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import inference
from .datatypes import FactorConfig, TrainedModel
from .validation import check_annotation_mask, check_expression_matrix, check_seed


class AnnotatedFactorAnalysis(BaseEstimator, TransformerMixin):
    """Annotation-guided sparse factor analysis.

    Decomposes a samples-by-features matrix into latent factors whose
    loadings carry a regularized-horseshoe prior with slab widths set from
    ``mask``: wide slabs where the annotations say active, narrow slabs
    elsewhere.  Unannotated placeholder factors (``n_sparse`` narrow
    everywhere, ``n_dense`` wide everywhere) absorb unknown sparse structure
    and global technical effects.

    Parameters
    ----------
    mask : AnnotationMask, bool array of shape (n_features, n_annotated), or None
        Prior activity pattern.  A plain boolean array is treated as
        annotated columns with ``n_sparse``/``n_dense`` placeholders
        appended; a full AnnotationMask is used verbatim.
    n_sparse, n_dense : int
        Unannotated placeholder factor counts (ignored when ``mask`` is an
        AnnotationMask).
    slab_annotated, slab_unannotated : float
        Slab widths for annotated/unannotated loading entries.
    tau0 : float
        Scale of the half-Cauchy hyperprior on the global shrinkage.
    max_iters, batch_size, learning_rate, n_mc, checkpoint_every, lr_decay :
        Training options, see :class:`annofa.inference.TrainOptions`.
    active_threshold : float
        |loading| threshold used to report active features.
    random_state : int
        Seed for initialization, Monte Carlo draws and batching; fits are
        deterministic given the seed.

    Attributes
    ----------
    model_ : TrainedModel posterior summaries.
    components_ : (n_factors, n_features) posterior-mean loadings.
    noise_variance_ : (n_features,) residual variances.
    factor_names_, factor_kinds_ : per-factor labels.
    n_iter_ : iterations actually run.
    """

    def __init__(self, mask=None, n_sparse: int = 0, n_dense: int = 0,
                 slab_annotated: float = 1.0, slab_unannotated: float = 0.05,
                 tau0: float = 0.1, max_iters: int = 20_000,
                 batch_size: Optional[int] = None, learning_rate: float = 0.01,
                 n_mc: int = 1, checkpoint_every: int = 50, lr_decay: bool = False,
                 active_threshold: float = 0.1, random_state: int = 0):
        self.mask = mask
        self.n_sparse = n_sparse
        self.n_dense = n_dense
        self.slab_annotated = slab_annotated
        self.slab_unannotated = slab_unannotated
        self.tau0 = tau0
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.n_mc = n_mc
        self.checkpoint_every = checkpoint_every
        self.lr_decay = lr_decay
        self.active_threshold = active_threshold
        self.random_state = random_state

    def fit(self, X, y=None, truth_mask=None):
        """Fit the model to X (NaN entries are treated as missing)."""
        data = check_expression_matrix(X)
        mask = check_annotation_mask(self.mask, data.n_features, self.n_sparse, self.n_dense)
        config = FactorConfig.for_mask(
            mask,
            slab_annotated=self.slab_annotated,
            slab_unannotated=self.slab_unannotated,
            tau0=self.tau0,
        )
        options = inference.TrainOptions(
            max_iters=self.max_iters,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            n_mc=self.n_mc,
            seed=check_seed(self.random_state),
            checkpoint_every=self.checkpoint_every,
            lr_decay=self.lr_decay,
            active_threshold=self.active_threshold,
            truth_mask=truth_mask,
        )
        self.model_ = inference.fit(data, mask, config, options)
        self.components_ = self.model_.w_mean.T
        self.noise_variance_ = self.model_.sigma2
        self.factor_names_ = self.model_.mask.factor_names
        self.factor_kinds_ = self.model_.mask.kinds
        self.n_iter_ = self.model_.trace.iterations[-1] if len(self.model_.trace) else 0
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise AttributeError("this estimator is not fitted yet; call fit first")

    def transform(self, X) -> np.ndarray:
        """Posterior-mean factor scores for new samples.

        Given the fitted loadings W and residual variances, the conditional
        posterior of a sample's factor state is Gaussian; this returns its
        mean, handling missing entries per sample.
        """
        self._check_fitted()
        data = check_expression_matrix(X)
        model = self.model_
        if data.n_features != model.n_features:
            raise ValueError(
                f"X has {data.n_features} features, model was fit on {model.n_features}"
            )
        w = model.w_mean
        prec = 1.0 / model.sigma2
        k = model.n_factors
        if data.fully_observed:
            a = (w * prec[:, None]).T @ w + np.eye(k)
            b = data.data @ (w * prec[:, None])
            return np.linalg.solve(a, b.T).T
        scores = np.empty((data.n_samples, k))
        for i in range(data.n_samples):
            obs = data.observed[i]
            wo = w[obs]
            po = prec[obs]
            a = (wo * po[:, None]).T @ wo + np.eye(k)
            b = (wo * po[:, None]).T @ data.data[i, obs]
            scores[i] = np.linalg.solve(a, b)
        return scores

    def inverse_transform(self, scores) -> np.ndarray:
        """Reconstruction scores @ W^T."""
        self._check_fitted()
        return np.asarray(scores, dtype=np.float64) @ self.model_.w_mean.T

    def score(self, X, y=None) -> float:
        """Mean per-observed-entry Gaussian log-likelihood at the posterior
        means (factor scores inferred by :meth:`transform`)."""
        self._check_fitted()
        data = check_expression_matrix(X)
        recon = self.inverse_transform(self.transform(data))
        sigma2 = self.model_.sigma2
        ll = -0.5 * (np.log(2 * np.pi * sigma2) + (data.data - recon) ** 2 / sigma2)
        if data.fully_observed:
            return float(ll.mean())
        return float(ll[data.observed].mean())

    def get_feature_names_out(self, input_features=None) -> np.ndarray:
        self._check_fitted()
        return np.asarray(self.factor_names_, dtype=object)
