"""Stochastic variational inference for the annotated factor model.

The variational family is fully factorized Gaussians over unconstrained
parameterizations: raw weights z (loadings are w = z * tau * lambda_tilde),
factor states x, and the logs of sigma^2, tau, and lambda.  The ELBO is
estimated by the reparameterization trick with analytic Gaussian-Gaussian KL
terms for the z and x blocks and Monte Carlo prior terms for the log-scale
blocks; gradients are the exact derivatives of that estimator, so estimates
and gradients computed with the same seed correspond to one differentiable
draw.  Mini-batches subsample rows; the likelihood and the x-block terms are
rescaled by N / batch_size, and only batch rows' x-parameters receive
gradients.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit, gammaln

from .datatypes import (
    AnnotationMask,
    ExpressionMatrix,
    FactorConfig,
    TrainedModel,
    TrainingTrace,
)
from .priors import SIGMA2_PRIOR_RATE, SIGMA2_PRIOR_SHAPE, slab_widths
from .validation import check_expression_matrix

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2PIE = LOG_2PI + 1.0
DEFAULT_FULL_BATCH_THRESHOLD = 10_000

_PARAM_KEYS = (
    "z_loc", "z_log_scale",
    "x_loc", "x_log_scale",
    "log_sigma2_loc", "log_sigma2_log_scale",
    "log_tau_loc", "log_tau_log_scale",
    "log_lambda_loc", "log_lambda_log_scale",
)


@dataclass(frozen=True)
class VariationalPosterior:
    """Mean-field Gaussian parameters (location, log scale) per latent block."""

    z_loc: np.ndarray
    z_log_scale: np.ndarray
    x_loc: np.ndarray
    x_log_scale: np.ndarray
    log_sigma2_loc: np.ndarray
    log_sigma2_log_scale: np.ndarray
    log_tau_loc: np.ndarray
    log_tau_log_scale: np.ndarray
    log_lambda_loc: np.ndarray
    log_lambda_log_scale: np.ndarray

    def __post_init__(self):
        for key in _PARAM_KEYS:
            object.__setattr__(self, key, np.asarray(getattr(self, key), dtype=np.float64))
        g, k = self.z_loc.shape
        n = self.x_loc.shape[0]
        expected = {
            "z_loc": (g, k), "z_log_scale": (g, k),
            "x_loc": (n, k), "x_log_scale": (n, k),
            "log_sigma2_loc": (g,), "log_sigma2_log_scale": (g,),
            "log_tau_loc": (), "log_tau_log_scale": (),
            "log_lambda_loc": (g, k), "log_lambda_log_scale": (g, k),
        }
        for key, shape in expected.items():
            arr = getattr(self, key)
            if arr.shape != shape:
                raise ValueError(f"{key}: expected shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{key}: entries must be finite")

    @property
    def n_samples(self) -> int:
        return self.x_loc.shape[0]

    @property
    def n_features(self) -> int:
        return self.z_loc.shape[0]

    @property
    def n_factors(self) -> int:
        return self.z_loc.shape[1]

    def as_dict(self) -> dict:
        return {key: getattr(self, key) for key in _PARAM_KEYS}

    @classmethod
    def from_dict(cls, params: dict) -> "VariationalPosterior":
        return cls(**{key: params[key] for key in _PARAM_KEYS})


def init_posterior(y, mask: AnnotationMask, config: FactorConfig, seed) -> VariationalPosterior:
    """Fresh posterior: locations ~ N(0, 0.1^2), all log scales log(0.1)."""
    y = check_expression_matrix(y)
    if mask.n_features != y.n_features:
        raise ValueError(f"mask has {mask.n_features} features, data has {y.n_features}")
    if mask.n_factors != config.n_factors:
        raise ValueError(f"mask has {mask.n_factors} factors, config declares {config.n_factors}")
    rng = np.random.default_rng(seed)
    n, g, k = y.n_samples, y.n_features, config.n_factors
    log_s0 = np.log(0.1)

    def block(shape):
        return 0.1 * rng.standard_normal(shape), np.full(shape, log_s0)

    z_loc, z_ls = block((g, k))
    x_loc, x_ls = block((n, k))
    u_loc, u_ls = block((g,))
    t_loc, t_ls = block(())
    l_loc, l_ls = block((g, k))
    return VariationalPosterior(z_loc, z_ls, x_loc, x_ls, u_loc, u_ls, t_loc, t_ls, l_loc, l_ls)


@dataclass(frozen=True)
class _Problem:
    """Precomputed, fit-invariant pieces of the objective."""

    data: np.ndarray
    observed: Optional[np.ndarray]  # None when fully observed
    log_slab: np.ndarray
    log_tau0: float
    n_samples: int

    @classmethod
    def build(cls, y: ExpressionMatrix, mask: AnnotationMask, config: FactorConfig) -> "_Problem":
        slab = slab_widths(mask, config)
        observed = None if y.fully_observed else y.observed
        return cls(y.data, observed, np.log(slab), float(np.log(config.tau0)), y.n_samples)


def _gaussian_kl(loc, log_scale):
    # KL(N(loc, exp(log_scale)^2) || N(0, 1)) elementwise, summed
    return float(np.sum(0.5 * (loc * loc + np.exp(2.0 * log_scale) - 1.0) - log_scale))


def _elbo_core(params, prob, batch, n_mc, rng, want_grad):
    """One common-random-numbers evaluation of the mini-batch ELBO.

    Returns (value, grads) where grads is None unless requested; x-block
    gradients are returned batch-sized (callers scatter).  ``batch=None``
    means all rows (no index copies).  The MC prior terms average over n_mc
    reparameterized draws; KL and entropy terms are analytic.
    """
    if batch is not None:
        batch = np.asarray(batch, dtype=np.intp)
        if batch.size == 0:
            raise ValueError("batch must contain at least one sample index")
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    n_total = prob.n_samples
    n_batch = n_total if batch is None else batch.size
    scale = n_total / n_batch

    z_loc, z_ls = params["z_loc"], params["z_log_scale"]
    if batch is None:
        xb_loc, xb_ls = params["x_loc"], params["x_log_scale"]
    else:
        xb_loc, xb_ls = params["x_loc"][batch], params["x_log_scale"][batch]
    u_loc, u_ls = params["log_sigma2_loc"], params["log_sigma2_log_scale"]
    t_loc, t_ls = params["log_tau_loc"], params["log_tau_log_scale"]
    l_loc, l_ls = params["log_lambda_loc"], params["log_lambda_log_scale"]

    g, k = z_loc.shape
    z_sd, xb_sd = np.exp(z_ls), np.exp(xb_ls)
    u_sd, t_sd, l_sd = np.exp(u_ls), np.exp(t_ls), np.exp(l_ls)

    data_b = prob.data if batch is None else prob.data[batch]
    if prob.observed is None:
        obs_b = None
    else:
        obs_b = prob.observed if batch is None else prob.observed[batch]
    if obs_b is None:
        n_obs_g = np.full(g, float(n_batch))
    else:
        n_obs_g = obs_b.sum(axis=0).astype(np.float64)
    log_slab = prob.log_slab

    a0, b0 = SIGMA2_PRIOR_SHAPE, SIGMA2_PRIOR_RATE
    lp_u_const = a0 * np.log(b0) - gammaln(a0)
    lp_l_const = np.log(2.0 / np.pi)
    lp_t_const = np.log(2.0 / np.pi) - prob.log_tau0

    mc_value = 0.0
    if want_grad:
        acc = {key: 0.0 for key in ("z_loc", "z_log_scale", "x_loc", "x_log_scale",
                                    "log_sigma2_loc", "log_sigma2_log_scale",
                                    "log_tau_loc", "log_tau_log_scale",
                                    "log_lambda_loc", "log_lambda_log_scale")}

    for _ in range(n_mc):
        z = z_loc + z_sd * rng.standard_normal((g, k))
        xb = xb_loc + xb_sd * rng.standard_normal(xb_loc.shape)
        u = u_loc + u_sd * rng.standard_normal((g,))
        t = t_loc + t_sd * rng.standard_normal()
        l = l_loc + l_sd * rng.standard_normal((g, k))

        # w = z * a with a = tau * lambda_tilde; log-space keeps extremes finite
        log_p = t + l
        log_a = log_slab + log_p - 0.5 * np.logaddexp(2.0 * log_slab, 2.0 * log_p)
        a = np.exp(log_a)
        w = z * a

        mu = xb @ w.T
        r = data_b - mu
        if obs_b is not None:
            r = np.where(obs_b, r, 0.0)
        prec = np.exp(-u)
        sq_g = np.einsum("ij,ij->j", r, r)
        loglik = -0.5 * float(n_obs_g @ (LOG_2PI + u)) - 0.5 * float(sq_g @ prec)

        lp_l = float(np.sum(lp_l_const + l - np.logaddexp(0.0, 2.0 * l)))
        td = t - prob.log_tau0
        lp_t = float(lp_t_const + t - np.logaddexp(0.0, 2.0 * td))
        lp_u = float(np.sum(lp_u_const - a0 * u - b0 * np.exp(-u)))
        mc_value += scale * loglik + lp_l + lp_t + lp_u

        if want_grad:
            d = r * prec  # dloglik/dmu
            gx = d @ w
            gw = d.T @ xb
            gu_lik = -0.5 * n_obs_g + 0.5 * sq_g * prec
            ratio = expit(2.0 * (log_slab - log_p))  # c^2 / (c^2 + (tau*lambda)^2)
            gwza = gw * z * a * ratio

            dz = scale * (gw * a)
            dxb = scale * gx
            du = scale * gu_lik + (-a0 + b0 * np.exp(-u))
            dl = scale * gwza - np.tanh(l)
            dt = scale * float(gwza.sum()) - np.tanh(td)

            acc["z_loc"] += dz
            acc["z_log_scale"] += dz * (z - z_loc)
            acc["x_loc"] += dxb
            acc["x_log_scale"] += dxb * (xb - xb_loc)
            acc["log_sigma2_loc"] += du
            acc["log_sigma2_log_scale"] += du * (u - u_loc)
            acc["log_tau_loc"] += dt
            acc["log_tau_log_scale"] += dt * (t - t_loc)
            acc["log_lambda_loc"] += dl
            acc["log_lambda_log_scale"] += dl * (l - l_loc)

    mc_value /= n_mc
    klz = _gaussian_kl(z_loc, z_ls)
    klx = _gaussian_kl(xb_loc, xb_ls)
    entropy = (
        0.5 * LOG_2PIE * (g * k + 1 + g)
        + float(l_ls.sum()) + float(t_ls) + float(u_ls.sum())
    )
    value = mc_value - scale * klx - klz + entropy

    if not want_grad:
        return value, None

    grads = {key: np.asarray(val) / n_mc for key, val in acc.items()}
    grads["z_loc"] = grads["z_loc"] - z_loc
    grads["z_log_scale"] = grads["z_log_scale"] - (np.exp(2.0 * z_ls) - 1.0)
    grads["x_loc"] = grads["x_loc"] - scale * xb_loc
    grads["x_log_scale"] = grads["x_log_scale"] - scale * (np.exp(2.0 * xb_ls) - 1.0)
    grads["log_sigma2_log_scale"] = grads["log_sigma2_log_scale"] + 1.0
    grads["log_tau_log_scale"] = grads["log_tau_log_scale"] + 1.0
    grads["log_lambda_log_scale"] = grads["log_lambda_log_scale"] + 1.0
    grads["log_tau_loc"] = np.asarray(float(grads["log_tau_loc"]))
    grads["log_tau_log_scale"] = np.asarray(float(grads["log_tau_log_scale"]))
    return value, grads


def elbo_estimate(post: VariationalPosterior, y, mask: AnnotationMask,
                  config: FactorConfig, batch=None, n_mc: int = 1, seed=0) -> float:
    """Unbiased Monte Carlo ELBO estimate over the given batch rows.

    ``batch`` holds row indices into the full data (default: all rows); the
    likelihood and the batch rows' x-block KL are rescaled by N / batch size,
    so the expectation over uniformly drawn batches equals the full ELBO.
    """
    y = check_expression_matrix(y)
    prob = _Problem.build(y, mask, config)
    value, _ = _elbo_core(post.as_dict(), prob, batch,
                          n_mc, np.random.default_rng(seed), want_grad=False)
    return value


def elbo_gradient(post: VariationalPosterior, y, mask: AnnotationMask,
                  config: FactorConfig, batch=None, n_mc: int = 1, seed=0) -> dict:
    """Gradient of the same Monte Carlo objective as :func:`elbo_estimate`.

    Uses common random numbers: with equal seeds, estimate and gradient
    correspond to one differentiable draw.  Returned arrays are shaped like
    the posterior parameters; x-block rows outside the batch are exactly
    zero.
    """
    y = check_expression_matrix(y)
    prob = _Problem.build(y, mask, config)
    _, grads = _elbo_core(post.as_dict(), prob, batch, n_mc,
                          np.random.default_rng(seed), want_grad=True)
    if batch is not None:
        batch = np.asarray(batch, dtype=np.intp)
        for key in ("x_loc", "x_log_scale"):
            full = np.zeros_like(post.as_dict()[key])
            np.add.at(full, batch, grads[key])
            grads[key] = full
    return grads


@dataclass(frozen=True)
class OptimizerState:
    """Adam moment estimates; applied as gradient *ascent* on the ELBO."""

    first_moment: dict
    second_moment: dict
    step_count: int = 0
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, learning_rate: float = 0.01, **kwargs) -> "OptimizerState":
        zeros = lambda: {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        return cls(zeros(), zeros(), 0, learning_rate, **kwargs)


def _adam_math(m, v, grad, t, lr, beta1, beta2, eps):
    m_new = beta1 * m + (1.0 - beta1) * grad
    v_new = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m_new / (1.0 - beta1 ** t)
    v_hat = v_new / (1.0 - beta2 ** t)
    return m_new, v_new, lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(opt: OptimizerState, params: dict, grads: dict):
    """One bias-corrected Adam ascent step; returns updated (opt, params)."""
    t = opt.step_count + 1
    new_m, new_v, new_params = {}, {}, {}
    for key, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise ValueError(f"{key}: nonfinite gradient")
        m, v, delta = _adam_math(opt.first_moment[key], opt.second_moment[key], g,
                                 t, opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon)
        new_m[key], new_v[key] = np.asarray(m), np.asarray(v)
        new_params[key] = np.asarray(p + delta)
    new_opt = replace(opt, first_moment=new_m, second_moment=new_v, step_count=t)
    return new_opt, new_params


def make_batches(n: int, batch_size: Optional[int], seed, epoch: int = 0) -> list:
    """Random permutation of range(n) split into consecutive chunks.

    Deterministic given (seed, epoch).  ``batch_size=None`` yields a single
    full batch (still permuted).
    """
    if batch_size is None:
        batch_size = n
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}], got {batch_size}")
    perm = np.random.default_rng([seed, 719, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass(frozen=True)
class TrainOptions:
    """Knobs for :func:`fit`; defaults follow the module documentation."""

    max_iters: int = 20_000
    batch_size: Optional[int] = None
    learning_rate: float = 0.01
    n_mc: int = 1
    seed: int = 0
    checkpoint_every: int = 50
    truth_mask: Optional[object] = None
    active_threshold: float = 0.1
    convergence_tol: float = 1e-5
    convergence_window: int = 100
    lr_decay: bool = False
    full_batch_threshold: int = DEFAULT_FULL_BATCH_THRESHOLD
    checkpoint_path: Optional[str] = None


def _weight_summary(params, log_slab):
    """Plug-in loading summary: z location times tau*lambda_tilde at the
    posterior medians of tau and lambda."""
    log_p = params["log_tau_loc"] + params["log_lambda_loc"]
    a = np.exp(log_slab + log_p - 0.5 * np.logaddexp(2.0 * log_slab, 2.0 * log_p))
    return params["z_loc"] * a, np.exp(params["z_log_scale"]) * a


def _pooled_f1(pred, truth) -> float:
    tp = float(np.count_nonzero(pred & truth))
    fp = float(np.count_nonzero(pred & ~truth))
    fn = float(np.count_nonzero(~pred & truth))
    denom = 2.0 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def _truth_active(truth_mask, mask: AnnotationMask) -> np.ndarray:
    """Ground-truth activity padded to the model's annotated columns."""
    active = truth_mask.active if isinstance(truth_mask, AnnotationMask) else np.asarray(truth_mask, dtype=bool)
    ann = mask.annotated_columns
    if active.shape[0] != mask.n_features:
        raise ValueError(f"truth mask has {active.shape[0]} features, model has {mask.n_features}")
    if active.shape[1] > ann.size:
        raise ValueError(
            f"truth mask has {active.shape[1]} factors, model has only {ann.size} annotated columns"
        )
    padded = np.zeros((mask.n_features, ann.size), dtype=bool)
    padded[:, : active.shape[1]] = active
    return padded


def fit(y, mask: AnnotationMask, config: FactorConfig,
        options: Optional[TrainOptions] = None) -> TrainedModel:
    """Train by stochastic variational inference and return posterior summaries.

    Runs Adam on reparameterized ELBO gradients until ``max_iters`` or until
    the relative ELBO change, averaged over a ``convergence_window`` of
    checkpoints, drops below ``convergence_tol``.  With ``batch_size=None``
    the full data is one batch when N is at most ``full_batch_threshold``;
    larger data falls back to threshold-sized mini-batches.  If a
    ground-truth activity mask is supplied, the trace records the pooled F1
    of thresholded loadings (annotated columns, truth padded with inactive
    columns for extras) at every checkpoint.  A nonfinite objective aborts
    the run and returns the state at the last finite checkpoint.
    """
    opts = options or TrainOptions()
    y = check_expression_matrix(y)
    prob = _Problem.build(y, mask, config)
    n = y.n_samples

    batch_size = opts.batch_size
    if batch_size is None and n > opts.full_batch_threshold:
        batch_size = opts.full_batch_threshold
    full_batch = batch_size is None or batch_size >= n

    truth = None if opts.truth_mask is None else _truth_active(opts.truth_mask, mask)
    ann_cols = mask.annotated_columns

    post = init_posterior(y, mask, config, opts.seed)
    params = {k: v.copy() for k, v in post.as_dict().items()}
    x_keys = ("x_loc", "x_log_scale")
    global_keys = tuple(k for k in _PARAM_KEYS if k not in x_keys)
    opt = OptimizerState.for_params({k: params[k] for k in global_keys}, opts.learning_rate)
    x_m = {k: np.zeros_like(params[k]) for k in x_keys}
    x_v = {k: np.zeros_like(params[k]) for k in x_keys}

    min_log_scale = np.log(1e-6)
    log_scale_keys = [k for k in _PARAM_KEYS if k.endswith("log_scale")]

    iters, elbos, seconds, f1s = [], [], [], []
    elbo_acc, elbo_count = 0.0, 0
    snapshot = None
    stream = open(opts.checkpoint_path, "w") if opts.checkpoint_path else None
    t_start = time.perf_counter()
    it = 0
    diverged = False
    try:
        epoch = 0
        while it < opts.max_iters:
            # full-batch mode skips index bookkeeping entirely
            batches = [None] if full_batch else make_batches(n, batch_size, opts.seed, epoch)
            for batch in batches:
                it += 1
                rng = np.random.default_rng([opts.seed, 211, it])
                value, grads = _elbo_core(params, prob, batch, opts.n_mc, rng, want_grad=True)
                if not np.isfinite(value):
                    diverged = True
                    break

                lr = opts.learning_rate
                if opts.lr_decay:
                    lr = opts.learning_rate * 0.999 ** (it / 100.0)
                    opt = replace(opt, learning_rate=lr)

                opt, new_globals = adam_step(
                    opt, {k: params[k] for k in global_keys}, {k: grads[k] for k in global_keys}
                )
                params.update(new_globals)
                for key in x_keys:
                    if batch is None:
                        m, v, delta = _adam_math(
                            x_m[key], x_v[key], grads[key],
                            it, lr, opt.beta1, opt.beta2, opt.epsilon,
                        )
                        x_m[key], x_v[key] = m, v
                        params[key] += delta
                    else:
                        m, v, delta = _adam_math(
                            x_m[key][batch], x_v[key][batch], grads[key],
                            it, lr, opt.beta1, opt.beta2, opt.epsilon,
                        )
                        x_m[key][batch] = m
                        x_v[key][batch] = v
                        params[key][batch] += delta
                for key in log_scale_keys:
                    params[key] = np.asarray(np.maximum(params[key], min_log_scale))

                elbo_acc += value
                elbo_count += 1
                if it % opts.checkpoint_every == 0 or it == opts.max_iters:
                    iters.append(it)
                    elbos.append(elbo_acc / elbo_count)
                    seconds.append(time.perf_counter() - t_start)
                    elbo_acc, elbo_count = 0.0, 0
                    if truth is not None:
                        w_mean, _ = _weight_summary(params, prob.log_slab)
                        pred = np.abs(w_mean[:, ann_cols]) > opts.active_threshold
                        f1s.append(_pooled_f1(pred, truth))
                    if stream is not None:
                        record = {"iteration": it, "elbo": elbos[-1], "seconds": seconds[-1]}
                        if truth is not None:
                            record["f1"] = f1s[-1]
                        stream.write(json.dumps(record) + "\n")
                    snapshot = {k: v.copy() for k, v in params.items()}
                    win = opts.convergence_window
                    if len(elbos) > win:
                        ref = elbos[-1 - win]
                        drift = abs(elbos[-1] - ref) / (win * max(1.0, abs(ref)))
                        if drift < opts.convergence_tol:
                            it = opts.max_iters  # converged; exit both loops
                            break
                if it >= opts.max_iters:
                    break
            if diverged:
                break
            epoch += 1
    finally:
        if stream is not None:
            stream.close()

    if diverged:
        if snapshot is None:
            raise RuntimeError(f"objective became nonfinite at iteration {it} before any checkpoint")
        warnings.warn(
            f"objective became nonfinite at iteration {it}; "
            f"returning state from iteration {iters[-1]}",
            RuntimeWarning,
        )
        params = snapshot

    trace = TrainingTrace(tuple(iters), tuple(elbos), tuple(seconds),
                          tuple(f1s) if truth is not None else None)
    w_mean, w_scale = _weight_summary(params, prob.log_slab)
    return TrainedModel(
        w_mean=w_mean,
        w_scale=w_scale,
        x_mean=params["x_loc"].copy(),
        x_scale=np.exp(params["x_log_scale"]),
        sigma2=np.exp(params["log_sigma2_loc"]),
        config=config,
        mask=mask,
        trace=trace,
    )
