"""Closed-form NTK-GP posterior and linearized training dynamics.

Prior functions follow the corrected initialization whose covariance equals the
tangent kernel itself, so the post-training ensemble is a GP with

    mean = K(t, X) K(X, X)^-1 Y
    cov  = K(t, t) - K(t, X) K(X, X)^-1 K(X, t)
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericError, ShapeError
from .kernel import DEFAULT_JITTER, KernelKind, KernelMatrix, cholesky_psd, cross, gram
from .nn import forward

NEG_VAR_TOL = 1e-9


@dataclass
class GpPosterior:
    mean: np.ndarray
    cov: np.ndarray
    var: np.ndarray
    prior_var: np.ndarray
    train_size: int
    test_size: int
    jitter_used: float
    clamp_count: int = 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["test_index", "mean", "var"])
            for i, (m, v) in enumerate(zip(self.mean, self.var)):
                w.writerow([i, repr(float(m)), repr(float(v))])


def clamp_variance(var, prior_scale, tol=NEG_VAR_TOL):
    """Zero out negative variances; returns ``(clamped, n_beyond_tolerance)``.

    Values within ``-tol * prior_scale`` are rounding noise and are zeroed
    silently; anything more negative is counted and warned about.
    """
    var = np.asarray(var, dtype=np.float64)
    bad = int(np.count_nonzero(var < -tol * np.asarray(prior_scale)))
    if bad:
        warnings.warn(f"clamped {bad} negative variance(s) beyond tolerance", RuntimeWarning)
    return np.maximum(var, 0.0), bad


def _check_sets(X, Y, X_t):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X_t = np.atleast_2d(np.asarray(X_t, dtype=np.float64))
    if X.shape[0] == 0 or X_t.shape[0] == 0:
        raise ShapeError("training and test sets must be nonempty")
    if Y is not None:
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape[0] != X.shape[0]:
            raise ShapeError(f"{Y.shape[0]} labels for {X.shape[0]} training inputs")
    return X, Y, X_t


def posterior(params, X, Y, X_t, kind=KernelKind.FULL, jitter_start=DEFAULT_JITTER) -> GpPosterior:
    X, Y, X_t = _check_sets(X, Y, X_t)
    K = gram(params, X, kind)
    L, lam = cholesky_psd(K, jitter_start)
    K_tx = cross(params, X_t, X, kind)
    K_tt = cross(params, X_t, X_t, kind)
    K_tt = 0.5 * (K_tt + K_tt.T)
    A = scipy.linalg.solve_triangular(L, K_tx.T, lower=True)
    cov = K_tt - A.T @ A
    cov = 0.5 * (cov + cov.T)
    mean = K_tx @ scipy.linalg.cho_solve((L, True), Y)
    prior = np.diag(K_tt).copy()
    var, bad = clamp_variance(np.diag(cov), prior)
    return GpPosterior(mean, cov, var, prior, X.shape[0], X_t.shape[0], lam, bad)


def linearized_predict(f0_train, f0_test, params, X, Y, X_t, kind=KernelKind.FULL,
                       jitter_start=DEFAULT_JITTER):
    """Post-training outputs as an affine map of initial outputs.

    ``f0_train``/``f0_test`` may be single vectors or stacks of draws with the
    point axis last.
    """
    X, Y, X_t = _check_sets(X, Y, X_t)
    f0_train = np.asarray(f0_train, dtype=np.float64)
    f0_test = np.asarray(f0_test, dtype=np.float64)
    if f0_train.shape[-1] != X.shape[0] or f0_test.shape[-1] != X_t.shape[0]:
        raise ShapeError("initial predictions must be sized to the training and test sets")
    K = gram(params, X, kind)
    L, _ = cholesky_psd(K, jitter_start)
    K_tx = cross(params, X_t, X, kind)
    resid = (Y - f0_train).T  # (N,) or (N, M)
    return f0_test + (K_tx @ scipy.linalg.cho_solve((L, True), resid)).T


def sample_prior(params, Z, M, kind=KernelKind.FULL, seed=0, jitter_start=DEFAULT_JITTER,
                 rng=None):
    """``M`` joint draws ``f0 ~ N(0, K(Z, Z))`` as an ``(M, |Z|)`` array."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[0] == 0:
        raise ShapeError("prior evaluation set must be nonempty")
    L, _ = cholesky_psd(gram(params, Z, kind), jitter_start)
    rng = np.random.default_rng(seed) if rng is None else rng
    return rng.standard_normal((int(M), Z.shape[0])) @ L.T


def training_error_decay(params, X, Y, t_grid, alpha, kind=KernelKind.FULL):
    """Residuals ``exp(-alpha t K) (f(X, theta0) - Y)`` for each ``t`` in ``t_grid``.

    ``alpha`` is the flow rate for the summed loss ``0.5 ||f - Y||^2``; gradient
    descent with step ``lr`` on the mean loss advances ``t`` by ``lr / N`` per step
    at ``alpha = 1``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if np.any(t_grid < 0) or np.any(np.diff(t_grid) < 0):
        raise ValueError("t_grid must be nonnegative and ascending")
    r0 = forward(params, X) - np.asarray(Y, dtype=np.float64)
    K = gram(params, X, kind).values
    try:
        lam, V = np.linalg.eigh(K)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    lam = np.maximum(lam, 0.0)
    coef = V.T @ r0
    out = np.empty((t_grid.size, r0.size))
    for i, t in enumerate(t_grid):
        out[i] = r0 if t == 0 else V @ (np.exp(-alpha * t * lam) * coef)
    return out
