"""Oracle-equivalence checks shared by ``csd-kit verify`` and the test suite.

Every check returns a list of :class:`Check` rows; a row passes when its
value satisfies the comparison against its threshold.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.stats import pearsonr, spearmanr

from .csd import QueryRegressor, ReuseTrain, make_csd_model, predict_variance, single_query_variance, train_csd
from .data import gen_toy
from .ensemble import mc_linearized_ensemble, train_ensemble
from .errors import CsdError
from .gp import posterior, training_error_decay
from .kernel import MAX_JITTER, KernelKind, cholesky_psd, gram
from .nn import MlpSpec, TrainConfig, auto_learning_rate, forward, init_mlp, train_regression

_OPS = {"<=": np.less_equal, "<": np.less, ">=": np.greater_equal, ">": np.greater}


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    threshold: float
    op: str = "<="
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and _OPS[self.op](self.value, self.threshold))

    def row(self):
        return (self.name, repr(float(self.value)), f"{self.op}{self.threshold!r}", int(self.passed))


def failed(name, exc, threshold=0.0) -> Check:
    """A check that could not be evaluated; recorded as a NaN failure."""
    return Check(name, float("nan"), threshold, detail=f"{type(exc).__name__}: {exc}")


def gp_vs_mc(instances=5, n_train=5, n_test=20, width=256, members=100_000, dim=3, seed=0):
    """Monte Carlo linearized ensembles against the closed-form posterior variance.

    The value per instance is the largest ``|v_mc - v| / sigma_mc`` over its
    queries, where ``sigma_mc = v sqrt(2 / (M - 1))`` is the standard error of
    a Gaussian sample variance.
    """
    t0 = time.perf_counter()
    rows = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        X = rng.standard_normal((n_train, dim))
        Y = rng.standard_normal(n_train)
        Q = rng.standard_normal((n_test, dim))
        prior = init_mlp(MlpSpec(dim, (width,), seed=seed * 1000 + i))
        exact = posterior(prior, X, Y, Q).var
        mc = mc_linearized_ensemble(prior, X, Y, Q, members, seed=seed * 1000 + i).var
        sigma = exact * np.sqrt(2.0 / (members - 1))
        rows.append(Check(f"gp_mc_instance{i}_max_sigmas", float(np.max(np.abs(mc - exact) / sigma)), 5.0))
    rows.append(Check("gp_mc_runtime_s", time.perf_counter() - t0, 30.0))
    return rows


def ensemble_convergence(widths=(64, 256, 1024), members=100, seed=12345, prior_seed=7,
                         max_steps=20_000, bias_scale=0.1):
    """Trained ensembles on ``grid2d`` against the closed-form grid variance.

    Reports Pearson r at the largest width and the median relative gap per
    width, which must shrink as the width grows.
    """
    t0 = time.perf_counter()
    ds = gen_toy("grid2d")
    X, Y, G = ds.inputs, ds.labels, ds.splits["query"]
    cfg = TrainConfig(max_steps=max_steps, loss_tolerance=1e-12)
    rows, gaps, r = [], [], float("nan")
    for w in widths:
        spec = MlpSpec(2, (int(w),), bias_scale=bias_scale, seed=seed)
        prior = init_mlp(spec)
        exact = posterior(prior, X, Y, G).var
        est = train_ensemble(spec, X, Y, members, cfg, G, prior_params=prior, seed=prior_seed).var
        gaps.append(float(np.median(np.abs(est - exact) / exact)))
        rows.append(Check(f"ensemble_median_gap_w{w}", gaps[-1], 1.0))
        r = float(pearsonr(est, exact)[0])
    rows.append(Check(f"ensemble_pearson_w{widths[-1]}", r, 0.95, ">"))
    rows.append(Check("ensemble_gap_increase_max", float(np.max(np.diff(gaps))) if len(gaps) > 1 else -1.0,
                      0.0, "<"))
    rows.append(Check("ensemble_runtime_s", time.perf_counter() - t0, 300.0))
    return rows


def single_query(instances=10, dim=5, seed=0, width_last=1024, width_all=2048, max_steps=20_000):
    """One kernel-label regression per query against the closed-form variance.

    Instances draw ``3 <= N <= 10`` standard normal training inputs in ``dim``
    dimensions.  Both regressor variants are checked, plus a linear model
    (identity activation, no hidden layer) where the linearization is exact.
    """
    t0 = time.perf_counter()
    cfg = TrainConfig(max_steps=max_steps, loss_tolerance=1e-24)
    rows = []
    for trainable, width in (("last", width_last), ("all", width_all)):
        g = QueryRegressor(trainable)
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, i])
            n = int(rng.integers(3, 11))
            X = rng.standard_normal((n, dim))
            x_t = rng.standard_normal(dim)
            prior = init_mlp(MlpSpec(dim, (width,), bias_scale=1.0, seed=100 + i))
            exact = posterior(prior, X, np.zeros(n), x_t[None], g.kind).var[0]
            est = single_query_variance(prior, X, x_t, g, cfg)
            worst = max(worst, abs(est - exact) / exact)
        rows.append(Check(f"single_query_{trainable}_max_rel", worst, 0.05))
    rng = np.random.default_rng([seed, instances])
    X = rng.standard_normal((4, dim))
    x_t = rng.standard_normal(dim)
    lin = init_mlp(MlpSpec(dim, (), "identity", seed=seed))
    exact = posterior(lin, X, np.zeros(4), x_t[None]).var[0]
    est = single_query_variance(lin, X, x_t, QueryRegressor("all"), cfg)
    rows.append(Check("single_query_linear_rel", abs(est - exact) / exact, 1e-6))
    rows.append(Check("single_query_runtime_s", time.perf_counter() - t0, 120.0))
    return rows


def csd_fidelity(width=256, embed_dim=256, bias_scale=1.0, seed=1, steps=5000, learning_rate=5.0):
    """CSD variance on ``grid2d`` against the closed-form last-layer posterior."""
    t0 = time.perf_counter()
    ds = gen_toy("grid2d")
    X, G = ds.inputs, ds.splits["query"]
    prior = init_mlp(MlpSpec(2, (width,), bias_scale=bias_scale, seed=seed))
    exact = posterior(prior, X, np.zeros(X.shape[0]), G, KernelKind.LAST_LAYER).var
    model = make_csd_model(prior, embed_dim, seed=seed)
    train_csd(model, X, ReuseTrain(), TrainConfig(learning_rate, steps, "full", 0.0, seed))
    v_grid = predict_variance(model, G)
    v_train = predict_variance(model, X)
    return [
        Check("csd_spearman", float(spearmanr(v_grid, exact)[0]), 0.9, ">"),
        Check("csd_train_over_p90", float(v_train.max() / np.percentile(v_grid, 90)), 0.1),
        Check("csd_clamp_count", float(model.clamp_count), 0.0),
        Check("csd_runtime_s", time.perf_counter() - t0, 180.0),
    ]


def dynamics_fidelity(width=2048, n_points=10, decay_to=0.01, lr_fraction=0.1, seed=12345,
                      bias_scale=0.1):
    """Gradient-descent residuals on ``grid2d`` against the kernel flow.

    The grid runs from 0 to the flow time at which the residual norm has
    fallen to ``decay_to`` of its start.  The value is the largest
    ``||r_gd(t) - r_flow(t)|| / ||r(0)||`` over the grid.
    """
    ds = gen_toy("grid2d")
    X, Y = ds.inputs, ds.labels
    n = X.shape[0]
    prior = init_mlp(MlpSpec(2, (width,), bias_scale=bias_scale, seed=seed))
    r0 = float(np.linalg.norm(forward(prior, X) - Y))

    def flow_norm(t):
        return float(np.linalg.norm(training_error_decay(prior, X, Y, [t], 1.0)[0]))

    hi = 1.0
    while flow_norm(hi) > decay_to * r0:
        hi *= 2.0
    T = brentq(lambda t: flow_norm(t) - decay_to * r0, 0.0, hi)
    lr = lr_fraction * auto_learning_rate(prior, X)
    # mean loss: each step advances flow time by lr / n
    steps = np.round(np.linspace(0.0, T * n / lr, n_points)).astype(int)
    flow = training_error_decay(prior, X, Y, steps * lr / n, 1.0)
    p, done, dev = prior, 0, 0.0
    for s, r_flow in zip(steps, flow):
        if s > done:
            p, _ = train_regression(p, X, Y, TrainConfig(lr, int(s - done)))
            done = int(s)
        dev = max(dev, float(np.linalg.norm(forward(p, X) - Y - r_flow)) / r0)
    return [Check(f"dynamics_w{width}_max_rel_dev", dev, 0.05)]


def rank_deficient_gram(ladder=True, seed=0):
    """Factor the Gram of a set with repeated inputs; needs the jitter ladder."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 3))
    X = np.vstack([X, X[:3]])
    K = gram(init_mlp(MlpSpec(3, (64,), seed=seed)), X).values
    try:
        _, lam = cholesky_psd(K, ladder=ladder)
    except CsdError as exc:
        return [failed("jitter_ladder_rank_deficient", exc, MAX_JITTER)]
    return [Check("jitter_ladder_rank_deficient", lam, MAX_JITTER)]


SUITES = {
    "gp_mc": gp_vs_mc,
    "ensemble": ensemble_convergence,
    "single_query": single_query,
    "csd": csd_fidelity,
    "jitter": rank_deficient_gram,
    "dynamics": dynamics_fidelity,
}
