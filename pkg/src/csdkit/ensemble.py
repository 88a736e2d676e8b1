"""Finite ensembles: trained members and Monte Carlo linearized members.

Each member's effective function is its small-init view plus an independent
exact draw from the kernel prior over ``X`` and the queries, so all members
start from ``N(0, K)`` and train toward the same labels.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .gp import linearized_predict, sample_prior
from .kernel import DEFAULT_JITTER, KernelKind
from .nn import MlpParams, MlpSpec, TrainConfig, forward, init_mlp, train_regression


@dataclass
class EnsembleStats:
    member_count: int
    mean: np.ndarray
    var: np.ndarray
    members: Optional[np.ndarray] = None

    @classmethod
    def from_members(cls, preds, keep=False):
        preds = np.asarray(preds, dtype=np.float64)
        if preds.shape[0] < 2:
            raise ConfigError("variance needs at least two members")
        return cls(preds.shape[0], preds.mean(axis=0), preds.var(axis=0, ddof=1),
                   preds if keep else None)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_index", "mean", "var"])
            for i, (m, v) in enumerate(zip(self.mean, self.var)):
                w.writerow([i, repr(float(m)), repr(float(v))])


def member_seed(base_seed, index):
    """Reproducible, well-separated per-member seed."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _check(X, Y, queries, M):
    if int(M) < 2:
        raise ConfigError(f"ensemble needs M >= 2, got {M}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    if Y.shape[0] != X.shape[0]:
        raise ShapeError(f"{Y.shape[0]} labels for {X.shape[0]} inputs")
    if queries.shape[1] != X.shape[1]:
        raise ShapeError("queries and training inputs differ in dimension")
    return X, Y, queries


def train_ensemble(spec: MlpSpec, X, Y, M, cfg: TrainConfig, queries, *, prior_params=None,
                   kind=KernelKind.FULL, seed=0, member_seeds=None, f0=None, keep_members=False,
                   workers=1, jitter_start=DEFAULT_JITTER) -> EnsembleStats:
    """Train ``M`` members and return statistics of their predictions at ``queries``.

    ``prior_params`` supplies the kernel for the prior draws (defaults to a
    network initialized from ``spec``).  Draws share one generator seeded by
    ``seed``; member networks use ``member_seeds`` or seeds derived from
    ``(seed, index)``.  ``f0`` may supply the ``(M, N + Q)`` prior draws
    directly.  Results do not depend on ``workers``.
    """
    X, Y, queries = _check(X, Y, queries, M)
    M = int(M)
    if member_seeds is None:
        member_seeds = [member_seed(seed, m) for m in range(M)]
    if len(member_seeds) != M:
        raise ConfigError(f"{len(member_seeds)} member seeds for M={M}")
    prior_params = init_mlp(spec) if prior_params is None else prior_params
    n = X.shape[0]
    if f0 is None:
        f0 = sample_prior(prior_params, np.vstack([X, queries]), M, kind, seed=seed,
                          jitter_start=jitter_start)
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.shape != (M, n + queries.shape[0]):
        raise ShapeError(f"prior draws have shape {f0.shape}")

    def run(m):
        net = init_mlp(spec.with_seed(member_seeds[m]))
        try:
            trained, _ = train_regression(net, X, Y - f0[m, :n], cfg, small_init=True)
        except DivergenceError as exc:
            raise DivergenceError(f"member {m} (seed {member_seeds[m]}): {exc}",
                                  step=exc.step, seed=member_seeds[m]) from exc
        return forward(trained, queries) - forward(net, queries) + f0[m, n:]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(run, range(M)))
    else:
        preds = [run(m) for m in range(M)]
    return EnsembleStats.from_members(np.reshape(preds, (M, -1)), keep_members)


def mc_linearized_ensemble(params: MlpParams, X, Y, queries, M, kind=KernelKind.FULL, seed=0,
                           *, f0=None, keep_members=False,
                           jitter_start=DEFAULT_JITTER) -> EnsembleStats:
    """Infinite-training linearized members, one affine map per prior draw.

    ``f0`` may supply the ``(M, N + Q)`` prior draws directly.
    """
    X, Y, queries = _check(X, Y, queries, M)
    n = X.shape[0]
    if f0 is None:
        f0 = sample_prior(params, np.vstack([X, queries]), int(M), kind, seed=seed,
                          jitter_start=jitter_start)
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.shape != (int(M), n + queries.shape[0]):
        raise ShapeError(f"prior draws have shape {f0.shape}")
    preds = linearized_predict(f0[:, :n], f0[:, n:], params, X, Y, queries, kind, jitter_start)
    return EnsembleStats.from_members(preds, keep_members)


def write_pgm(values, path, vmin=None, vmax=None, levels=255):
    """ASCII P2 heatmap of a 2D array, linearly mapped from ``[vmin, vmax]``.

    A sidecar ``<path>.range.csv`` records the normalization.  Returns ``(vmin, vmax)``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError("heatmap values must be a 2D array")
    vmin = float(np.min(values)) if vmin is None else float(vmin)
    vmax = float(np.max(values)) if vmax is None else float(vmax)
    span = vmax - vmin
    if span > 0:
        pix = np.rint(np.clip((values - vmin) / span, 0.0, 1.0) * levels).astype(int)
    else:
        pix = np.zeros(values.shape, dtype=int)
    h, w = values.shape
    lines = ["P2", f"{w} {h}", str(levels)]
    lines += [" ".join(str(v) for v in row) for row in pix]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(f"{path}.range.csv", "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["min", "max", "levels"])
        cw.writerow([repr(vmin), repr(vmax), levels])
    return vmin, vmax


def read_pgm(path):
    """Parse an ASCII P2 file into an integer array (comments not supported)."""
    tokens = open(path).read().split()
    if not tokens or tokens[0] != "P2":
        raise ShapeError(f"{path} is not an ASCII PGM")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=int)
    if data.size != w * h:
        raise ShapeError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w)
