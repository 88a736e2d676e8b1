"""Tabular Q-learning on sparse-reward MDPs with an optimism bonus.

Actions are chosen greedily on ``Q(s, a) + beta(t) * b(s, a)``.  The bonus is
either absent, a count-based reference ``1 / sqrt(n(s') + 1)``, or the CSD
variance of the expected next-state features, with the CSD model retrained
every ``retrain_frames`` frames on the states visited so far.  By default the
CSD bonus is planned through the known model before use, so a novel state
many steps away still pulls the greedy choice toward it.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from .csd import ReuseTrain, make_csd_model, predict_variance, train_csd
from .errors import ConfigError
from .nn import MlpSpec, TrainConfig, init_mlp

BONUS_SOURCES = ("none", "csd", "count_oracle")
BONUS_TARGETS = ("select", "reward", "bootstrap", "plan")
LEFT, RIGHT, UP, DOWN = 0, 1, 2, 3


@dataclass
class Mdp:
    """Finite MDP with dense transitions ``P[s, a, s']``.

    Reward ``reward[s']`` is paid on entering ``s'``; entering a terminal
    state ends the episode, as does hitting ``cap`` frames.
    """

    kind: str
    P: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    start: np.ndarray
    coords: np.ndarray
    gamma: float = 0.99
    cap: int = 100

    def __post_init__(self):
        S, A, S2 = self.P.shape
        if S != S2 or A < 1:
            raise ConfigError(f"transition tensor must be S x A x S, got {self.P.shape}")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12) or np.any(self.P < 0):
            raise ConfigError("transition rows must be distributions")
        if not np.isclose(self.start.sum(), 1.0) or np.any(self.start < 0):
            raise ConfigError("start distribution must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.cap < 1:
            raise ConfigError("episode cap must be positive")
        self.terminal = np.asarray(self.terminal, dtype=bool)

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def n_actions(self):
        return self.P.shape[1]

    def goal_distance(self):
        """Fewest transitions from each state to a terminal state (BFS; -1 if unreachable)."""
        S = self.n_states
        dist = np.full(S, -1, dtype=int)
        queue = deque(np.flatnonzero(self.terminal).tolist())
        dist[self.terminal] = 0
        reach = self.P.max(axis=1) > 0  # reach[s, s2]
        while queue:
            s2 = queue.popleft()
            for s in np.flatnonzero(reach[:, s2]):
                if dist[s] < 0:
                    dist[s] = dist[s2] + 1
                    queue.append(s)
        return dist

    def validate(self, require_goal=True):
        if not require_goal:
            return self
        if not self.terminal.any():
            raise ConfigError("MDP has no goal state")
        dist = self.goal_distance()
        bad = np.flatnonzero((self.start > 0) & (dist < 0))
        if bad.size:
            raise ConfigError(f"goal unreachable from start state(s) {bad.tolist()}")
        return self


def chain(n_states, gamma=0.99, cap=None, goal_reward=1.0) -> Mdp:
    """Deterministic chain: start at 0, goal at ``n - 1``; actions left/right.

    Moving left at state 0 stays put.  ``goal_reward=0`` gives a reward-free
    chain whose last state is still terminal.
    """
    n = int(n_states)
    if n < 2:
        raise ConfigError("chain needs at least 2 states")
    P = np.zeros((n, 2, n))
    for s in range(n):
        P[s, LEFT, max(s - 1, 0)] = 1.0
        P[s, RIGHT, min(s + 1, n - 1)] = 1.0
    reward = np.zeros(n)
    reward[-1] = goal_reward
    terminal = np.zeros(n, dtype=bool)
    terminal[-1] = True
    start = np.zeros(n)
    start[0] = 1.0
    coords = np.column_stack([np.arange(n) / (n - 1), np.zeros(n)])
    mdp = Mdp("chain", P, reward, terminal, start, coords, gamma, 2 * n if cap is None else int(cap))
    return mdp.validate()


def gridworld(width, height, walls=(), goal=None, start=(0, 0), gamma=0.99, cap=None) -> Mdp:
    """4-connected grid; bumping into walls or borders stays put.

    Cells are ``(x, y)`` with state id ``y * width + x``; ``goal`` defaults to
    the far corner.
    """
    w, h = int(width), int(height)
    if w < 1 or h < 1 or w * h < 2:
        raise ConfigError("gridworld needs at least 2 cells")
    goal = (w - 1, h - 1) if goal is None else tuple(goal)
    blocked = {tuple(c) for c in walls}
    for c in [goal, tuple(start), *blocked]:
        if not (0 <= c[0] < w and 0 <= c[1] < h):
            raise ConfigError(f"cell {c} lies outside the {w}x{h} grid")
    if goal in blocked or tuple(start) in blocked:
        raise ConfigError("start and goal must not be walls")
    sid = lambda x, y: y * w + x
    S = w * h
    P = np.zeros((S, 4, S))
    moves = {LEFT: (-1, 0), RIGHT: (1, 0), UP: (0, 1), DOWN: (0, -1)}
    for y in range(h):
        for x in range(w):
            for a, (dx, dy) in moves.items():
                nx, ny = x + dx, y + dy
                if not (0 <= nx < w and 0 <= ny < h) or (nx, ny) in blocked or (x, y) in blocked:
                    nx, ny = x, y
                P[sid(x, y), a, sid(nx, ny)] = 1.0
    reward = np.zeros(S)
    terminal = np.zeros(S, dtype=bool)
    reward[sid(*goal)] = 1.0
    terminal[sid(*goal)] = True
    mu = np.zeros(S)
    mu[sid(*start)] = 1.0
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    coords = np.column_stack([xs.ravel() / max(w - 1, 1), ys.ravel() / max(h - 1, 1)])
    mdp = Mdp("gridworld", P, reward, terminal, mu, coords, gamma, 4 * (w + h) if cap is None else int(cap))
    return mdp.validate()


@dataclass(frozen=True)
class BonusSchedule:
    beta_init: float = 0.1
    beta_final: float = 0.01
    decay_frames: int = 10_000
    shape: str = "linear"

    def __post_init__(self):
        if self.beta_final < 0 or self.beta_init < self.beta_final:
            raise ConfigError("need 0 <= beta_final <= beta_init")
        if self.decay_frames < 1:
            raise ConfigError("decay_frames must be positive")
        if self.shape != "linear":
            raise ConfigError(f"unsupported schedule shape {self.shape!r}")


def bonus_beta(frame, schedule: BonusSchedule) -> float:
    """Linear anneal from ``beta_init`` to ``beta_final``, constant afterwards."""
    if frame < 0:
        raise ValueError("frame must be nonnegative")
    if frame >= schedule.decay_frames:
        return schedule.beta_final
    frac = frame / schedule.decay_frames
    return schedule.beta_init + (schedule.beta_final - schedule.beta_init) * frac


class StateFeaturizer:
    """One-hot state id, 2D coordinates and a fixed Gaussian projection of size ``k``.

    Projection entries have variance ``1 / k``.  Coordinates (in [0, 1]) are
    multiplied by ``coord_scale``; a larger scale makes kernel similarity, and
    hence novelty, depend mostly on spatial distance.
    """

    def __init__(self, mdp: Mdp, k=8, seed=0, coord_scale=1.0):
        rng = np.random.default_rng(seed)
        S = mdp.n_states
        proj = rng.standard_normal((S, int(k))) / np.sqrt(max(int(k), 1))
        self.table = np.hstack([np.eye(S), coord_scale * mdp.coords, proj])

    @property
    def dim(self):
        return self.table.shape[1]

    def __call__(self, states):
        return self.table[np.asarray(states, dtype=int)]

    def expected_next(self, mdp: Mdp):
        """``E[features(s') | s, a]`` as an ``(S, A, dim)`` array."""
        return np.einsum("sat,td->sad", mdp.P, self.table)


@dataclass
class QConfig:
    alpha_q: float = 0.5
    epsilon: float = 0.01
    frames: int = 8000
    episodes: Optional[int] = None
    tie_break: str = "random"
    retrain_frames: int = 500
    csd_steps: int = 1000
    csd_batch: int = 64
    csd_lr: float = 20.0
    hidden_widths: tuple = (64,)
    embed_dim: int = 64
    bias_scale: float = 0.1
    feature_k: int = 8
    coord_scale: float = 0.0
    sqrt_bonus: bool = False
    # "select": one-step bonus at action selection only; "reward"/"bootstrap":
    # also added to the TD reward or the bootstrapped next-state value;
    # "plan": the CSD bonus is propagated through the known model and used at
    # selection (the count bonus is then used at selection as is)
    bonus_target: str = "plan"
    reset_csd: bool = False
    # end the run at the first goal visit (the first-success frame is unchanged)
    stop_on_success: bool = False

    def __post_init__(self):
        if not 0 < self.alpha_q <= 1 or not 0 <= self.epsilon <= 1:
            raise ConfigError("alpha_q must lie in (0, 1] and epsilon in [0, 1]")
        if self.frames < 1 or self.retrain_frames < 1:
            raise ConfigError("frames and retrain_frames must be positive")
        if self.bonus_target not in BONUS_TARGETS:
            raise ConfigError(f"bonus_target must be one of {BONUS_TARGETS}, got {self.bonus_target!r}")
        if self.tie_break not in ("random", "first"):
            raise ConfigError(f"tie_break must be 'random' or 'first', got {self.tie_break!r}")


@dataclass
class LearningCurve:
    seed: int
    bonus_source: str
    returns: np.ndarray
    frames: np.ndarray
    betas: np.ndarray
    visits: np.ndarray
    checkpoints: list = field(default_factory=list)

    @property
    def first_success_frame(self):
        hit = np.flatnonzero(self.returns > 0)
        return int(self.frames[hit[0]]) if hit.size else None

    def solved_within(self, budget):
        f = self.first_success_frame
        return f is not None and f <= budget

    def to_rows(self):
        return [(self.seed, i, float(r), int(f), float(b))
                for i, (r, f, b) in enumerate(zip(self.returns, self.frames, self.betas))]


def write_curves_csv(curves, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "episode", "return", "frames", "beta"])
        for c in curves:
            for seed, ep, ret, fr, beta in c.to_rows():
                w.writerow([seed, ep, repr(ret), fr, repr(beta)])


def plan_bonus(mdp: Mdp, b, tol=1e-12, max_iter=100_000):
    """Discounted bonus-to-go: fixed point of ``B = b + gamma * P max_a B``.

    The bonus is treated as non-episodic: a terminal state continues to the
    start distribution, so ending an episode is not penalized.
    """
    B = np.array(b, dtype=np.float64)
    for _ in range(max_iter):
        V = B.max(axis=1)
        V[mdp.terminal] = mdp.start @ V
        B_new = b + mdp.gamma * (mdp.P @ V)
        if np.max(np.abs(B_new - B)) <= tol * max(1.0, float(np.max(np.abs(B_new)))):
            return B_new
        B = B_new
    return B


def _csd_bonus_table(model, next_feats, cfg, mdp):
    S, A, d = next_feats.shape
    v = predict_variance(model, next_feats.reshape(S * A, d)).reshape(S, A)
    v = np.sqrt(v) if cfg.sqrt_bonus else v
    return plan_bonus(mdp, v) if cfg.bonus_target == "plan" else v


def q_learning_with_bonus(mdp: Mdp, bonus_source="none", schedule: BonusSchedule = None,
                          cfg: QConfig = None, seed=0) -> LearningCurve:
    """Run one seeded learner for ``cfg.frames`` frames (or ``cfg.episodes`` episodes).

    With ``bonus_source="csd"`` each retrain checkpoint records the mean bonus
    over the ten most visited states and over never-visited states.
    """
    if bonus_source not in BONUS_SOURCES:
        raise ConfigError(f"bonus_source must be one of {BONUS_SOURCES}, got {bonus_source!r}")
    schedule = BonusSchedule() if schedule is None else schedule
    cfg = QConfig() if cfg is None else cfg
    S, A = mdp.n_states, mdp.n_actions
    rng = np.random.default_rng(seed)
    Q = np.zeros((S, A))
    counts = np.zeros(S)
    cumP = np.cumsum(mdp.P, axis=2)
    start_cum = np.cumsum(mdp.start)
    bonus_tab = np.zeros((S, A))
    beta_i, beta_f = schedule.beta_init, schedule.beta_final
    if bonus_source == "none":
        beta_i = beta_f = 0.0
    # the count bonus changes every frame and is never planned through
    target_mode = {"select": 0, "plan": 0, "reward": 1, "bootstrap": 2}[cfg.bonus_target]
    st = np.zeros(4)
    st[0] = int(np.searchsorted(start_cum, rng.random(), side="right"))
    counts[int(st[0])] += 1.0
    model = feats = next_feats = None
    checkpoints = []
    if bonus_source == "csd":
        feat = StateFeaturizer(mdp, cfg.feature_k, seed, cfg.coord_scale)
        next_feats = feat.expected_next(mdp)
        spec = MlpSpec(feat.dim, tuple(cfg.hidden_widths), "relu", bias_scale=cfg.bias_scale, seed=seed)
        prior = init_mlp(spec)
        model = make_csd_model(prior, cfg.embed_dim, seed=seed)
        model.trained = True  # an untouched small-init model is the intended starting bonus
        bonus_tab = _csd_bonus_table(model, next_feats, cfg, mdp)
        feats = feat
    visited = [np.array([st[0]], dtype=int)]
    rets, frs, betas = [], [], []
    done_frames = 0
    while done_frames < cfg.frames:
        n = min(cfg.retrain_frames, cfg.frames - done_frames)
        U = rng.random((n, 4))
        out_r, out_f, out_b = np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n)
        vis = np.zeros(n, dtype=np.int64)
        k = _accel.q_chunk(Q, counts, bonus_tab, bonus_source == "count_oracle", beta_i, beta_f,
                           float(schedule.decay_frames), mdp.P, cumP, mdp.reward, mdp.terminal,
                           start_cum, mdp.gamma, cfg.alpha_q, cfg.epsilon, cfg.tie_break == "random",
                           target_mode, mdp.cap, st, U, out_r, out_f, out_b, vis)
        rets.append(out_r[:k])
        frs.append(out_f[:k])
        betas.append(out_b[:k])
        visited.append(vis)
        done_frames += n
        if cfg.episodes is not None and sum(len(r) for r in rets) >= cfg.episodes:
            break
        if cfg.stop_on_success and np.any(out_r[:k] > 0):
            break
        if bonus_source == "csd" and done_frames < cfg.frames:
            buf = feats(np.concatenate(visited))
            if cfg.reset_csd:
                model = make_csd_model(model.prior, cfg.embed_dim, seed=seed)
            tc = TrainConfig(cfg.csd_lr, cfg.csd_steps, min(cfg.csd_batch, buf.shape[0]), 0.0,
                             seed + done_frames)
            train_csd(model, buf, ReuseTrain(), tc)
            bonus_tab = _csd_bonus_table(model, next_feats, cfg, mdp)
            state_var = predict_variance(model, feats.table)
            top = np.argsort(-counts, kind="stable")[:10]
            never = np.flatnonzero(counts == 0)
            checkpoints.append({
                "frame": done_frames,
                "frequent": float(state_var[top].mean()),
                "unvisited": float(state_var[never].mean()) if never.size else float("nan"),
            })
    returns = np.concatenate(rets)
    frames = np.concatenate(frs)
    betas_arr = np.concatenate(betas)
    if cfg.episodes is not None:
        returns, frames, betas_arr = returns[:cfg.episodes], frames[:cfg.episodes], betas_arr[:cfg.episodes]
    return LearningCurve(int(seed), bonus_source, returns, frames, betas_arr, counts.copy(), checkpoints)
