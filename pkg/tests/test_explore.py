import numpy as np
import pytest

from csdkit.errors import ConfigError
from csdkit.explore import (
    LEFT, RIGHT, BonusSchedule, LearningCurve, QConfig, StateFeaturizer, bonus_beta, chain, gridworld,
    plan_bonus, q_learning_with_bonus, write_curves_csv,
)


def test_bonus_beta_schedule():
    s = BonusSchedule()
    assert bonus_beta(0, s) == 0.1
    assert bonus_beta(10_000, s) == 0.01
    assert bonus_beta(50_000, s) == 0.01
    assert bonus_beta(5_000, s) == pytest.approx(0.055)
    with pytest.raises(ValueError):
        bonus_beta(-1, s)
    with pytest.raises(ConfigError):
        BonusSchedule(beta_init=0.01, beta_final=0.1)


def test_chain_structure():
    m = chain(5)
    assert m.P[0, LEFT, 0] == 1.0 and m.P[2, RIGHT, 3] == 1.0 and m.P[4, RIGHT, 4] == 1.0
    assert m.terminal.tolist() == [False] * 4 + [True]
    assert m.cap == 10
    np.testing.assert_array_equal(m.goal_distance(), [4, 3, 2, 1, 0])


def test_gridworld_walls_and_validation():
    g = gridworld(3, 3, walls=[(1, 0), (1, 1)])
    assert g.P[0, RIGHT, 0] == 1.0  # blocked by the wall at (1, 0)
    assert g.goal_distance()[0] == 4  # up the left column, then across the top
    with pytest.raises(ConfigError):
        gridworld(3, 3, walls=[(1, 0), (1, 1), (1, 2)])
    with pytest.raises(ConfigError):
        gridworld(2, 2, walls=[(0, 0)])


def test_reward_free_chain_returns_zero():
    m = chain(10, gamma=0.0, goal_reward=0.0)
    c = q_learning_with_bonus(m, "none", cfg=QConfig(frames=2000), seed=0)
    assert len(c.returns) > 0 and np.all(c.returns == 0)
    assert c.first_success_frame is None and not c.solved_within(2000)


def test_greedy_without_bonus_never_reaches_far_goal():
    # all-zero Q with first-index ties always moves left
    m = chain(40)
    c = q_learning_with_bonus(m, "none", cfg=QConfig(frames=20_000, epsilon=0.0, tie_break="first"), seed=0)
    assert c.first_success_frame is None
    assert c.visits[1:].sum() == 0


def test_curves_deterministic_per_seed():
    m = chain(12)
    cfg = QConfig(frames=1500, retrain_frames=500, csd_steps=50)
    for src in ("none", "count_oracle", "csd"):
        a = q_learning_with_bonus(m, src, cfg=cfg, seed=4)
        b = q_learning_with_bonus(m, src, cfg=cfg, seed=4)
        np.testing.assert_array_equal(a.returns, b.returns)
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.visits, b.visits)
        for ca, cb in zip(a.checkpoints, b.checkpoints, strict=True):
            np.testing.assert_array_equal(list(ca.values()), list(cb.values()))


def test_count_oracle_solves_short_chain():
    c = q_learning_with_bonus(chain(15), "count_oracle", cfg=QConfig(frames=3000), seed=0)
    assert c.solved_within(3000)


def test_csd_bonus_lower_at_frequent_states():
    m = chain(40)
    cfg = QConfig(frames=3000)
    frequent, unvisited = [], []
    for seed in range(3):
        c = q_learning_with_bonus(m, "csd", cfg=cfg, seed=seed)
        assert len(c.checkpoints) == 5
        frequent.append([cp["frequent"] for cp in c.checkpoints])
        unvisited.append([cp["unvisited"] for cp in c.checkpoints])
    # seed mean at every checkpoint that still has unvisited states
    unv = np.array(unvisited)
    has = np.isfinite(unv).any(axis=0)
    assert has.sum() >= 3
    assert np.all(np.mean(frequent, axis=0)[has] < np.nanmean(unv[:, has], axis=0))


def test_plan_bonus_fixed_point():
    m = chain(8, gamma=0.9)
    b = np.random.default_rng(0).random((8, 2))
    B = plan_bonus(m, b)
    V = B.max(axis=1)
    V[m.terminal] = m.start @ V
    np.testing.assert_allclose(B, b + m.gamma * (m.P @ V), atol=1e-10)
    # zero bonus everywhere except one state-action: the plan points toward it
    b = np.zeros((8, 2))
    b[5, RIGHT] = 1.0
    B = plan_bonus(m, b)
    assert np.all(B[:5, RIGHT] > B[:5, LEFT])


def test_episode_limit_and_stop_on_success():
    m = chain(6)
    c = q_learning_with_bonus(m, "count_oracle", cfg=QConfig(frames=5000, episodes=3), seed=1)
    assert len(c.returns) == 3
    c = q_learning_with_bonus(m, "count_oracle", cfg=QConfig(frames=5000, retrain_frames=100,
                                                              stop_on_success=True), seed=1)
    # frames are cumulative; the run ends at the first chunk boundary after a success
    assert c.first_success_frame is not None and c.frames[-1] <= 100
    assert np.all(np.diff(c.frames) > 0)


def test_featurizer(tmp_path):
    m = chain(6)
    f = StateFeaturizer(m, k=4, seed=0, coord_scale=2.0)
    assert f.dim == 6 + 2 + 4
    np.testing.assert_array_equal(f([2])[0, :6], np.eye(6)[2])
    E = f.expected_next(m)
    np.testing.assert_array_equal(E[2, RIGHT], f.table[3])


def test_curves_csv(tmp_path):
    c = LearningCurve(3, "none", np.array([0.0, 1.0]), np.array([5, 12]), np.array([0.1, 0.09]),
                      np.zeros(4))
    assert c.first_success_frame == 12
    write_curves_csv([c], tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["seed,episode,return,frames,beta", "3,0,0.0,5,0.1", "3,1,1.0,12,0.09"]


def test_config_validation():
    with pytest.raises(ConfigError):
        QConfig(bonus_target="value")
    with pytest.raises(ConfigError):
        QConfig(alpha_q=0.0)
    with pytest.raises(ConfigError):
        q_learning_with_bonus(chain(4), "rnd")
