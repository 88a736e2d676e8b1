#!/usr/bin/env python3
"""Compiled Q-learning loop against its pure-Python fallback.

Run ``python3 benchmarks/bench_accel.py``.  The numba timings exclude the
first (compiling) call; results are checked for bit-equality first.
"""
import argparse
import time

import numpy as np

from csdkit import _accel
from csdkit.explore import chain


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def _q_args(frames, seed=0):
    mdp = chain(40)
    S, A = mdp.n_states, mdp.n_actions
    rng = np.random.default_rng(seed)
    st = np.zeros(4)
    return (np.zeros((S, A)), np.zeros(S), np.zeros((S, A)), True, 0.1, 0.01, 10_000.0,
            mdp.P, np.cumsum(mdp.P, axis=2), mdp.reward, mdp.terminal, np.cumsum(mdp.start),
            mdp.gamma, 0.5, 0.01, True, 0, mdp.cap, st, rng.random((frames, 4)),
            np.zeros(frames), np.zeros(frames, dtype=np.int64), np.zeros(frames),
            np.zeros(frames, dtype=np.int64))


def bench_q(frames, repeat):
    a, b = _q_args(frames), _q_args(frames)
    ka, kb = _accel.q_chunk_numba(*a), _accel.q_chunk_python(*b)
    assert ka == kb
    np.testing.assert_array_equal(a[0], b[0])
    return (best_of(lambda: _accel.q_chunk_numba(*_q_args(frames)), repeat),
            best_of(lambda: _accel.q_chunk_python(*_q_args(frames)), max(1, repeat // 5)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=20_000, help="Q-learning frames")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _accel.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    q_nb, q_py = bench_q(args.frames, args.repeat)
    print(f"q_chunk   frames={args.frames:<6} numba {q_nb * 1e3:8.2f} ms   python {q_py * 1e3:8.1f} ms   "
          f"speedup {q_py / q_nb:6.1f}x")


if __name__ == "__main__":
    main()
