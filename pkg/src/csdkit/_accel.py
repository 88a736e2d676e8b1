"""Compiled Q-learning inner loop with a pure-Python fallback.

Set ``CSDKIT_NO_NUMBA=1`` to force the fallback (also used when numba is
missing).  Both paths consume identical inputs, including pre-drawn uniforms,
so they produce bit-identical results.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_DISABLED = os.environ.get("CSDKIT_NO_NUMBA", "").strip().lower() not in ("", "0", "false")
ENABLED = numba is not None and not NUMBA_DISABLED


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)


def _q_chunk_loop(Q, counts, bonus_tab, use_counts, beta_init, beta_final, decay_frames,
                  P, cumP, reward, terminal, start_cum, gamma, alpha, eps, tie_random,
                  target_mode, cap, st, U, out_ret, out_frames, out_beta, visited):
    """Run ``U.shape[0]`` tabular Q-learning frames in place.

    ``st`` is ``[state, episode_frame, total_frames, episode_return]`` (float64)
    and ``U`` holds four uniforms per frame: explore, action, transition,
    restart.  Returns the number of finished episodes; their return, end
    frame and bonus weight go to ``out_*``.

    ``target_mode`` says where the bonus enters the TD target: 0 nowhere
    (action selection only), 1 as an added reward, 2 inside the bootstrap
    ``max_a' Q(s', a') + beta * b(s', a')``.
    """
    n_actions = Q.shape[1]
    n_states = Q.shape[0]
    s = int(st[0])
    ep_frame = int(st[1])
    total = int(st[2])
    ep_ret = float(st[3])
    n_done = 0
    scores = np.empty(n_actions)
    bvals = np.empty(n_actions)
    for t in range(U.shape[0]):
        if total >= decay_frames:
            beta = beta_final
        else:
            beta = beta_init + (beta_final - beta_init) * (total / decay_frames)
        for a in range(n_actions):
            if use_counts:
                b = 0.0
                for k in range(n_states):
                    if P[s, a, k] > 0.0:
                        b += P[s, a, k] / np.sqrt(counts[k] + 1.0)
            else:
                b = bonus_tab[s, a]
            bvals[a] = b
            scores[a] = Q[s, a] + beta * b
        if U[t, 0] < eps:
            act = int(U[t, 1] * n_actions)
        else:
            best = scores[0]
            for a in range(1, n_actions):
                if scores[a] > best:
                    best = scores[a]
            n_ties = 0
            for a in range(n_actions):
                if scores[a] == best:
                    n_ties += 1
            pick = int(U[t, 1] * n_ties) if tie_random else 0
            act = 0
            for a in range(n_actions):
                if scores[a] == best:
                    if pick == 0:
                        act = a
                        break
                    pick -= 1
        s2 = n_states - 1
        for k in range(n_states):
            if U[t, 2] < cumP[s, act, k]:
                s2 = k
                break
        r = reward[s2]
        r_td = r + beta * bvals[act] if target_mode == 1 else r
        if terminal[s2]:
            target = r_td
        else:
            qmax = -np.inf
            for a in range(n_actions):
                q = Q[s2, a]
                if target_mode == 2:
                    if use_counts:
                        b = 0.0
                        for k in range(n_states):
                            if P[s2, a, k] > 0.0:
                                b += P[s2, a, k] / np.sqrt(counts[k] + 1.0)
                    else:
                        b = bonus_tab[s2, a]
                    q += beta * b
                if q > qmax:
                    qmax = q
            target = r_td + gamma * qmax
        Q[s, act] += alpha * (target - Q[s, act])
        counts[s2] += 1.0
        visited[t] = s2
        ep_ret += r
        ep_frame += 1
        total += 1
        if terminal[s2] or ep_frame >= cap:
            out_ret[n_done] = ep_ret
            out_frames[n_done] = total
            out_beta[n_done] = beta
            n_done += 1
            s = n_states - 1
            for k in range(n_states):
                if U[t, 3] < start_cum[k]:
                    s = k
                    break
            counts[s] += 1.0
            ep_frame = 0
            ep_ret = 0.0
        else:
            s = s2
    st[0] = s
    st[1] = ep_frame
    st[2] = total
    st[3] = ep_ret
    return n_done


q_chunk_numba = _jit(_q_chunk_loop)
q_chunk_python = _q_chunk_loop


def q_chunk(*args):
    return q_chunk_numba(*args) if ENABLED else q_chunk_python(*args)
