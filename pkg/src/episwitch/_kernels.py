"""Sequential inner loops: 2-state forward recursion and latent-state sweep.

Both are written as plain-python array code and jitted with numba when it is
available; the undecorated functions are kept importable (suffix _py) so the
fallback path stays tested. No RNG lives in here: the sweep consumes a
pre-drawn uniform per cell, which keeps runs bit-reproducible and the kernel
compilable.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


NEG_INF = -np.inf


@njit(cache=True)
def _logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


@njit(cache=True)
def _logsig(v: float) -> float:
    # log sigmoid, stable on both tails
    if v >= 0.0:
        return -math.log1p(math.exp(-v))
    return v - math.log1p(math.exp(v))


def forward_zi_py(l01, l11, lognb, ypos, log_init1, log_init0):
    """Per-area 2-state forward pass for zero-inflated NB panels.

    State 0 emits a point mass at zero, state 1 emits NB(y; mu, r) whose
    log pmf arrives precomputed in `lognb`. Week 1 (column 0) contributes
    the initial prior only; positive counts force state 1.

    Returns (per-area loglik, per-cell one-step increments, filtered
    P(state 1 | counts up to t)).
    """
    n, t_len = lognb.shape
    total = np.zeros(n)
    inc = np.zeros((n, t_len))
    filt = np.zeros((n, t_len))
    for i in range(n):
        if ypos[i, 0]:
            w0, w1 = NEG_INF, 0.0
        else:
            w0, w1 = log_init0, log_init1
        filt[i, 0] = math.exp(w1)
        for t in range(1, t_len):
            a01 = _logsig(l01[i, t])
            a00 = _logsig(-l01[i, t])
            a11 = _logsig(l11[i, t])
            a10 = _logsig(-l11[i, t])
            nw1 = _logaddexp(w0 + a01, w1 + a11) + lognb[i, t]
            if ypos[i, t]:
                nw0 = NEG_INF
            else:
                nw0 = _logaddexp(w0 + a00, w1 + a10)
            c = _logaddexp(nw0, nw1)
            if c == NEG_INF or math.isnan(c):
                total[i] = NEG_INF
                break
            inc[i, t] = c
            total[i] += c
            w0 = nw0 - c
            w1 = nw1 - c
            filt[i, t] = math.exp(w1)
    return total, inc, filt


def latent_sweep_py(
    x,
    s,
    uniforms,
    obs_odds,
    forced,
    l01_base,
    l11_base,
    gamma1,
    gamma2,
    nei_idx,
    nei_ptr,
    init_logit,
):
    """One systematic Gibbs sweep over all free latent presence cells.

    x        (N, T) int8 states, updated in place
    s        (N, T) float64 neighbour presence counts, kept consistent with x
    uniforms (N, T) one pre-drawn uniform per cell (forced cells unused)
    obs_odds (N, T) emission log-odds of state 1 vs 0 (0.0 in column 0)
    forced   (N, T) uint8, cells pinned at state 1 by positive counts
    l01/l11_base  transition logits excluding the gamma * S term
    init_logit    log odds of the week-1 Bernoulli prior

    The full conditional of one cell collects its emission, the incoming
    transition, its own outgoing transition, and every neighbour's outgoing
    transition at t+1 (whose logits shift by gamma when this cell flips).
    Returns the number of state flips.
    """
    n, t_len = x.shape
    flips = 0
    spatial = gamma1 != 0.0 or gamma2 != 0.0
    for t in range(t_len):
        for i in range(n):
            if forced[i, t]:
                continue
            odds = obs_odds[i, t]
            if t == 0:
                odds += init_logit
            else:
                sp = s[i, t - 1]
                if x[i, t - 1]:
                    odds += l11_base[i, t] + gamma2 * sp
                else:
                    odds += l01_base[i, t] + gamma1 * sp
            if t + 1 < t_len:
                sc = s[i, t]
                l_on = l11_base[i, t + 1] + gamma2 * sc
                l_off = l01_base[i, t + 1] + gamma1 * sc
                if x[i, t + 1]:
                    odds += _logsig(l_on) - _logsig(l_off)
                else:
                    odds += _logsig(-l_on) - _logsig(-l_off)
                if spatial:
                    for k in range(nei_ptr[i], nei_ptr[i + 1]):
                        j = nei_idx[k]
                        s_base = s[j, t] - x[i, t]
                        if x[j, t]:
                            base = l11_base[j, t + 1]
                            gam = gamma2
                        else:
                            base = l01_base[j, t + 1]
                            gam = gamma1
                        lj_on = base + gam * (s_base + 1.0)
                        lj_off = base + gam * s_base
                        if x[j, t + 1]:
                            odds += _logsig(lj_on) - _logsig(lj_off)
                        else:
                            odds += _logsig(-lj_on) - _logsig(-lj_off)
            if odds >= 0.0:
                p1 = 1.0 / (1.0 + math.exp(-odds))
            else:
                e = math.exp(odds)
                p1 = e / (1.0 + e)
            new = 1 if uniforms[i, t] < p1 else 0
            if new != x[i, t]:
                x[i, t] = new
                flips += 1
                ds = 1.0 if new == 1 else -1.0
                for k in range(nei_ptr[i], nei_ptr[i + 1]):
                    s[nei_idx[k], t] += ds
    return flips


if HAVE_NUMBA:
    forward_zi = njit(cache=True)(forward_zi_py)
    latent_sweep = njit(cache=True)(latent_sweep_py)
else:  # pragma: no cover
    forward_zi = forward_zi_py
    latent_sweep = latent_sweep_py
