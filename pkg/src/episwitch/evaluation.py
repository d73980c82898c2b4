"""Model comparison and forecast evaluation.

WAIC, posterior-predictive K-step forecasts, one-week-ahead fitted values,
ranked probability scores, averaged rps and the paired permutation test.
Everything here is a pure function of a panel plus posterior draws; all
randomness flows through explicit seeds via named substreams.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distributions import sample_ztnb_grid
from .mcmc import InsufficientDrawsError, PosteriorDraws
from .model import (
    Family,
    LatentStates,
    LikelihoodEvaluator,
    ModelSpec,
    predictive_logdens,
)
from .panel import CountPanel
from .util import substream


class EvaluationError(RuntimeError):
    pass


class NumericalError(EvaluationError):
    """A predictive density underflowed to zero for an identified observation."""


class PairingError(EvaluationError):
    """Score lists do not line up cell-for-cell."""


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# posterior draw plumbing


def _select_draws(draws: PosteriorDraws, max_draws, seed: int, tag: str) -> np.ndarray:
    total = sum(c.shape[0] for c in draws.chains)
    if total == 0:
        raise InsufficientDrawsError("no posterior draws available")
    if max_draws is None or total <= int(max_draws):
        return np.arange(total)
    rng = substream(seed, tag)
    return np.sort(rng.choice(total, size=int(max_draws), replace=False))


@dataclass
class _DrawFields:
    """Per-draw parameter columns pulled out of the flat draw matrix.

    Shapes: scalars are (M,), covariate blocks (M, D), random effects (M, N).
    Tied classical blocks are materialized on both transition rows; families
    without a block get zeros so downstream formulas need no branching.
    """

    beta_ar: np.ndarray
    beta2_en: np.ndarray
    beta3_en: np.ndarray
    alpha0_re: np.ndarray
    alpha_re: np.ndarray
    gamma_re: np.ndarray
    alpha0_pe: np.ndarray
    alpha_pe: np.ndarray
    delta_pe: np.ndarray
    gamma_pe: np.ndarray
    alpha0_od: np.ndarray
    alpha_od: np.ndarray
    delta_od: np.ndarray
    b0: np.ndarray
    b: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.b0.shape[0]


def _draw_fields(draws: PosteriorDraws, sel: np.ndarray) -> _DrawFields:
    lay = draws.layout
    st = draws.stacked()[sel]
    m = st.shape[0]
    d = lay.n_covariates
    z = np.zeros(m)
    zd = np.zeros((m, d))
    blocks = lay.blocks
    ar = st[:, blocks["ar"]]
    en = st[:, blocks["en"]]
    od = st[:, blocks["overdispersion"]]
    kw = dict(
        beta_ar=ar[:, 1 : 1 + d],
        beta2_en=en[:, 2],
        beta3_en=en[:, 3],
        alpha0_od=od[:, 0],
        delta_od=od[:, 1],
        alpha_od=od[:, 2 : 2 + d],
        b0=st[:, lay.b0_idx],
        b=st[:, lay.b_idx],
    )
    if "reemergence" in blocks:
        re = st[:, blocks["reemergence"]]
        pe = st[:, blocks["persistence"]]
        kw.update(
            alpha0_re=re[:, 0],
            alpha_re=re[:, 1 : 1 + d],
            gamma_re=re[:, 1 + d] if lay.spatial else z,
            alpha0_pe=pe[:, 0],
            delta_pe=pe[:, 1],
            alpha_pe=pe[:, 2 : 2 + d],
            gamma_pe=pe[:, 2 + d] if lay.spatial else z,
        )
    elif "presence" in blocks:
        pr = st[:, blocks["presence"]]
        kw.update(
            alpha0_re=pr[:, 0],
            alpha_re=pr[:, 2 : 2 + d],
            gamma_re=z,
            alpha0_pe=pr[:, 0],
            delta_pe=pr[:, 1],
            alpha_pe=pr[:, 2 : 2 + d],
            gamma_pe=z,
        )
    else:
        kw.update(
            alpha0_re=z, alpha_re=zd, gamma_re=z,
            alpha0_pe=z, delta_pe=z, alpha_pe=zd, gamma_pe=z,
        )
    return _DrawFields(**kw)


@dataclass
class _DrawBases:
    """Static per-(draw, area) linear predictors, all (M, N)."""

    ar_mult: np.ndarray  # exp(b0_i + g_i' beta_ar), multiplies y_{t-1}
    en_base: np.ndarray  # b_i; seasonal terms are added per week
    od_base: np.ndarray
    re_base: np.ndarray
    pe_base: np.ndarray
    fields: _DrawFields

    @classmethod
    def build(cls, f: _DrawFields, g: np.ndarray) -> "_DrawBases":
        return cls(
            ar_mult=np.exp(f.b0 + f.beta_ar @ g.T),
            en_base=f.b,
            od_base=f.alpha0_od[:, None] + f.alpha_od @ g.T,
            re_base=f.alpha0_re[:, None] + f.alpha_re @ g.T,
            pe_base=f.alpha0_pe[:, None] + f.alpha_pe @ g.T,
            fields=f,
        )

    def mu_at(self, y_prev: np.ndarray, sin_t: float, cos_t: float) -> np.ndarray:
        f = self.fields
        en = np.exp(self.en_base + f.beta2_en[:, None] * sin_t + f.beta3_en[:, None] * cos_t)
        return self.ar_mult * y_prev + en

    def r_at(self, y_prev: np.ndarray) -> np.ndarray:
        f = self.fields
        return np.exp(self.od_base + f.delta_od[:, None] * np.log1p(y_prev))

    def trans_logits(self, y_prev: np.ndarray, s_prev: np.ndarray):
        f = self.fields
        l01 = self.re_base + f.gamma_re[:, None] * s_prev
        l11 = (
            self.pe_base
            + f.delta_pe[:, None] * np.log1p(y_prev)
            + f.gamma_pe[:, None] * s_prev
        )
        return l01, l11


def _nb_sample(rng: np.random.Generator, mu: np.ndarray, r: np.ndarray) -> np.ndarray:
    p = r / (r + mu)
    return rng.negative_binomial(r, p)


def _nb_zero_prob(mu: np.ndarray, r: np.ndarray) -> np.ndarray:
    return np.exp(-r * np.log1p(mu / r))


# ---------------------------------------------------------------------------
# WAIC


@dataclass(frozen=True)
class WaicResult:
    lpdd: float
    pwaic: float
    waic: float
    n_draws: int = 0

    def __iter__(self):
        return iter((self.lpdd, self.pwaic, self.waic))


def waic(
    panel: CountPanel,
    spec: ModelSpec,
    draws: PosteriorDraws,
    max_draws: int | None = None,
    seed: int = 0,
) -> WaicResult:
    """WAIC = -2 (lpdd - pwaic) from per-cell predictive log densities.

    Cells are (area, week) for weeks t >= 1; week 0 is conditioned on. For
    zs-msnb the density is conditional on each draw's sampled state path,
    which makes the number incomparable across families.
    """
    if spec.family.needs_augmentation:
        warnings.warn(
            "WAIC for zs-msnb families is conditional on the sampled states; "
            "comparing it against other families can be unfair",
            UserWarning,
            stacklevel=2,
        )
    sel = _select_draws(draws, max_draws, seed, "waic-subsample")
    st = draws.stacked()
    lat = draws.stacked_latent()
    if spec.family.needs_augmentation and lat is None:
        raise ValueError("zs-msnb WAIC needs stored latent draws (store_latent)")
    ev = LikelihoodEvaluator(panel, spec)
    forced = panel.counts > 0
    n, t = panel.counts.shape
    lse = np.full((n, t - 1), -np.inf)
    mean = np.zeros((n, t - 1))
    m2 = np.zeros((n, t - 1))
    count = 0
    for j in sel:
        theta = draws.layout.unpack(st[j])
        x = None
        if spec.family.needs_augmentation:
            x = LatentStates(x=lat[j].astype(np.int8), forced=forced)
        logp = predictive_logdens(panel, spec, theta, x, ev=ev)[:, 1:]
        bad = ~np.isfinite(logp)
        if bad.any():
            i, tt = np.argwhere(bad)[0]
            raise NumericalError(
                "zero predictive density at area "
                f"{panel.area_ids[i]}, week {panel.week_index[tt + 1]}"
            )
        count += 1
        lse = np.logaddexp(lse, logp)
        delta = logp - mean
        mean += delta / count
        m2 += delta * (logp - mean)
    lpd_cell = lse - np.log(count)
    var_cell = m2 / (count - 1) if count > 1 else np.zeros_like(m2)
    lpdd = float(lpd_cell.sum())
    pwaic = float(var_cell.sum())
    return WaicResult(lpdd=lpdd, pwaic=pwaic, waic=-2.0 * (lpdd - pwaic), n_draws=count)


# ---------------------------------------------------------------------------
# presence filtering shared by forecasting and fitted values


def _filter_step(w1, mu, r, l01, l11, y_t):
    """One forward-filter update for a marginalized two-state chain.

    w1 is P(x_{t-1}=1 | y up to t-1), all arrays (M, N); y_t is the observed
    week-t count vector (N,). Returns (filtered w1 at t, predictive
    presence probability before seeing y_t).
    """
    p01 = _sigmoid(l01)
    p11 = _sigmoid(l11)
    pred1 = (1.0 - w1) * p01 + w1 * p11
    nb0 = _nb_zero_prob(mu, r)
    num1 = np.where(y_t > 0, pred1, pred1 * nb0)
    num0 = np.where(y_t > 0, 0.0, 1.0 - pred1)
    tot = num1 + num0
    tot = np.where(tot <= 0, 1.0, tot)
    new_w1 = np.where(y_t > 0, 1.0, num1 / tot)
    return new_w1, pred1


def _filtered_presence_at(
    panel: CountPanel,
    bases: _DrawBases,
    ev: LikelihoodEvaluator,
    init_p: float,
    start_w1: np.ndarray | None,
    start_pos: int,
    end_pos: int,
) -> np.ndarray:
    """P(x_{end_pos}=1 | y up to end_pos) per draw, (M, N), spatial terms off.

    start_w1 None means start from week 0 (counts force x=1, otherwise the
    prior init probability); otherwise the filter is continued from start_pos.
    """
    y = panel.counts
    if start_w1 is None:
        w1 = np.where(y[:, 0] > 0, 1.0, init_p)[None, :] * np.ones(
            (bases.fields.n_draws, 1)
        )
        start_pos = 0
    else:
        w1 = start_w1.astype(float)
    for t in range(start_pos + 1, end_pos + 1):
        y_prev = y[:, t - 1][None, :].astype(float)
        mu = bases.mu_at(y_prev, float(ev.sin_t[t]), float(ev.cos_t[t]))
        r = bases.r_at(y_prev)
        l01, l11 = bases.trans_logits(y_prev, 0.0)
        w1, _ = _filter_step(w1, mu, r, l01, l11, y[:, t])
    return w1


# ---------------------------------------------------------------------------
# forecasting


@dataclass
class ForecastDraws:
    """Posterior-predictive sample paths from one origin week.

    samples[m, i, k-1] is the draw-m count for area i at week origin+k; each
    path is anchored at the observed counts of the origin week and evolves
    conditional on its own previous step.
    """

    origin: int
    horizon: int
    area_ids: list[str]
    samples: np.ndarray  # (M, N, K) int64
    presence_samples: np.ndarray | None = None  # (M, N, K) int8

    @property
    def n_paths(self) -> int:
        return self.samples.shape[0]

    def save_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["draw", "area_id", "k", "week", "count"]
            if self.presence_samples is not None:
                header.append("presence")
            w.writerow(header)
            m, n, kk = self.samples.shape
            for dm in range(m):
                for i in range(n):
                    for k in range(kk):
                        row = [
                            dm,
                            self.area_ids[i],
                            k + 1,
                            self.origin + k + 1,
                            int(self.samples[dm, i, k]),
                        ]
                        if self.presence_samples is not None:
                            row.append(int(self.presence_samples[dm, i, k]))
                        w.writerow(row)


def _origin_presence(
    panel: CountPanel,
    spec: ModelSpec,
    draws: PosteriorDraws,
    sel: np.ndarray,
    bases: _DrawBases,
    ev: LikelihoodEvaluator,
    pos: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Presence states at the origin week, one (M, N) 0/1 array."""
    fam = spec.family
    m = bases.fields.n_draws
    n = panel.n_areas
    y0 = panel.counts[:, pos]
    if fam is Family.NB:
        return np.ones((m, n), dtype=np.int8)
    if fam.is_hurdle:
        return np.broadcast_to((y0 > 0).astype(np.int8), (m, n)).copy()
    init_p = spec.prior.init_state_prob
    if fam is Family.ZINB:
        w1 = _filtered_presence_at(panel, bases, ev, init_p, None, 0, pos)
        return (rng.random((m, n)) < w1).astype(np.int8)
    # zs-msnb: reuse stored latent paths where the fit saw the week, extend
    # by filtering when the origin lies past the fitted window
    lat = draws.stacked_latent()
    if lat is None:
        raise ValueError("zs-msnb forecasting needs stored latent draws (store_latent)")
    lat = lat[sel]
    t_fit = lat.shape[2]
    if pos < t_fit:
        return lat[:, :, pos].astype(np.int8)
    if spec.spatial_terms:
        raise EvaluationError(
            "cannot extend latent states past the fitted window for a spatial "
            "model; refit including the origin week"
        )
    w1 = _filtered_presence_at(
        panel, bases, ev, init_p, lat[:, :, t_fit - 1].astype(float), t_fit - 1, pos
    )
    return (rng.random((m, n)) < w1).astype(np.int8)


def forecast(
    panel: CountPanel,
    spec: ModelSpec,
    draws: PosteriorDraws,
    origin: int,
    horizon: int,
    seed: int = 0,
    max_draws: int | None = None,
) -> ForecastDraws:
    """Simulate K weeks past the origin, one path per posterior draw.

    origin is a week value from the panel's index; the observed counts of
    that week anchor every path. Markov-switching paths draw presence from
    the transition model, hurdle paths force presence to track positivity,
    NB paths are counts only.
    """
    if horizon < 1:
        raise ValueError("forecast horizon must be a positive integer")
    weeks = list(panel.week_index)
    if origin not in weeks:
        raise ValueError(f"origin week {origin} is not in the panel")
    pos = weeks.index(origin)
    sel = _select_draws(draws, max_draws, seed, "forecast-subsample")
    f = _draw_fields(draws, sel)
    ev = LikelihoodEvaluator(panel, spec)
    bases = _DrawBases.build(f, ev.g)
    rng = substream(seed, "forecast", pos)
    fam = spec.family
    m, n = f.n_draws, panel.n_areas
    adj = panel.adjacency.astype(float)
    period = spec.seasonal_period

    x_prev = _origin_presence(panel, spec, draws, sel, bases, ev, pos, rng).astype(float)
    y_prev = np.broadcast_to(panel.counts[:, pos].astype(float), (m, n)).copy()
    samples = np.zeros((m, n, horizon), dtype=np.int64)
    presence = None if fam is Family.NB else np.zeros((m, n, horizon), dtype=np.int8)

    for k in range(1, horizon + 1):
        w = origin + k
        sin_t = np.sin(2.0 * np.pi * w / period)
        cos_t = np.cos(2.0 * np.pi * w / period)
        mu = bases.mu_at(y_prev, sin_t, cos_t)
        r = bases.r_at(y_prev)
        if fam is Family.NB:
            x = np.ones((m, n))
        else:
            s_prev = x_prev @ adj if spec.spatial_terms else 0.0
            l01, l11 = bases.trans_logits(y_prev, s_prev)
            p = _sigmoid(np.where(x_prev > 0, l11, l01))
            x = (rng.random((m, n)) < p).astype(float)
        if fam.is_hurdle:
            y = np.zeros((m, n), dtype=np.int64)
            present = x > 0
            if present.any():
                y[present] = sample_ztnb_grid(mu[present], r[present], rng)
        else:
            y = np.where(x > 0, _nb_sample(rng, mu, r), 0)
        samples[:, :, k - 1] = y
        if presence is not None:
            presence[:, :, k - 1] = x.astype(np.int8)
        y_prev = y.astype(float)
        x_prev = x
    return ForecastDraws(
        origin=int(origin),
        horizon=int(horizon),
        area_ids=list(panel.area_ids),
        samples=samples,
        presence_samples=presence,
    )


# ---------------------------------------------------------------------------
# one-week-ahead fitted values


@dataclass
class FittedValues:
    """Per-cell one-week-ahead summaries; column 0 of the count fields is nan.

    mean averages each draw's conditional expectation of y_it given week t-1
    (and, for zs-msnb, the draw's state at t); the interval is empirical over
    one sampled count per draw. presence is P(X_it = 1 | y).
    """

    area_ids: list[str]
    week_index: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    presence: np.ndarray

    def save_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["area_id", "week", "mean", "lower", "upper", "presence"])
            for i, aid in enumerate(self.area_ids):
                for t, wk in enumerate(self.week_index):
                    w.writerow(
                        [
                            aid,
                            int(wk),
                            repr(float(self.mean[i, t])),
                            repr(float(self.lower[i, t])),
                            repr(float(self.upper[i, t])),
                            repr(float(self.presence[i, t])),
                        ]
                    )


def _ztnb_mean_grid(mu: np.ndarray, r: np.ndarray) -> np.ndarray:
    kappa = -np.expm1(-r * np.log1p(mu / r))
    return mu / kappa


def fitted_values(
    panel: CountPanel,
    spec: ModelSpec,
    draws: PosteriorDraws,
    seed: int = 0,
    max_draws: int | None = 500,
) -> FittedValues:
    fam = spec.family
    sel = _select_draws(draws, max_draws, seed, "fitted-subsample")
    f = _draw_fields(draws, sel)
    ev = LikelihoodEvaluator(panel, spec)
    bases = _DrawBases.build(f, ev.g)
    rng = substream(seed, "fitted")
    m = f.n_draws
    n, t_len = panel.counts.shape
    y = panel.counts
    ypos = y > 0

    lat = None
    if fam.needs_augmentation:
        sl = draws.stacked_latent()
        if sl is None:
            raise ValueError("zs-msnb fitted values need stored latent draws")
        lat = sl[sel]

    mean_sum = np.zeros((n, t_len))
    sampled = np.zeros((m, n, t_len), dtype=np.int64)
    presence = np.ones((n, t_len))
    init_p = spec.prior.init_state_prob

    # ZINB needs the full filter history for smoothing
    zi_filt = zi_p01 = zi_p11 = None
    if fam is Family.ZINB:
        zi_filt = np.zeros((m, n, t_len))
        zi_p01 = np.zeros((m, n, t_len))
        zi_p11 = np.zeros((m, n, t_len))
        zi_filt[:, :, 0] = np.where(ypos[:, 0], 1.0, init_p)

    w1 = np.where(ypos[:, 0], 1.0, init_p)[None, :] * np.ones((m, 1))
    for t in range(1, t_len):
        y_prev = y[:, t - 1][None, :].astype(float)
        mu = bases.mu_at(y_prev, float(ev.sin_t[t]), float(ev.cos_t[t]))
        r = bases.r_at(y_prev)
        if fam is Family.NB:
            mean_sum[:, t] = mu.mean(axis=0)
            sampled[:, :, t] = _nb_sample(rng, mu, r)
        elif fam.is_hurdle:
            s_prev = (
                (ev.adj @ ypos[:, t - 1].astype(float))[None, :]
                if spec.spatial_terms
                else 0.0
            )
            l01, l11 = bases.trans_logits(y_prev, s_prev)
            p = _sigmoid(np.where(ypos[:, t - 1][None, :], l11, l01))
            mean_sum[:, t] = (p * _ztnb_mean_grid(mu, r)).mean(axis=0)
            pres = rng.random((m, n)) < p
            ys = np.zeros((m, n), dtype=np.int64)
            if pres.any():
                ys[pres] = sample_ztnb_grid(mu[pres], r[pres], rng)
            sampled[:, :, t] = ys
        elif fam is Family.ZINB:
            l01, l11 = bases.trans_logits(y_prev, 0.0)
            p01 = _sigmoid(l01)
            p11 = _sigmoid(l11)
            pred1 = (1.0 - w1) * p01 + w1 * p11
            mean_sum[:, t] = (pred1 * mu).mean(axis=0)
            pres = rng.random((m, n)) < pred1
            sampled[:, :, t] = np.where(pres, _nb_sample(rng, mu, r), 0)
            w1, _ = _filter_step(w1, mu, r, l01, l11, y[:, t])
            zi_filt[:, :, t] = w1
            zi_p01[:, :, t] = p01
            zi_p11[:, :, t] = p11
        else:
            # zs-msnb: condition on each draw's sampled state at week t
            x_t = lat[:, :, t].astype(float)
            mean_sum[:, t] = (x_t * mu).mean(axis=0)
            sampled[:, :, t] = np.where(x_t > 0, _nb_sample(rng, mu, r), 0)

    if fam is Family.NB:
        presence[:] = 1.0
    elif fam.needs_augmentation:
        presence = lat.astype(float).mean(axis=0)
    elif fam.is_hurdle:
        presence = ypos.astype(float)
    else:
        presence = _zi_smoothed(zi_filt, zi_p01, zi_p11).mean(axis=0)

    mean = mean_sum
    mean[:, 0] = np.nan
    lo, hi = np.percentile(sampled, [2.5, 97.5], axis=0)
    lo[:, 0] = np.nan
    hi[:, 0] = np.nan
    return FittedValues(
        area_ids=list(panel.area_ids),
        week_index=panel.week_index.copy(),
        mean=mean,
        lower=lo,
        upper=hi,
        presence=presence,
    )


def _zi_smoothed(filt: np.ndarray, p01: np.ndarray, p11: np.ndarray) -> np.ndarray:
    """Backward pass turning filtered P(x_t|y_1:t) into P(x_t|y_1:T), (M,N,T)."""
    m, n, t_len = filt.shape
    out = np.empty_like(filt)
    out[:, :, -1] = filt[:, :, -1]
    eps = 1e-12
    for t in range(t_len - 2, -1, -1):
        f_t = filt[:, :, t]
        a01 = p01[:, :, t + 1]
        a11 = p11[:, :, t + 1]
        pred = np.clip((1.0 - f_t) * a01 + f_t * a11, eps, 1.0 - eps)
        g_next = out[:, :, t + 1]
        r1 = g_next * (a11 / pred) + (1.0 - g_next) * ((1.0 - a11) / (1.0 - pred))
        r0 = g_next * (a01 / pred) + (1.0 - g_next) * ((1.0 - a01) / (1.0 - pred))
        num1 = f_t * r1
        num0 = (1.0 - f_t) * r0
        tot = num1 + num0
        tot = np.where(tot <= 0, 1.0, tot)
        out[:, :, t] = num1 / tot
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# ranked probability score


def rps_samples(sample_draws, y_obs: int) -> float:
    """rps of an empirical forecast pmf against one observed count.

    Sum over j of (Phat(j) - I[y_obs <= j])^2, truncated at
    max(max draw, y_obs); beyond that both CDFs are exactly 1.
    """
    arr = np.asarray(sample_draws).ravel()
    if arr.size < 2:
        raise ValueError("rps needs at least 2 forecast samples")
    arr = arr.astype(np.int64)
    y_obs = int(y_obs)
    if y_obs < 0 or arr.min() < 0:
        raise ValueError("counts must be nonnegative")
    j_max = int(max(arr.max(), y_obs))
    cdf = np.cumsum(np.bincount(arr, minlength=j_max + 1)) / arr.size
    step = np.arange(j_max + 1) >= y_obs
    return float(np.sum((cdf - step) ** 2))


def rps(fc: ForecastDraws, observed, i: int, k: int) -> float:
    """rps of area i at horizon k (1-based) against the observed N x K block."""
    obs = np.asarray(observed)
    if not 1 <= k <= fc.horizon:
        raise ValueError(f"horizon index {k} outside 1..{fc.horizon}")
    return rps_samples(fc.samples[:, i, k - 1], int(obs[i, k - 1]))


def averaged_rps(scores) -> float:
    """Arithmetic mean of rps values pooled over areas and origins."""
    arr = np.asarray(list(scores), dtype=float)
    if arr.size == 0:
        raise ValueError("empty scoring window")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError("rps values must be finite and nonnegative")
    return float(arr.mean())


# ---------------------------------------------------------------------------
# permutation test


def permutation_test(rps_a, rps_b, n_perm: int = 10000, rng=None) -> float:
    """Two-tailed paired sign-flip test for a mean rps difference.

    Enumerates all 2^n sign patterns when that is no more than n_perm,
    otherwise samples patterns; the sampled estimate counts the identity
    pattern, (1 + #extreme) / (n_perm + 1).
    """
    a = np.asarray(list(rps_a), dtype=float)
    b = np.asarray(list(rps_b), dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise PairingError(
            f"paired score lists differ in shape: {a.shape} vs {b.shape}"
        )
    if a.size == 0:
        raise PairingError("paired score lists are empty")
    if n_perm < 1:
        raise ValueError("n_perm must be positive")
    d = a - b
    n = d.size
    observed = abs(d.mean())
    if n <= 62 and 2 ** n <= n_perm:
        patterns = np.arange(2 ** n, dtype=np.uint64)
        signs = ((patterns[:, None] >> np.arange(n, dtype=np.uint64)) & 1).astype(
            np.int8
        )
        signs = 2 * signs - 1
        stats = np.abs(signs @ d) / n
        return float(np.mean(stats >= observed))
    if rng is None:
        rng = np.random.default_rng(0)
    elif isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    count = 0
    chunk = max(1, min(n_perm, 200_000 // max(n, 1)))
    done = 0
    while done < n_perm:
        take = min(chunk, n_perm - done)
        signs = rng.integers(0, 2, size=(take, n)) * 2 - 1
        stats = np.abs(signs @ d) / n
        count += int(np.sum(stats >= observed))
        done += take
    return float((1 + count) / (n_perm + 1))


# ---------------------------------------------------------------------------
# score reports


@dataclass
class ScoreReport:
    """Per-cell rps values for one model over a grid of origins and horizons."""

    model: str
    area_id: np.ndarray
    origin: np.ndarray
    k: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        self.area_id = np.asarray(self.area_id, dtype=object)
        self.origin = np.asarray(self.origin, dtype=np.int64)
        self.k = np.asarray(self.k, dtype=np.int64)
        self.score = np.asarray(self.score, dtype=float)
        order = np.lexsort((self.k, self.area_id.astype(str), self.origin))
        for name in ("area_id", "origin", "k", "score"):
            setattr(self, name, getattr(self, name)[order])

    @property
    def n_cells(self) -> int:
        return self.score.size

    def horizons(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.k))

    def averaged(self, k: int | None = None) -> float:
        mask = np.ones(self.n_cells, dtype=bool) if k is None else self.k == k
        return averaged_rps(self.score[mask])

    def by_horizon(self) -> dict[int, float]:
        return {kk: self.averaged(kk) for kk in self.horizons()}

    def cells(self) -> list[tuple]:
        return list(zip(self.area_id, self.origin, self.k))

    def paired_with(self, other: "ScoreReport") -> tuple[np.ndarray, np.ndarray]:
        if self.cells() != other.cells():
            raise PairingError(
                f"score reports for {self.model!r} and {other.model!r} cover "
                "different (area, origin, k) cells"
            )
        return self.score, other.score

    def to_rows(self) -> list[list]:
        return [
            [self.model, aid, int(t0), int(kk), repr(float(s))]
            for aid, t0, kk, s in zip(self.area_id, self.origin, self.k, self.score)
        ]


def write_score_csv(reports: list[ScoreReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "area_id", "origin", "k", "rps"])
        for rep in reports:
            w.writerows(rep.to_rows())


def read_score_csv(path) -> list[ScoreReport]:
    by_model: dict[str, list] = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        required = {"model", "area_id", "origin", "k", "rps"}
        if rd.fieldnames is None or not required.issubset(rd.fieldnames):
            raise ValueError(f"{path}: expected columns {sorted(required)}")
        for row in rd:
            by_model.setdefault(row["model"], []).append(
                (row["area_id"], int(row["origin"]), int(row["k"]), float(row["rps"]))
            )
    out = []
    for model, rows in by_model.items():
        aid, t0, k, s = zip(*rows)
        out.append(ScoreReport(model, np.array(aid, object), t0, k, s))
    return out


def score_forecasts(
    panel: CountPanel,
    spec: ModelSpec,
    draws: PosteriorDraws,
    origins,
    horizon: int,
    seed: int = 0,
    max_draws: int | None = None,
    model_label: str | None = None,
) -> ScoreReport:
    """Fixed-fit rolling evaluation: one posterior, forecasts from each origin.

    Horizon cells whose target week lies past the panel are skipped; an
    origin with no scorable cell at all is an error.
    """
    weeks = list(panel.week_index)
    label = model_label or spec.family.value
    aids, t0s, ks, scores = [], [], [], []
    for origin in origins:
        origin = int(origin)
        if origin not in weeks:
            raise ValueError(f"origin week {origin} is not in the panel")
        pos = weeks.index(origin)
        k_avail = min(horizon, panel.n_weeks - 1 - pos)
        if k_avail < 1:
            raise ValueError(f"no observed weeks after origin {origin}")
        fc = forecast(panel, spec, draws, origin, horizon, seed=seed, max_draws=max_draws)
        for k in range(1, k_avail + 1):
            y_k = panel.counts[:, pos + k]
            for i, aid in enumerate(panel.area_ids):
                aids.append(aid)
                t0s.append(origin)
                ks.append(k)
                scores.append(rps_samples(fc.samples[:, i, k - 1], int(y_k[i])))
    return ScoreReport(label, np.array(aids, object), t0s, ks, scores)


def compare_reports(
    reports: list[ScoreReport], n_perm: int = 10000, seed: int = 0
) -> dict:
    """Averaged rps per horizon per model plus pairwise permutation p-values."""
    if not reports:
        raise ValueError("no score reports to compare")
    summary = {
        "models": [r.model for r in reports],
        "averaged_rps": {
            r.model: {str(k): v for k, v in r.by_horizon().items()} for r in reports
        },
        "p_values": [],
        "best_by_horizon": {},
    }
    horizons = sorted({k for r in reports for k in r.horizons()})
    for k in horizons:
        vals = {r.model: r.by_horizon().get(k) for r in reports}
        vals = {mdl: v for mdl, v in vals.items() if v is not None}
        summary["best_by_horizon"][str(k)] = min(vals, key=vals.get)
    if len(reports) == 1:
        warnings.warn(
            "only one score report given; the comparison matrix is degenerate",
            UserWarning,
            stacklevel=2,
        )
        return summary
    rng = substream(seed, "permutation")
    for ia in range(len(reports)):
        for ib in range(ia + 1, len(reports)):
            a, b = reports[ia].paired_with(reports[ib])
            p = permutation_test(a, b, n_perm=n_perm, rng=rng)
            summary["p_values"].append(
                {
                    "model_a": reports[ia].model,
                    "model_b": reports[ib].model,
                    "mean_rps_a": float(np.mean(a)),
                    "mean_rps_b": float(np.mean(b)),
                    "p_value": p,
                }
            )
    return summary
