"""Model families for switching/zero-inflated/hurdle count panels.

Five families over an areal weekly count panel y_it:

* nb         plain negative binomial observation model
* zinb       zero-inflated NB with a 2-state Markov presence chain (exact
             marginal likelihood by forward recursion; no spatial coupling)
* nbh        NB hurdle with the same Markov presence structure; presence is
             observed as I[y > 0]
* zs-msnb    Markov-switching NB with latent presence states and optional
             spatial coupling through neighbours' previous states
* zs-msnbh   hurdle variant of zs-msnb (presence observed, spatial terms in
             the transition logits)

Observation mean decomposes as mu_it = exp(b0_i + g_i' beta_ar) * y_{i,t-1}
+ exp(b_i + beta2 sin + beta3 cos); overdispersion log r_it is linear in
area covariates and log(y_{i,t-1} + 1); presence transition logits are
linear in covariates, log(y_{i,t-1} + 1) (persistence only) and, when
spatial terms are on, the number of previously-present neighbours.

Week 1 of the panel is conditioned on, never modelled: every likelihood is
a product over weeks 2..T. Latent states at week 1 follow a Bernoulli prior
when y_i1 = 0 and are forced to "present" when y_i1 > 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from enum import Enum

import numpy as np
from scipy.special import gammaln

from . import _kernels
from .panel import CountPanel
from .util import canonical_json, log1mexp, logsigmoid, sha256_text


class SpecError(ValueError):
    """A ModelSpec is inconsistent with itself or with the panel."""


class CouplingError(ValueError):
    """An exact per-area recursion was requested for a spatially coupled model."""


class Family(str, Enum):
    NB = "nb"
    ZINB = "zinb"
    NBH = "nbh"
    ZS_MSNB = "zs-msnb"
    ZS_MSNBH = "zs-msnbh"

    @property
    def has_presence(self) -> bool:
        return self is not Family.NB

    @property
    def is_hurdle(self) -> bool:
        return self in (Family.NBH, Family.ZS_MSNBH)

    @property
    def is_markov_switching(self) -> bool:
        return self in (Family.ZS_MSNB, Family.ZS_MSNBH)

    @property
    def ties_transition_intercepts(self) -> bool:
        """Classical families share one set of presence coefficients across
        the two transition rows (reemergence keeps no own slope block)."""
        return self in (Family.ZINB, Family.NBH)

    @property
    def needs_augmentation(self) -> bool:
        return self is Family.ZS_MSNB


@dataclass(frozen=True)
class PriorSpec:
    """Priors: N(0, coef_sd^2) on coefficients, InvGamma(shape, rate) on
    sigma_b0^2, Uniform(0, sigma_b_upper] on sigma_b, Bernoulli
    (init_state_prob) on free week-1 presence states."""

    coef_sd: float = 100.0
    sigma_b0_sq_shape: float = 0.1
    sigma_b0_sq_rate: float = 0.1
    sigma_b_upper: float = 10.0
    init_state_prob: float = 0.5

    def validate(self) -> None:
        if self.coef_sd <= 0:
            raise SpecError("coef_sd must be > 0")
        if self.sigma_b0_sq_shape <= 0 or self.sigma_b0_sq_rate <= 0:
            raise SpecError("inverse-gamma hyperparameters must be > 0")
        if self.sigma_b_upper <= 0:
            raise SpecError("sigma_b_upper must be > 0")
        if not (0.0 < self.init_state_prob < 1.0):
            raise SpecError("init_state_prob must be in (0, 1)")


@dataclass
class ModelSpec:
    """Everything needed to interpret a panel as one of the five families."""

    family: Family
    covariates: list[str] | None = None  # None = all panel covariates
    spatial_terms: bool = False
    center_covariates: bool = True
    covariate_scales: dict[str, float] = field(default_factory=dict)
    seasonal_period: float = 52.0
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = Family(self.family)
        if self.spatial_terms and not self.family.is_markov_switching:
            raise SpecError(
                f"spatial terms require a markov-switching family, got {self.family.value}"
            )
        if self.seasonal_period <= 0:
            raise SpecError("seasonal_period must be > 0")
        self.prior.validate()

    def validate_against(self, panel: CountPanel) -> None:
        if self.covariates is not None:
            unknown = [c for c in self.covariates if c not in panel.covariate_names]
            if unknown:
                raise SpecError(f"unknown covariates {unknown}; panel has {panel.covariate_names}")
        for name in self.covariate_scales:
            if name not in (self.covariates or panel.covariate_names):
                raise SpecError(f"scale given for unused covariate {name!r}")
            if self.covariate_scales[name] <= 0:
                raise SpecError(f"scale for {name!r} must be > 0")

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "covariates": self.covariates,
            "spatial_terms": self.spatial_terms,
            "center_covariates": self.center_covariates,
            "covariate_scales": dict(self.covariate_scales),
            "seasonal_period": self.seasonal_period,
            "prior": {
                "coef_sd": self.prior.coef_sd,
                "sigma_b0_sq_shape": self.prior.sigma_b0_sq_shape,
                "sigma_b0_sq_rate": self.prior.sigma_b0_sq_rate,
                "sigma_b_upper": self.prior.sigma_b_upper,
                "init_state_prob": self.prior.init_state_prob,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        known = {
            "family",
            "covariates",
            "spatial_terms",
            "center_covariates",
            "covariate_scales",
            "seasonal_period",
            "prior",
        }
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown model spec fields: {sorted(extra)}")
        if "family" not in d:
            raise SpecError("model spec is missing 'family'")
        try:
            family = Family(d["family"])
        except ValueError:
            raise SpecError(
                f"unknown family {d['family']!r}; expected one of "
                f"{[f.value for f in Family]}"
            ) from None
        prior = PriorSpec(**d.get("prior", {}))
        return cls(
            family=family,
            covariates=d.get("covariates"),
            spatial_terms=bool(d.get("spatial_terms", False)),
            center_covariates=bool(d.get("center_covariates", True)),
            covariate_scales=d.get("covariate_scales", {}) or {},
            seasonal_period=float(d.get("seasonal_period", 52.0)),
            prior=prior,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise SpecError(f"model spec is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise SpecError("model spec JSON must be an object")
        return cls.from_dict(d)

    def fingerprint(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))


@dataclass
class ParameterState:
    """One point in parameter space; arrays sized for a given panel/spec.

    beta*_ar / beta*_en: observation mean. alpha*_reemerge / alpha*_persist:
    presence transition logits (reemergence = 0 -> 1, persistence = 1 -> 1).
    alpha*_overdisp: log overdispersion. delta_persist / delta_overdisp:
    slopes on log(y_prev + 1). gamma_*: spatial coupling. b0 / b: area
    random effects in the autoregressive and endemic means.
    """

    beta0_ar: float
    beta_ar: np.ndarray
    beta0_en: float
    beta1_en: float
    beta2_en: float
    beta3_en: float
    alpha0_reemerge: float
    alpha_reemerge: np.ndarray
    gamma_reemerge: float
    alpha0_persist: float
    alpha_persist: np.ndarray
    delta_persist: float
    gamma_persist: float
    alpha0_overdisp: float
    alpha_overdisp: np.ndarray
    delta_overdisp: float
    sigma_b0: float
    sigma_b: float
    b0: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for name in ("beta_ar", "alpha_reemerge", "alpha_persist", "alpha_overdisp", "b0", "b"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @classmethod
    def zeros(cls, n_areas: int, n_covariates: int) -> "ParameterState":
        d, n = n_covariates, n_areas
        return cls(
            beta0_ar=0.0,
            beta_ar=np.zeros(d),
            beta0_en=0.0,
            beta1_en=0.0,
            beta2_en=0.0,
            beta3_en=0.0,
            alpha0_reemerge=0.0,
            alpha_reemerge=np.zeros(d),
            gamma_reemerge=0.0,
            alpha0_persist=0.0,
            alpha_persist=np.zeros(d),
            delta_persist=0.0,
            gamma_persist=0.0,
            alpha0_overdisp=0.0,
            alpha_overdisp=np.zeros(d),
            delta_overdisp=0.0,
            sigma_b0=1.0,
            sigma_b=1.0,
            b0=np.zeros(n),
            b=np.zeros(n),
        )

    def copy(self) -> "ParameterState":
        return replace(
            self,
            beta_ar=self.beta_ar.copy(),
            alpha_reemerge=self.alpha_reemerge.copy(),
            alpha_persist=self.alpha_persist.copy(),
            alpha_overdisp=self.alpha_overdisp.copy(),
            b0=self.b0.copy(),
            b=self.b.copy(),
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = [float(x) for x in v] if isinstance(v, np.ndarray) else float(v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterState":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown parameter fields: {sorted(unknown)}")
        missing = known - set(d)
        if missing:
            raise ValueError(f"missing parameter fields: {sorted(missing)}")
        return cls(**d)

    def validate(self) -> None:
        if not (np.isfinite(self.sigma_b0) and self.sigma_b0 > 0):
            raise ValueError("sigma_b0 must be finite and > 0")
        if not (np.isfinite(self.sigma_b) and self.sigma_b > 0):
            raise ValueError("sigma_b must be finite and > 0")


def apply_constraints(theta: ParameterState, spec: ModelSpec) -> ParameterState:
    """Return a copy with the family's parameter ties applied.

    Classical families share one presence coefficient block between the two
    transition rows and carry no spatial terms; the NB family has no
    presence process at all (its presence parameters are zeroed so that the
    state is canonical).
    """
    out = theta.copy()
    fam = spec.family
    if fam is Family.NB:
        out.alpha0_reemerge = 0.0
        out.alpha_reemerge = np.zeros_like(out.alpha_reemerge)
        out.alpha0_persist = 0.0
        out.alpha_persist = np.zeros_like(out.alpha_persist)
        out.delta_persist = 0.0
        out.gamma_reemerge = 0.0
        out.gamma_persist = 0.0
        return out
    if fam.ties_transition_intercepts:
        out.alpha0_reemerge = out.alpha0_persist
        out.alpha_reemerge = out.alpha_persist.copy()
        out.gamma_reemerge = 0.0
        out.gamma_persist = 0.0
    elif not spec.spatial_terms:
        out.gamma_reemerge = 0.0
        out.gamma_persist = 0.0
    return out


@dataclass
class LatentStates:
    """Presence states x_it with a mask of cells pinned by positive counts."""

    x: np.ndarray  # (N, T) int8
    forced: np.ndarray  # (N, T) bool, True where y > 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int8)
        self.forced = np.asarray(self.forced, dtype=bool)
        if self.x.shape != self.forced.shape:
            raise ValueError("x and forced must share a shape")
        if np.any(self.x[self.forced] != 1):
            raise ValueError("forced cells must be in state 1")
        if np.any((self.x != 0) & (self.x != 1)):
            raise ValueError("states must be 0/1")

    @classmethod
    def from_counts(
        cls,
        counts: np.ndarray,
        fill: str = "zeros",
        p: float = 0.5,
        rng: np.random.Generator | None = None,
    ) -> "LatentStates":
        """States consistent with the counts: 1 wherever y > 0, zero cells
        either left absent ("zeros") or filled Bernoulli(p) ("bernoulli")."""
        forced = np.asarray(counts) > 0
        x = forced.astype(np.int8)
        if fill == "bernoulli":
            if rng is None:
                raise ValueError("bernoulli fill needs an rng")
            free = ~forced
            x[free] = (rng.random(int(free.sum())) < p).astype(np.int8)
        elif fill != "zeros":
            raise ValueError(f"unknown fill {fill!r}")
        return cls(x=x, forced=forced)

    def copy(self) -> "LatentStates":
        return LatentStates(x=self.x.copy(), forced=self.forced.copy())


def effective_design(panel: CountPanel, spec: ModelSpec) -> tuple[np.ndarray, list[str]]:
    """Scaled/centered (N, D) covariate matrix actually entering the model."""
    spec.validate_against(panel)
    names = list(spec.covariates) if spec.covariates is not None else list(panel.covariate_names)
    cols = [panel.covariate_names.index(nm) for nm in names]
    g = panel.covariates[:, cols].astype(float).copy()
    for k, nm in enumerate(names):
        scale = spec.covariate_scales.get(nm)
        if scale:
            g[:, k] /= scale
    if spec.center_covariates and g.size:
        g -= g.mean(axis=0)
    return g, names


class LikelihoodEvaluator:
    """Precomputes panel-derived constants and evaluates family likelihoods.

    All matrices are (N, T) with column 0 unused (week 1 is conditioned on).
    Methods returning "by_area" vectors give each area's log-likelihood
    contribution so that samplers can recompute only what a proposal touches.
    Non-finite evaluations (mean overflow etc.) come back as -inf so that
    Metropolis proposals into bad regions are rejected rather than crashing.
    """

    def __init__(self, panel: CountPanel, spec: ModelSpec):
        spec.validate_against(panel)
        self.panel = panel
        self.spec = spec
        self.family = spec.family
        self.n_areas, self.n_weeks = panel.counts.shape
        if self.n_weeks < 2:
            raise SpecError("panel needs at least 2 weeks; week 1 is conditioned on")
        self.g, self.covariate_names = effective_design(panel, spec)
        self.n_covariates = self.g.shape[1]

        y = panel.counts
        self.y = y
        self.ypos = y > 0
        self.y_prev = np.zeros_like(y)
        self.y_prev[:, 1:] = y[:, :-1]
        self.log_y1p_prev = np.log1p(self.y_prev.astype(float))
        w = panel.week_index.astype(float)
        self.sin_t = np.sin(2.0 * np.pi * w / spec.seasonal_period)
        self.cos_t = np.cos(2.0 * np.pi * w / spec.seasonal_period)
        self.log_pop = np.log(panel.populations)
        self.adj = panel.adjacency.astype(np.float64)

        # neighbour presence of observed positives at t-1, aligned to column t
        s_obs = self.adj @ self.ypos.astype(float)
        self.s_obs_prev = np.zeros_like(s_obs)
        self.s_obs_prev[:, 1:] = s_obs[:, :-1]

        # hurdle gather indices: cells with t >= 1 and y > 0
        pos = self.ypos.copy()
        pos[:, 0] = False
        self.pos_i, self.pos_t = np.nonzero(pos)
        self.y_pos = y[self.pos_i, self.pos_t].astype(float)
        self.gammaln_y1_pos = gammaln(self.y_pos + 1.0)

        lp = spec.prior.init_state_prob
        self.log_init1 = float(np.log(lp))
        self.log_init0 = float(np.log1p(-lp))

    # ---- parameter-dependent building blocks -------------------------------

    def mean_matrix(self, theta: ParameterState) -> np.ndarray:
        """mu_it for t >= 1 (column 0 is zero-filled)."""
        with np.errstate(over="ignore", invalid="ignore"):
            ar_mult = np.exp(theta.b0 + self.g @ theta.beta_ar)  # (N,)
            log_en = (
                theta.b[:, None]
                + theta.beta2_en * self.sin_t[None, :]
                + theta.beta3_en * self.cos_t[None, :]
            )
            mu = ar_mult[:, None] * self.y_prev + np.exp(log_en)
        mu[:, 0] = 0.0
        return mu

    def overdisp_matrix(self, theta: ParameterState) -> np.ndarray:
        with np.errstate(over="ignore"):
            log_r = (
                theta.alpha0_overdisp
                + (self.g @ theta.alpha_overdisp)[:, None]
                + theta.delta_overdisp * self.log_y1p_prev
            )
            r = np.exp(log_r)
        r[:, 0] = 1.0
        return r

    def transition_logits(self, theta: ParameterState, s_prev: np.ndarray | None = None):
        """(l01, l11) logits for columns t >= 1; s_prev holds neighbour
        presence counts at t-1 aligned to column t (zeros when spatial terms
        are off or the family has none)."""
        l01 = theta.alpha0_reemerge + (self.g @ theta.alpha_reemerge)[:, None] + np.zeros(
            (self.n_areas, self.n_weeks)
        )
        l11 = (
            theta.alpha0_persist
            + (self.g @ theta.alpha_persist)[:, None]
            + theta.delta_persist * self.log_y1p_prev
        )
        if s_prev is not None:
            l01 = l01 + theta.gamma_reemerge * s_prev
            l11 = l11 + theta.gamma_persist * s_prev
        return l01, l11

    def _nb_logpmf_matrix(self, y, mu, r) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            lq = -np.log1p(mu / r)
            out = (
                gammaln(y + r)
                - gammaln(r)
                - gammaln(y + 1.0)
                + r * lq
                + np.where(y > 0, y * (np.log(mu) - np.log(r + mu)), 0.0)
            )
        return out

    # ---- per-family components ---------------------------------------------

    def count_loglik_by_area(self, theta: ParameterState) -> np.ndarray:
        """Count-part contribution per area.

        nb family: NB log pmf over all cells t >= 1. Hurdle families: ZTNB
        log pmf over positive cells only (zero cells carry no count term).
        """
        mu = self.mean_matrix(theta)
        r = self.overdisp_matrix(theta)
        if self.family is Family.NB:
            ll = self._nb_logpmf_matrix(self.y.astype(float), mu, r)
            ll[:, 0] = 0.0
            out = ll.sum(axis=1)
        else:
            mu_p = mu[self.pos_i, self.pos_t]
            r_p = r[self.pos_i, self.pos_t]
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                lq = -np.log1p(mu_p / r_p)
                ll = (
                    gammaln(self.y_pos + r_p)
                    - gammaln(r_p)
                    - self.gammaln_y1_pos
                    + r_p * lq
                    + self.y_pos * (np.log(mu_p) - np.log(r_p + mu_p))
                    - log1mexp(r_p * lq)
                )
            out = np.zeros(self.n_areas)
            np.add.at(out, self.pos_i, ll)
        out[~np.isfinite(out)] = -np.inf
        return out

    def hurdle_trans_loglik_by_area(self, theta: ParameterState) -> np.ndarray:
        """Presence-transition contribution per area with x = I[y > 0]."""
        s_prev = self.s_obs_prev if (self.spec.spatial_terms or self.family.is_markov_switching) else None
        l01, l11 = self.transition_logits(theta, s_prev)
        prev_on = np.zeros_like(self.ypos)
        prev_on[:, 1:] = self.ypos[:, :-1]
        logit = np.where(prev_on, l11, l01)
        ll = np.where(self.ypos, logsigmoid(logit), logsigmoid(-logit))
        ll[:, 0] = 0.0
        out = ll.sum(axis=1)
        out[~np.isfinite(out)] = -np.inf
        return out

    def zi_forward(self, theta: ParameterState):
        """Exact 2-state forward pass for the zero-inflated family.

        Returns (per-area loglik (N,), one-step increments (N, T),
        filtered P(present | y up to t) (N, T)). Requires gamma = 0: with
        spatial coupling areas do not decouple and no per-area recursion
        exists.
        """
        if theta.gamma_reemerge != 0.0 or theta.gamma_persist != 0.0:
            raise CouplingError(
                "forward recursion needs gamma = 0; spatially coupled "
                "families require the joint latent-state likelihood"
            )
        mu = self.mean_matrix(theta)
        r = self.overdisp_matrix(theta)
        lognb = self._nb_logpmf_matrix(self.y.astype(float), mu, r)
        lognb[:, 0] = 0.0
        bad = ~np.isfinite(lognb)
        lognb[bad] = -np.inf
        l01, l11 = self.transition_logits(theta, None)
        total, inc, filt = _kernels.forward_zi(
            l01, l11, lognb, self.ypos.astype(np.uint8), self.log_init1, self.log_init0
        )
        return total, inc, filt

    def zs_obs_loglik_by_area(self, theta: ParameterState, x: np.ndarray) -> np.ndarray:
        """Observation part given latent states: NB at present cells, point
        mass at 0 at absent cells (impossible when y > 0)."""
        mu = self.mean_matrix(theta)
        r = self.overdisp_matrix(theta)
        on = x.astype(bool)
        on_mod = on.copy()
        on_mod[:, 0] = False
        i_on, t_on = np.nonzero(on_mod)
        yv = self.y[i_on, t_on].astype(float)
        ll = self._nb_logpmf_matrix(yv, mu[i_on, t_on], r[i_on, t_on])
        out = np.zeros(self.n_areas)
        np.add.at(out, i_on, ll)
        # y > 0 at an absent cell has zero likelihood
        clash = self.ypos & ~on
        clash[:, 0] = False
        out[clash.any(axis=1)] = -np.inf
        out[~np.isfinite(out)] = -np.inf
        return out

    def neighbour_presence(self, x: np.ndarray) -> np.ndarray:
        """S_it = number of present neighbours of i at week t."""
        return self.adj @ x.astype(np.float64)

    def zs_trans_loglik_by_area(
        self, theta: ParameterState, x: np.ndarray, s: np.ndarray | None = None
    ) -> np.ndarray:
        """Transition part given latent states, including week-1 prior."""
        if s is None:
            s = self.neighbour_presence(x)
        s_prev = np.zeros_like(s)
        s_prev[:, 1:] = s[:, :-1]
        l01, l11 = self.transition_logits(theta, s_prev)
        prev_on = np.zeros(x.shape, dtype=bool)
        prev_on[:, 1:] = x[:, :-1].astype(bool)
        on = x.astype(bool)
        logit = np.where(prev_on, l11, l01)
        ll = np.where(on, logsigmoid(logit), logsigmoid(-logit))
        ll[:, 0] = 0.0
        out = ll.sum(axis=1)
        out[~np.isfinite(out)] = -np.inf
        return out

    def init_loglik_by_area(self, x: np.ndarray, forced: np.ndarray) -> np.ndarray:
        """Week-1 latent prior: Bernoulli(init_state_prob) on free cells."""
        free0 = ~forced[:, 0]
        out = np.zeros(self.n_areas)
        on0 = x[:, 0].astype(bool)
        out[free0 & on0] = self.log_init1
        out[free0 & ~on0] = self.log_init0
        return out


# ---- public operations ------------------------------------------------------


def transition_probs(
    panel: CountPanel,
    spec: ModelSpec,
    theta: ParameterState,
    x_prev: np.ndarray,
    t: int,
):
    """(p01, p11) per area for the transition into week column t (t >= 1),
    given presence states x_prev at t-1."""
    if not (1 <= t < panel.n_weeks):
        raise ValueError(f"t must be in [1, {panel.n_weeks - 1}]")
    if not spec.family.has_presence:
        raise SpecError("nb family has no presence process")
    theta = apply_constraints(theta, spec)
    ev = LikelihoodEvaluator(panel, spec)
    x_prev = np.asarray(x_prev, dtype=float)
    s_prev = ev.adj @ x_prev if (spec.spatial_terms and spec.family.is_markov_switching) else None
    g_re = ev.g @ theta.alpha_reemerge
    g_pe = ev.g @ theta.alpha_persist
    l01 = theta.alpha0_reemerge + g_re
    l11 = (
        theta.alpha0_persist
        + g_pe
        + theta.delta_persist * np.log1p(panel.counts[:, t - 1].astype(float))
    )
    if s_prev is not None:
        l01 = l01 + theta.gamma_reemerge * s_prev
        l11 = l11 + theta.gamma_persist * s_prev
    return 1.0 / (1.0 + np.exp(-l01)), 1.0 / (1.0 + np.exp(-l11))


def mean_components(
    panel: CountPanel, spec: ModelSpec, theta: ParameterState, i: int, t: int
) -> tuple[float, float, float]:
    """(autoregressive part, endemic part, total mean) for cell (i, t), t >= 1."""
    if not (1 <= t < panel.n_weeks):
        raise ValueError(f"t must be in [1, {panel.n_weeks - 1}]")
    ev = LikelihoodEvaluator(panel, spec)
    theta = apply_constraints(theta, spec)
    ar = float(np.exp(theta.b0[i] + ev.g[i] @ theta.beta_ar) * panel.counts[i, t - 1])
    en = float(
        np.exp(theta.b[i] + theta.beta2_en * ev.sin_t[t] + theta.beta3_en * ev.cos_t[t])
    )
    return ar, en, ar + en


def overdispersion(
    panel: CountPanel, spec: ModelSpec, theta: ParameterState, i: int, t: int
) -> float:
    if not (1 <= t < panel.n_weeks):
        raise ValueError(f"t must be in [1, {panel.n_weeks - 1}]")
    ev = LikelihoodEvaluator(panel, spec)
    theta = apply_constraints(theta, spec)
    return float(
        np.exp(
            theta.alpha0_overdisp
            + ev.g[i] @ theta.alpha_overdisp
            + theta.delta_overdisp * np.log1p(panel.counts[i, t - 1])
        )
    )


def obs_loglik(
    panel: CountPanel,
    spec: ModelSpec,
    theta: ParameterState,
    x: LatentStates,
    i: int,
    t: int,
) -> float:
    """Emission term log p(y_it | x_it, y_{i,t-1}, theta) for t >= 1."""
    from . import distributions as dist

    if not (1 <= t < panel.n_weeks):
        raise ValueError(f"t must be in [1, {panel.n_weeks - 1}]")
    theta = apply_constraints(theta, spec)
    y = int(panel.counts[i, t])
    _, _, mu = mean_components(panel, spec, theta, i, t)
    r = overdispersion(panel, spec, theta, i, t)
    if spec.family is Family.NB:
        return float(dist.nb_logpmf(y, dist.NBParams(mu, r)))
    on = bool(x.x[i, t])
    if spec.family.is_hurdle:
        if on != (y > 0):
            raise ValueError("hurdle presence must equal I[y > 0]")
        return float(dist.ztnb_logpmf(y, dist.NBParams(mu, r))) if y > 0 else 0.0
    if not on:
        return 0.0 if y == 0 else -np.inf
    return float(dist.nb_logpmf(y, dist.NBParams(mu, r)))


def marginal_loglik_hurdle(panel: CountPanel, spec: ModelSpec, theta: ParameterState) -> float:
    """Exact log-likelihood for hurdle families (presence observed)."""
    if not spec.family.is_hurdle:
        raise SpecError(f"marginal hurdle likelihood asked of family {spec.family.value}")
    theta = apply_constraints(theta, spec)
    ev = LikelihoodEvaluator(panel, spec)
    total = ev.count_loglik_by_area(theta) + ev.hurdle_trans_loglik_by_area(theta)
    return float(total.sum())


def forward_loglik_zi(panel: CountPanel, spec: ModelSpec, theta: ParameterState) -> float:
    """Exact log-likelihood for the zero-inflated families via the per-area
    forward recursion (CouplingError when gamma != 0).

    Valid for zinb and zs-msnb alike: they share the 2-state emission
    structure and differ only in how the transition logits are parameterized.
    """
    if spec.family.is_hurdle or not spec.family.has_presence:
        raise SpecError(f"forward recursion asked of family {spec.family.value}")
    theta = apply_constraints(theta, spec)
    ev = LikelihoodEvaluator(panel, spec)
    total, _, _ = ev.zi_forward(theta)
    return float(total.sum())


def joint_loglik(
    panel: CountPanel, spec: ModelSpec, theta: ParameterState, x: LatentStates
) -> float:
    """Joint log p(y, x | theta): week-1 prior + transitions + emissions.

    Reference implementation in plain loops, deliberately independent of the
    vectorized per-area components (which are tested against it).
    """
    from . import distributions as dist

    if not spec.family.has_presence:
        raise SpecError("nb family has no latent states")
    theta = apply_constraints(theta, spec)
    ev = LikelihoodEvaluator(panel, spec)
    n, t_len = panel.counts.shape
    xs = x.x
    total = 0.0
    for i in range(n):
        if not x.forced[i, 0]:
            total += ev.log_init1 if xs[i, 0] else ev.log_init0
        elif xs[i, 0] != 1:
            return -np.inf
    for t in range(1, t_len):
        s_prev = ev.adj @ xs[:, t - 1].astype(float)
        for i in range(n):
            y = int(panel.counts[i, t])
            l01 = theta.alpha0_reemerge + float(ev.g[i] @ theta.alpha_reemerge)
            l11 = (
                theta.alpha0_persist
                + float(ev.g[i] @ theta.alpha_persist)
                + theta.delta_persist * np.log1p(panel.counts[i, t - 1])
            )
            if spec.spatial_terms and spec.family.is_markov_switching:
                l01 += theta.gamma_reemerge * s_prev[i]
                l11 += theta.gamma_persist * s_prev[i]
            logit = l11 if xs[i, t - 1] else l01
            total += float(logsigmoid(logit) if xs[i, t] else logsigmoid(-logit))
            mu = mean_components(panel, spec, theta, i, t)[2]
            r = overdispersion(panel, spec, theta, i, t)
            if xs[i, t]:
                if spec.family.is_hurdle:
                    if y == 0:
                        return -np.inf
                    total += float(dist.ztnb_logpmf(y, dist.NBParams(mu, r)))
                else:
                    total += float(dist.nb_logpmf(y, dist.NBParams(mu, r)))
            else:
                if y != 0:
                    return -np.inf
    return total


def loglik(
    panel: CountPanel,
    spec: ModelSpec,
    theta: ParameterState,
    x: LatentStates | None = None,
) -> float:
    """Family dispatch: the log-likelihood each family is fitted under."""
    fam = spec.family
    if fam is Family.NB:
        theta_c = apply_constraints(theta, spec)
        ev = LikelihoodEvaluator(panel, spec)
        return float(ev.count_loglik_by_area(theta_c).sum())
    if fam is Family.ZINB:
        return forward_loglik_zi(panel, spec, theta)
    if fam.is_hurdle:
        return marginal_loglik_hurdle(panel, spec, theta)
    if x is None:
        raise ValueError("zs-msnb joint likelihood needs latent states")
    return joint_loglik(panel, spec, theta, x)


def predictive_logdens(
    panel: CountPanel,
    spec: ModelSpec,
    theta: ParameterState,
    x: LatentStates | None = None,
    ev: LikelihoodEvaluator | None = None,
) -> np.ndarray:
    """log p(y_it | history, theta) per cell, (N, T) with column 0 = nan.

    NB: the NB pmf. Hurdle: the closed-form one-step factor. ZINB: exact
    one-step increments from the forward filter. zs-msnb: the one-step
    predictive given the drawn latent trajectory (mixture over x_it of
    transition times emission, conditional on x at t-1). Pass a prebuilt
    evaluator when calling per-draw in a loop.
    """
    theta = apply_constraints(theta, spec)
    if ev is None:
        ev = LikelihoodEvaluator(panel, spec)
    n, t_len = panel.counts.shape
    out = np.full((n, t_len), np.nan)
    fam = spec.family
    if fam is Family.NB:
        mu = ev.mean_matrix(theta)
        r = ev.overdisp_matrix(theta)
        ll = ev._nb_logpmf_matrix(ev.y.astype(float), mu, r)
        out[:, 1:] = ll[:, 1:]
        return out
    if fam is Family.ZINB:
        _, inc, _ = ev.zi_forward(theta)
        out[:, 1:] = inc[:, 1:]
        return out
    if fam.is_hurdle:
        s_prev = ev.s_obs_prev if spec.spatial_terms else None
        l01, l11 = ev.transition_logits(theta, s_prev)
        prev_on = np.zeros_like(ev.ypos)
        prev_on[:, 1:] = ev.ypos[:, :-1]
        logit = np.where(prev_on, l11, l01)
        mu = ev.mean_matrix(theta)
        r = ev.overdisp_matrix(theta)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            lq = -r * np.log1p(mu / r)
            lz = ev._nb_logpmf_matrix(ev.y.astype(float), mu, r) - log1mexp(lq)
        val = np.where(ev.ypos, logsigmoid(logit) + lz, logsigmoid(-logit))
        out[:, 1:] = val[:, 1:]
        return out
    if x is None:
        raise ValueError("zs-msnb predictive density needs latent states")
    xs = x.x.astype(bool)
    s = ev.neighbour_presence(x.x) if spec.spatial_terms else None
    s_prev = None
    if s is not None:
        s_prev = np.zeros_like(s)
        s_prev[:, 1:] = s[:, :-1]
    l01, l11 = ev.transition_logits(theta, s_prev)
    prev_on = np.zeros_like(xs)
    prev_on[:, 1:] = xs[:, :-1]
    logit = np.where(prev_on, l11, l01)
    mu = ev.mean_matrix(theta)
    r = ev.overdisp_matrix(theta)
    lognb = ev._nb_logpmf_matrix(ev.y.astype(float), mu, r)
    lp2 = logsigmoid(logit) + lognb  # present and emit y
    with np.errstate(invalid="ignore"):
        val = np.where(
            ev.ypos,
            lp2,
            np.logaddexp(logsigmoid(-logit), lp2),  # absent, or present emitting 0
        )
    out[:, 1:] = val[:, 1:]
    return out


def filtered_presence(panel: CountPanel, spec: ModelSpec, theta: ParameterState) -> np.ndarray:
    """P(x_it = 1 | y up to t, theta) from the forward filter (ZINB only)."""
    if spec.family is not Family.ZINB:
        raise SpecError("filtered presence is defined for the zinb family")
    theta = apply_constraints(theta, spec)
    ev = LikelihoodEvaluator(panel, spec)
    _, _, filt = ev.zi_forward(theta)
    return filt
