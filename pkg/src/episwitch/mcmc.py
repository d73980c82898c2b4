"""Adaptive Metropolis-within-Gibbs samplers for all five families.

One chain interleaves, per iteration:

* blocked random-walk MH on the top-level coefficient blocks (autoregressive,
  endemic, presence transition block(s), overdispersion), each proposal drawn
  from a per-block scalar scale times the Cholesky factor of the block's
  running empirical covariance, tuned toward a target acceptance rate during
  burn-in and frozen afterwards;
* per-area independent MH on the random effects b0_i and b_i (given the rest,
  area i's likelihood factor is the only term touching them, so all areas can
  be proposed and accepted in one vectorized pass);
* a conjugate inverse-gamma draw for sigma_b0^2 and log-scale MH for sigma_b
  under its uniform bound;
* exact Gaussian draws for the random-effect regression layer (beta0_ar and
  beta0_en, beta1_en), which enter the posterior only through the b0/b priors
  and are therefore conjugate given the random effects and scales;
* for the latent-state family, one systematic Gibbs sweep over the free
  presence indicators.

Without the conjugate layer the hierarchy mixes at the speed of the per-area
scalar walks (the hyper means can only chase the random-effect averages), which
is what caps effective sample sizes on long panels.

Likelihood work is cached by component (count part vs transition part, plus
the mean/overdispersion matrices) so each proposal recomputes only what its
block touches.
"""

from __future__ import annotations

import csv
import pickle
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln
from scipy.stats import invgamma

from . import _kernels
from .model import (
    Family,
    LatentStates,
    LikelihoodEvaluator,
    ModelSpec,
    ParameterState,
    PriorSpec,
)
from .panel import CountPanel
from .util import substream

LOG_2PI = float(np.log(2.0 * np.pi))


class SamplerCorruptionError(RuntimeError):
    """The current chain state has a non-finite posterior density."""


class InsufficientDrawsError(ValueError):
    """Diagnostics need at least 2 chains with 10 retained draws each."""


@dataclass
class SamplerConfig:
    n_iter: int = 80000
    burn_in: int = 30000
    n_chains: int = 3
    thin: int = 10
    seed: int = 0
    adapt_target: float = 0.35
    adapt_window: int = 50
    random_scan: bool = False
    store_latent: bool = True
    checkpoint_every: int = 0  # 0: checkpoint only when a run finishes
    likelihood_off: bool = False  # prior-sampling validation mode

    def validate(self) -> None:
        if self.n_iter <= 0 or self.burn_in < 0 or self.burn_in >= self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not (0.2 < self.adapt_target < 0.5):
            raise ValueError("adapt_target must be in (0.2, 0.5)")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_iter": self.n_iter,
            "burn_in": self.burn_in,
            "n_chains": self.n_chains,
            "thin": self.thin,
            "seed": self.seed,
            "adapt_target": self.adapt_target,
            "adapt_window": self.adapt_window,
            "random_scan": self.random_scan,
            "store_latent": self.store_latent,
            "checkpoint_every": self.checkpoint_every,
            "likelihood_off": self.likelihood_off,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter vector layout


@dataclass
class ParamLayout:
    """Maps the family's free parameters onto one flat vector.

    Classical families carry a single tied presence block; the NB family has
    none. Random effects sit at the tail. `blocks` holds the semantic top-level
    coefficient groups; `rw_blocks` restricts each to the coordinates moved by
    blocked MH (the hyper means beta0_ar, beta0_en, beta1_en are refreshed
    conjugately instead, and letting the walk propose them too would bloat the
    adapted covariance and starve the likelihood coordinates).
    """

    family: Family
    spatial: bool
    covariate_names: list[str]
    area_ids: list[str]
    names: list[str]
    blocks: dict[str, np.ndarray]
    rw_blocks: dict[str, np.ndarray]
    coef_idx: np.ndarray
    i_sigma_b0: int
    i_sigma_b: int
    b0_idx: np.ndarray
    b_idx: np.ndarray

    @classmethod
    def build(cls, spec: ModelSpec, panel: CountPanel) -> "ParamLayout":
        from .model import effective_design

        _, cov_names = effective_design(panel, spec)
        fam = spec.family
        spatial = spec.spatial_terms and fam.is_markov_switching
        names: list[str] = []
        blocks: dict[str, np.ndarray] = {}

        def block(name: str, members: list[str]):
            start = len(names)
            names.extend(members)
            blocks[name] = np.arange(start, len(names))

        block("ar", ["beta0_ar"] + [f"beta_ar[{c}]" for c in cov_names])
        block("en", ["beta0_en", "beta1_en", "beta2_en", "beta3_en"])
        if fam.is_markov_switching:
            re = ["alpha0_reemerge"] + [f"alpha_reemerge[{c}]" for c in cov_names]
            if spatial:
                re.append("gamma_reemerge")
            block("reemergence", re)
            pe = (
                ["alpha0_persist", "delta_persist"]
                + [f"alpha_persist[{c}]" for c in cov_names]
            )
            if spatial:
                pe.append("gamma_persist")
            block("persistence", pe)
        elif fam.has_presence:
            block(
                "presence",
                ["alpha0_present", "delta_persist"]
                + [f"alpha_present[{c}]" for c in cov_names],
            )
        block(
            "overdispersion",
            ["alpha0_overdisp", "delta_overdisp"]
            + [f"alpha_overdisp[{c}]" for c in cov_names],
        )
        rw_blocks = {}
        for name, idx in blocks.items():
            trimmed = idx[1:] if name == "ar" else idx[2:] if name == "en" else idx
            if trimmed.size:
                rw_blocks[name] = trimmed
        coef_idx = np.arange(len(names))
        i_sigma_b0 = len(names)
        names.append("sigma_b0")
        i_sigma_b = len(names)
        names.append("sigma_b")
        b0_start = len(names)
        names.extend(f"b0[{a}]" for a in panel.area_ids)
        b_start = len(names)
        names.extend(f"b[{a}]" for a in panel.area_ids)
        return cls(
            family=fam,
            spatial=spatial,
            covariate_names=cov_names,
            area_ids=list(panel.area_ids),
            names=names,
            blocks=blocks,
            rw_blocks=rw_blocks,
            coef_idx=coef_idx,
            i_sigma_b0=i_sigma_b0,
            i_sigma_b=i_sigma_b,
            b0_idx=np.arange(b0_start, b0_start + len(panel.area_ids)),
            b_idx=np.arange(b_start, b_start + len(panel.area_ids)),
        )

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def top_level_names(self) -> list[str]:
        """Coefficient names, the parameters the diagnostics bar applies to."""
        return [self.names[i] for i in self.coef_idx]

    def pack(self, theta: ParameterState) -> np.ndarray:
        v = np.empty(self.size)
        d = self.n_covariates
        b = self.blocks
        v[b["ar"]] = np.concatenate(([theta.beta0_ar], theta.beta_ar[:d]))
        v[b["en"]] = [theta.beta0_en, theta.beta1_en, theta.beta2_en, theta.beta3_en]
        if "reemergence" in b:
            re = [theta.alpha0_reemerge] + list(theta.alpha_reemerge[:d])
            if self.spatial:
                re.append(theta.gamma_reemerge)
            v[b["reemergence"]] = re
            pe = [theta.alpha0_persist, theta.delta_persist] + list(theta.alpha_persist[:d])
            if self.spatial:
                pe.append(theta.gamma_persist)
            v[b["persistence"]] = pe
        elif "presence" in b:
            v[b["presence"]] = [theta.alpha0_persist, theta.delta_persist] + list(
                theta.alpha_persist[:d]
            )
        v[b["overdispersion"]] = [
            theta.alpha0_overdisp,
            theta.delta_overdisp,
        ] + list(theta.alpha_overdisp[:d])
        v[self.i_sigma_b0] = theta.sigma_b0
        v[self.i_sigma_b] = theta.sigma_b
        v[self.b0_idx] = theta.b0
        v[self.b_idx] = theta.b
        return v

    def unpack(self, v: np.ndarray) -> ParameterState:
        d = self.n_covariates
        n = len(self.area_ids)
        theta = ParameterState.zeros(n, d)
        b = self.blocks
        ar = v[b["ar"]]
        theta.beta0_ar = float(ar[0])
        theta.beta_ar = ar[1 : 1 + d].copy()
        en = v[b["en"]]
        theta.beta0_en, theta.beta1_en, theta.beta2_en, theta.beta3_en = map(float, en)
        if "reemergence" in b:
            re = v[b["reemergence"]]
            theta.alpha0_reemerge = float(re[0])
            theta.alpha_reemerge = re[1 : 1 + d].copy()
            if self.spatial:
                theta.gamma_reemerge = float(re[1 + d])
            pe = v[b["persistence"]]
            theta.alpha0_persist = float(pe[0])
            theta.delta_persist = float(pe[1])
            theta.alpha_persist = pe[2 : 2 + d].copy()
            if self.spatial:
                theta.gamma_persist = float(pe[2 + d])
        elif "presence" in b:
            pr = v[b["presence"]]
            theta.alpha0_persist = theta.alpha0_reemerge = float(pr[0])
            theta.delta_persist = float(pr[1])
            theta.alpha_persist = pr[2 : 2 + d].copy()
            theta.alpha_reemerge = theta.alpha_persist.copy()
        od = v[b["overdispersion"]]
        theta.alpha0_overdisp = float(od[0])
        theta.delta_overdisp = float(od[1])
        theta.alpha_overdisp = od[2 : 2 + d].copy()
        theta.sigma_b0 = float(v[self.i_sigma_b0])
        theta.sigma_b = float(v[self.i_sigma_b])
        theta.b0 = v[self.b0_idx].copy()
        theta.b = v[self.b_idx].copy()
        return theta


# ---------------------------------------------------------------------------
# priors


def _normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI


def invgamma_logpdf(v: float, shape: float, rate: float) -> float:
    if v <= 0:
        return -np.inf
    return shape * np.log(rate) - gammaln(shape) - (shape + 1.0) * np.log(v) - rate / v


def log_prior_vec(
    v: np.ndarray, layout: ParamLayout, prior: PriorSpec, log_pop: np.ndarray
) -> float:
    """Joint log prior of one packed state.

    Coefficients get N(0, coef_sd^2); sigma_b0^2 inverse-gamma; sigma_b
    uniform on (0, upper]; b0_i ~ N(beta0_ar, sigma_b0^2) and
    b_i ~ N(beta0_en + beta1_en log N_i, sigma_b^2).
    """
    sigma_b = v[layout.i_sigma_b]
    if not (0.0 < sigma_b <= prior.sigma_b_upper):
        return -np.inf
    sigma_b0 = v[layout.i_sigma_b0]
    if sigma_b0 <= 0:
        return -np.inf
    out = float(np.sum(_normal_logpdf(v[layout.coef_idx], 0.0, prior.coef_sd)))
    out += invgamma_logpdf(
        sigma_b0**2, prior.sigma_b0_sq_shape, prior.sigma_b0_sq_rate
    )
    out -= np.log(prior.sigma_b_upper)
    beta0_ar = v[layout.blocks["ar"][0]]
    out += float(np.sum(_normal_logpdf(v[layout.b0_idx], beta0_ar, sigma_b0)))
    en = v[layout.blocks["en"]]
    b_mean = en[0] + en[1] * log_pop
    out += float(np.sum(_normal_logpdf(v[layout.b_idx], b_mean, sigma_b)))
    return out


def log_prior(
    theta: ParameterState, prior: PriorSpec, spec: ModelSpec, panel: CountPanel
) -> float:
    layout = ParamLayout.build(spec, panel)
    return log_prior_vec(layout.pack(theta), layout, prior, np.log(panel.populations))


def sample_sigma_b0_sq(
    b0: np.ndarray, mean: float, prior: PriorSpec, rng: np.random.Generator
) -> float:
    """Conjugate draw: sigma_b0^2 | b0 ~ InvGamma(shape + N/2, rate + SS/2)."""
    n = b0.size
    shape = prior.sigma_b0_sq_shape + 0.5 * n
    rate = prior.sigma_b0_sq_rate + 0.5 * float(np.sum((b0 - mean) ** 2))
    return rate / rng.gamma(shape)


# ---------------------------------------------------------------------------
# adaptive proposals


class AdaptiveRWBlock:
    """Random-walk proposal for one block: scale * chol(running covariance).

    The scalar scale follows a Robbins-Monro recursion toward the target
    acceptance rate; the covariance is the running empirical covariance of
    the block's trajectory. Both freeze at the end of burn-in.
    """

    def __init__(self, dim: int, target: float = 0.35, init_scale: float = 0.1):
        self.dim = dim
        self.target = target
        self.log_scale = float(np.log(init_scale))
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))
        self.count = 0
        self.chol = np.eye(dim)
        self.frozen = False
        self._since_refresh = 0

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))

    def propose(self, cur: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return cur + self.scale * (self.chol @ rng.standard_normal(self.dim))

    def observe(self, value: np.ndarray, accepted: bool, step: int) -> None:
        if self.frozen:
            return
        self.count += 1
        diff = value - self.mean
        self.mean = self.mean + diff / self.count
        self.m2 = self.m2 + np.outer(diff, value - self.mean)
        rate = min(0.25, 2.0 / np.sqrt(step + 20.0))
        self.log_scale += rate * ((1.0 if accepted else 0.0) - self.target)
        self._since_refresh += 1
        if self._since_refresh >= 50 and self.count > max(20, 2 * self.dim):
            self._since_refresh = 0
            cov = self.m2 / (self.count - 1)
            jitter = 1e-9 * max(1.0, float(np.trace(cov)) / self.dim)
            cov = cov + jitter * np.eye(self.dim)
            try:
                self.chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                pass  # keep the previous factor until the stats stabilize

    def freeze(self) -> None:
        self.frozen = True

    def state(self) -> dict:
        return {
            "log_scale": self.log_scale,
            "mean": self.mean,
            "m2": self.m2,
            "count": self.count,
            "chol": self.chol,
            "frozen": self.frozen,
            "since": self._since_refresh,
        }

    def restore(self, s: dict) -> None:
        self.log_scale = s["log_scale"]
        self.mean = s["mean"]
        self.m2 = s["m2"]
        self.count = s["count"]
        self.chol = s["chol"]
        self.frozen = s["frozen"]
        self._since_refresh = s["since"]


class AdaptiveScalarSites:
    """Independent scalar random-walk scales, one per area random effect."""

    def __init__(self, n: int, target: float = 0.35, init_scale: float = 0.2):
        self.target = target
        self.log_scale = np.full(n, np.log(init_scale))
        self.frozen = False

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def propose(self, cur: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return cur + self.scales * rng.standard_normal(cur.size)

    def observe(self, accepted: np.ndarray, step: int) -> None:
        if self.frozen:
            return
        rate = min(0.25, 2.0 / np.sqrt(step + 20.0))
        self.log_scale += rate * (accepted.astype(float) - self.target)

    def freeze(self) -> None:
        self.frozen = True

    def state(self) -> dict:
        return {"log_scale": self.log_scale, "frozen": self.frozen}

    def restore(self, s: dict) -> None:
        self.log_scale = s["log_scale"]
        self.frozen = s["frozen"]


@dataclass
class AdaptState:
    """Picklable bundle of every proposal adapter of one chain."""

    blocks: dict
    b0_sites: AdaptiveScalarSites
    b_sites: AdaptiveScalarSites
    sigma_b: AdaptiveRWBlock
    step_count: int = 0

    @classmethod
    def fresh(cls, layout: ParamLayout, target: float) -> "AdaptState":
        n = len(layout.area_ids)
        return cls(
            blocks={
                name: AdaptiveRWBlock(idx.size, target)
                for name, idx in layout.rw_blocks.items()
            },
            b0_sites=AdaptiveScalarSites(n, target),
            b_sites=AdaptiveScalarSites(n, target),
            sigma_b=AdaptiveRWBlock(1, target, init_scale=0.3),
        )

    def freeze(self) -> None:
        for blk in self.blocks.values():
            blk.freeze()
        self.b0_sites.freeze()
        self.b_sites.freeze()
        self.sigma_b.freeze()

    def scales_snapshot(self) -> np.ndarray:
        vals = [self.blocks[k].scale for k in sorted(self.blocks)]
        vals.append(self.sigma_b.scale)
        vals.extend(self.b0_sites.scales)
        vals.extend(self.b_sites.scales)
        return np.asarray(vals)


# ---------------------------------------------------------------------------
# one chain


class ChainSampler:
    """Current state, caches, and adapters of one MCMC chain."""

    def __init__(
        self,
        panel: CountPanel,
        spec: ModelSpec,
        prior: PriorSpec,
        config: SamplerConfig,
        chain_id: int,
    ):
        config.validate()
        spec.validate_against(panel)
        self.panel = panel
        self.spec = spec
        self.prior = prior
        self.config = config
        self.chain_id = chain_id
        self.ev = LikelihoodEvaluator(panel, spec)
        self.layout = ParamLayout.build(spec, panel)
        self.rng = substream(config.seed, "chain", chain_id)
        self.lik_on = not config.likelihood_off
        self.family = spec.family
        self.n_areas = panel.n_areas
        self.log_pop = np.log(panel.populations)
        self.iteration = 0

        self.vec = self._initial_vector()
        self.adapt = AdaptState.fresh(self.layout, config.adapt_target)
        self.x: np.ndarray | None = None
        self.s: np.ndarray | None = None
        self.forced: np.ndarray | None = None
        if self.family.needs_augmentation:
            init = LatentStates.from_counts(
                panel.counts, fill="bernoulli", p=self.prior.init_state_prob, rng=self.rng
            )
            self.x = init.x.copy()
            self.forced = init.forced
            self.s = self.ev.neighbour_presence(self.x)
        # CSR neighbour structure for the sweep kernel
        ptr = [0]
        idx = []
        for i in range(self.n_areas):
            nbrs = np.flatnonzero(panel.adjacency[i])
            idx.extend(nbrs)
            ptr.append(len(idx))
        self.nei_idx = np.asarray(idx, dtype=np.int64)
        self.nei_ptr = np.asarray(ptr, dtype=np.int64)

        self._refresh_caches()
        self.scale_trace: list[np.ndarray] = []

    # -- initialization ------------------------------------------------------

    def _initial_vector(self) -> np.ndarray:
        lay, pr = self.layout, self.prior
        v = np.zeros(lay.size)
        v[lay.coef_idx] = 0.5 * self.rng.standard_normal(lay.coef_idx.size)
        sigma_b0_sq_med = float(
            invgamma.median(pr.sigma_b0_sq_shape, scale=pr.sigma_b0_sq_rate)
        )
        v[lay.i_sigma_b0] = np.sqrt(sigma_b0_sq_med)
        v[lay.i_sigma_b] = 0.5 * pr.sigma_b_upper
        beta0_ar = v[lay.blocks["ar"][0]]
        en = v[lay.blocks["en"]]
        v[lay.b0_idx] = beta0_ar
        v[lay.b_idx] = en[0] + en[1] * self.log_pop
        return v

    # -- cached likelihood components -----------------------------------------

    def _mu_matrix(self, vec: np.ndarray) -> np.ndarray:
        lay, ev = self.layout, self.ev
        ar = vec[lay.blocks["ar"]]
        en = vec[lay.blocks["en"]]
        b0 = vec[lay.b0_idx]
        b = vec[lay.b_idx]
        with np.errstate(over="ignore", invalid="ignore"):
            ar_mult = np.exp(b0 + ev.g @ ar[1:])
            log_en = b[:, None] + en[2] * ev.sin_t[None, :] + en[3] * ev.cos_t[None, :]
            mu = ar_mult[:, None] * ev.y_prev + np.exp(log_en)
        mu[:, 0] = 0.0
        return mu

    def _r_matrix(self, vec: np.ndarray) -> np.ndarray:
        lay, ev = self.layout, self.ev
        od = vec[lay.blocks["overdispersion"]]
        with np.errstate(over="ignore"):
            r = np.exp(od[0] + (ev.g @ od[2:])[:, None] + od[1] * ev.log_y1p_prev)
        r[:, 0] = 1.0
        return r

    def _trans_logits(self, vec: np.ndarray, s_prev: np.ndarray | None):
        lay, ev = self.layout, self.ev
        d = lay.n_covariates
        if "reemergence" in lay.blocks:
            re = vec[lay.blocks["reemergence"]]
            pe = vec[lay.blocks["persistence"]]
            a0_re, a_re = re[0], re[1 : 1 + d]
            g_re = re[1 + d] if lay.spatial else 0.0
            a0_pe, dl, a_pe = pe[0], pe[1], pe[2 : 2 + d]
            g_pe = pe[2 + d] if lay.spatial else 0.0
        else:
            pr = vec[lay.blocks["presence"]]
            a0_re = a0_pe = pr[0]
            dl = pr[1]
            a_re = a_pe = pr[2 : 2 + d]
            g_re = g_pe = 0.0
        l01 = a0_re + (ev.g @ a_re)[:, None] + np.zeros_like(ev.log_y1p_prev)
        l11 = a0_pe + (ev.g @ a_pe)[:, None] + dl * ev.log_y1p_prev
        if s_prev is not None and (g_re != 0.0 or g_pe != 0.0):
            l01 = l01 + g_re * s_prev
            l11 = l11 + g_pe * s_prev
        return l01, l11, (g_re, g_pe)

    def _count_component(self, mu: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Per-area count log-likelihood (NB everywhere, or ZTNB at y>0)."""
        if not self.lik_on:
            return np.zeros(self.n_areas)
        ev = self.ev
        if self.family is Family.NB:
            ll = ev._nb_logpmf_matrix(ev.y.astype(float), mu, r)
            ll[:, 0] = 0.0
            out = ll.sum(axis=1)
        else:
            mu_p = mu[ev.pos_i, ev.pos_t]
            r_p = r[ev.pos_i, ev.pos_t]
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                lq = -np.log1p(mu_p / r_p)
                lz = r_p * lq
                ll = (
                    gammaln(ev.y_pos + r_p)
                    - gammaln(r_p)
                    - ev.gammaln_y1_pos
                    + lz
                    + ev.y_pos * (np.log(mu_p) - np.log(r_p + mu_p))
                    - np.log(-np.expm1(np.minimum(lz, -1e-300)))
                )
            out = np.zeros(self.n_areas)
            np.add.at(out, ev.pos_i, ll)
        out[~np.isfinite(out)] = -np.inf
        return out

    def _hurdle_trans_component(self, vec: np.ndarray) -> np.ndarray:
        if not self.lik_on:
            return np.zeros(self.n_areas)
        ev = self.ev
        s_prev = ev.s_obs_prev if self.layout.spatial else None
        l01, l11, _ = self._trans_logits(vec, s_prev)
        prev_on = np.zeros_like(ev.ypos)
        prev_on[:, 1:] = ev.ypos[:, :-1]
        logit = np.where(prev_on, l11, l01)
        z = np.where(ev.ypos, logit, -logit)
        ll = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
        ll[:, 0] = 0.0
        out = ll.sum(axis=1)
        out[~np.isfinite(out)] = -np.inf
        return out

    def _zs_obs_component(self, mu: np.ndarray, r: np.ndarray) -> np.ndarray:
        if not self.lik_on:
            return np.zeros(self.n_areas)
        ev = self.ev
        on = self.x.astype(bool)
        on[:, 0] = False
        i_on, t_on = np.nonzero(on)
        ll = ev._nb_logpmf_matrix(
            ev.y[i_on, t_on].astype(float), mu[i_on, t_on], r[i_on, t_on]
        )
        out = np.zeros(self.n_areas)
        np.add.at(out, i_on, ll)
        out[~np.isfinite(out)] = -np.inf
        return out

    def _zs_trans_component(self, vec: np.ndarray) -> np.ndarray:
        if not self.lik_on:
            return np.zeros(self.n_areas)
        ev = self.ev
        s_prev = np.zeros_like(self.s)
        s_prev[:, 1:] = self.s[:, :-1]
        l01, l11, _ = self._trans_logits(vec, s_prev)
        on = self.x.astype(bool)
        prev_on = np.zeros_like(on)
        prev_on[:, 1:] = on[:, :-1]
        logit = np.where(prev_on, l11, l01)
        z = np.where(on, logit, -logit)
        ll = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
        ll[:, 0] = 0.0
        out = ll.sum(axis=1)
        out[~np.isfinite(out)] = -np.inf
        return out

    def _zs_init_component(self) -> np.ndarray:
        ev = self.ev
        out = np.zeros(self.n_areas)
        free0 = ~self.forced[:, 0]
        on0 = self.x[:, 0].astype(bool)
        out[free0 & on0] = ev.log_init1
        out[free0 & ~on0] = ev.log_init0
        return out

    def _forward_component(self, lognb: np.ndarray, vec: np.ndarray) -> np.ndarray:
        if not self.lik_on:
            return np.zeros(self.n_areas)
        ev = self.ev
        l01, l11, _ = self._trans_logits(vec, None)
        total, _, _ = _kernels.forward_zi(
            l01, l11, lognb, ev.ypos.astype(np.uint8), ev.log_init1, ev.log_init0
        )
        total[~np.isfinite(total)] = -np.inf
        return total

    def _lognb_matrix(self, mu: np.ndarray, r: np.ndarray) -> np.ndarray:
        ev = self.ev
        lognb = ev._nb_logpmf_matrix(ev.y.astype(float), mu, r)
        lognb[:, 0] = 0.0
        lognb[~np.isfinite(lognb)] = -np.inf
        return lognb

    def _refresh_caches(self) -> None:
        v = self.vec
        self.mu = self._mu_matrix(v)
        self.r = self._r_matrix(v)
        fam = self.family
        if fam is Family.NB:
            self.c_count = self._count_component(self.mu, self.r)
            self.c_trans = np.zeros(self.n_areas)
        elif fam.is_hurdle:
            self.c_count = self._count_component(self.mu, self.r)
            self.c_trans = self._hurdle_trans_component(v)
        elif fam is Family.ZINB:
            self.lognb = self._lognb_matrix(self.mu, self.r)
            self.c_fwd = self._forward_component(self.lognb, v)
        else:  # zs-msnb
            self.c_obs = self._zs_obs_component(self.mu, self.r)
            self.c_trans = self._zs_trans_component(v)
            self.c_init = self._zs_init_component()
        if not np.isfinite(self.total_loglik()):
            raise SamplerCorruptionError(
                f"chain {self.chain_id}: non-finite log-likelihood at iteration "
                f"{self.iteration}"
            )

    def total_loglik(self) -> float:
        fam = self.family
        if fam is Family.ZINB:
            return float(self.c_fwd.sum())
        if fam is Family.ZS_MSNB:
            return float(self.c_obs.sum() + self.c_trans.sum() + self.c_init.sum())
        return float(self.c_count.sum() + self.c_trans.sum())

    def current_state(self) -> ParameterState:
        return self.layout.unpack(self.vec)

    def current_latent(self) -> LatentStates | None:
        if self.x is None:
            return None
        return LatentStates(x=self.x.copy(), forced=self.forced.copy())

    # -- prior pieces ----------------------------------------------------------

    def _coef_prior(self, vals: np.ndarray) -> float:
        return float(np.sum(_normal_logpdf(vals, 0.0, self.prior.coef_sd)))

    # -- updates ----------------------------------------------------------------

    def _update_block(self, name: str, adapting: bool) -> None:
        lay, fam = self.layout, self.family
        idx = lay.rw_blocks[name]
        blk = self.adapt.blocks[name]
        cur = self.vec[idx]
        prop = blk.propose(cur, self.rng)
        vec_new = self.vec.copy()
        vec_new[idx] = prop

        # hyper means are excluded from rw_blocks, so the b0/b priors are
        # untouched and only the coefficient prior contributes
        d_prior = self._coef_prior(prop) - self._coef_prior(cur)

        new_cache = {}
        if name in ("ar", "en"):
            mu_new = self._mu_matrix(vec_new)
            if fam is Family.ZINB:
                lognb_new = self._lognb_matrix(mu_new, self.r)
                fwd_new = self._forward_component(lognb_new, vec_new)
                d_lik = float(fwd_new.sum() - self.c_fwd.sum())
                new_cache = {"mu": mu_new, "lognb": lognb_new, "c_fwd": fwd_new}
            elif fam is Family.ZS_MSNB:
                obs_new = self._zs_obs_component(mu_new, self.r)
                d_lik = float(obs_new.sum() - self.c_obs.sum())
                new_cache = {"mu": mu_new, "c_obs": obs_new}
            else:
                cnt_new = self._count_component(mu_new, self.r)
                d_lik = float(cnt_new.sum() - self.c_count.sum())
                new_cache = {"mu": mu_new, "c_count": cnt_new}
        elif name == "overdispersion":
            r_new = self._r_matrix(vec_new)
            if fam is Family.ZINB:
                lognb_new = self._lognb_matrix(self.mu, r_new)
                fwd_new = self._forward_component(lognb_new, vec_new)
                d_lik = float(fwd_new.sum() - self.c_fwd.sum())
                new_cache = {"r": r_new, "lognb": lognb_new, "c_fwd": fwd_new}
            elif fam is Family.ZS_MSNB:
                obs_new = self._zs_obs_component(self.mu, r_new)
                d_lik = float(obs_new.sum() - self.c_obs.sum())
                new_cache = {"r": r_new, "c_obs": obs_new}
            else:
                cnt_new = self._count_component(self.mu, r_new)
                d_lik = float(cnt_new.sum() - self.c_count.sum())
                new_cache = {"r": r_new, "c_count": cnt_new}
        else:  # presence transition block(s)
            if fam is Family.ZINB:
                fwd_new = self._forward_component(self.lognb, vec_new)
                d_lik = float(fwd_new.sum() - self.c_fwd.sum())
                new_cache = {"c_fwd": fwd_new}
            elif fam is Family.ZS_MSNB:
                tr_new = self._zs_trans_component(vec_new)
                d_lik = float(tr_new.sum() - self.c_trans.sum())
                new_cache = {"c_trans": tr_new}
            else:
                tr_new = self._hurdle_trans_component(vec_new)
                d_lik = float(tr_new.sum() - self.c_trans.sum())
                new_cache = {"c_trans": tr_new}

        delta = d_lik + d_prior
        accept = np.isfinite(delta) and np.log(self.rng.random()) < delta
        if accept:
            self.vec = vec_new
            for key, val in new_cache.items():
                setattr(self, key, val)
        if adapting:
            blk.observe(self.vec[idx], accept, self.adapt.step_count)

    def _update_random_effects(self, which: str, adapting: bool) -> None:
        """Vectorized per-area MH on b0 (which='b0') or b (which='b').

        Valid because, given everything else, the likelihood factorizes over
        areas in these coordinates (transitions never involve b0/b).
        """
        lay, fam = self.layout, self.family
        idx = lay.b0_idx if which == "b0" else lay.b_idx
        sites = self.adapt.b0_sites if which == "b0" else self.adapt.b_sites
        cur = self.vec[idx]
        prop = sites.propose(cur, self.rng)
        vec_new = self.vec.copy()
        vec_new[idx] = prop
        mu_new = self._mu_matrix(vec_new)

        if fam is Family.ZINB:
            lognb_new = self._lognb_matrix(mu_new, self.r)
            per_area_new = self._forward_component(lognb_new, vec_new)
            per_area_old = self.c_fwd
        elif fam is Family.ZS_MSNB:
            per_area_new = self._zs_obs_component(mu_new, self.r)
            per_area_old = self.c_obs
        else:
            per_area_new = self._count_component(mu_new, self.r)
            per_area_old = self.c_count

        if which == "b0":
            mean = self.vec[lay.blocks["ar"][0]]
            sd = self.vec[lay.i_sigma_b0]
        else:
            en = self.vec[lay.blocks["en"]]
            mean = en[0] + en[1] * self.log_pop
            sd = self.vec[lay.i_sigma_b]
        d_prior = _normal_logpdf(prop, mean, sd) - _normal_logpdf(cur, mean, sd)
        delta = per_area_new - per_area_old + d_prior
        accept = np.log(self.rng.random(cur.size)) < delta

        if np.any(accept):
            merged = np.where(accept, prop, cur)
            self.vec[idx] = merged
            self.mu[accept] = mu_new[accept]
            if fam is Family.ZINB:
                self.lognb[accept] = lognb_new[accept]
                self.c_fwd[accept] = per_area_new[accept]
            elif fam is Family.ZS_MSNB:
                self.c_obs[accept] = per_area_new[accept]
            else:
                self.c_count[accept] = per_area_new[accept]
        if adapting:
            sites.observe(accept, self.adapt.step_count)

    def _update_sigmas(self, adapting: bool) -> None:
        lay, pr = self.layout, self.prior
        beta0_ar = self.vec[lay.blocks["ar"][0]]
        new_var = sample_sigma_b0_sq(self.vec[lay.b0_idx], beta0_ar, pr, self.rng)
        self.vec[lay.i_sigma_b0] = np.sqrt(new_var)

        # log-scale MH for sigma_b under Uniform(0, upper]
        cur = self.vec[lay.i_sigma_b]
        step = self.adapt.sigma_b.scale * float(self.rng.standard_normal())
        prop = cur * np.exp(step)
        if prop <= pr.sigma_b_upper:
            en = self.vec[lay.blocks["en"]]
            mean = en[0] + en[1] * self.log_pop
            b = self.vec[lay.b_idx]
            d = float(
                np.sum(_normal_logpdf(b, mean, prop)) - np.sum(_normal_logpdf(b, mean, cur))
            )
            d += np.log(prop) - np.log(cur)  # Jacobian of the log-scale walk
            accept = np.log(self.rng.random()) < d
        else:
            accept = False
        if accept:
            self.vec[lay.i_sigma_b] = prop
        if adapting:
            self.adapt.sigma_b.observe(
                np.array([np.log(self.vec[lay.i_sigma_b])]), accept, self.adapt.step_count
            )

    def _update_hyper_means(self) -> None:
        """Conjugate refresh of beta0_ar and (beta0_en, beta1_en).

        Neither enters the likelihood (the mean matrices read b0/b and the
        slope/seasonal coordinates only), so given the random effects and
        scales the conditionals are exact Gaussians: a normal-normal update
        for beta0_ar and a two-coefficient Bayesian regression of b on
        (1, log N_i) for the endemic pair.
        """
        lay, pr = self.layout, self.prior
        c2 = pr.coef_sd**2

        b0 = self.vec[lay.b0_idx]
        v0 = self.vec[lay.i_sigma_b0] ** 2
        prec = b0.size / v0 + 1.0 / c2
        mean = (np.sum(b0) / v0) / prec
        self.vec[lay.blocks["ar"][0]] = mean + self.rng.standard_normal() / np.sqrt(prec)

        b = self.vec[lay.b_idx]
        vb = self.vec[lay.i_sigma_b] ** 2
        xtx = np.array(
            [
                [b.size, np.sum(self.log_pop)],
                [np.sum(self.log_pop), np.sum(self.log_pop**2)],
            ]
        )
        a = xtx / vb + np.eye(2) / c2
        rhs = np.array([np.sum(b), np.sum(b * self.log_pop)]) / vb
        chol = np.linalg.cholesky(a)
        m = np.linalg.solve(a, rhs)
        z = np.linalg.solve(chol.T, self.rng.standard_normal(2))
        self.vec[lay.blocks["en"][:2]] = m + z

    def _update_latent(self) -> None:
        ev = self.ev
        with np.errstate(invalid="ignore", over="ignore"):
            obs_odds = -self.r * np.log1p(self.mu / self.r)  # log NB(0 | mu, r)
        obs_odds[~np.isfinite(obs_odds)] = -np.inf
        obs_odds[:, 0] = 0.0
        if not self.lik_on:
            obs_odds = np.zeros_like(obs_odds)
        s_prev_dummy = self.s  # updated in place by the kernel
        l01, l11, (g_re, g_pe) = self._trans_logits(self.vec, None)
        uniforms = self.rng.random(self.x.shape)
        init_logit = ev.log_init1 - ev.log_init0
        _kernels.latent_sweep(
            self.x,
            self.s,
            uniforms,
            obs_odds,
            self.forced.astype(np.uint8),
            l01,
            l11,
            g_re,
            g_pe,
            self.nei_idx,
            self.nei_ptr,
            init_logit,
        )
        self.c_obs = self._zs_obs_component(self.mu, self.r)
        self.c_trans = self._zs_trans_component(self.vec)
        self.c_init = self._zs_init_component()

    def step(self) -> None:
        """One full iteration: all blocks, random effects, sigmas, latent sweep."""
        adapting = self.iteration < self.config.burn_in
        if not adapting:
            self.adapt.freeze()
        self.adapt.step_count += 1
        block_names = [n for n in self.layout.rw_blocks]
        if self.config.random_scan:
            order = self.rng.permutation(len(block_names))
            block_names = [block_names[k] for k in order]
        for name in block_names:
            self._update_block(name, adapting)
        # non-uniform scan: the overdispersion pair sits on a curved ridge
        # (alpha0 trades against delta through the NB variance) that a linear
        # adapted proposal crosses slowly, and the per-area scalar walks are
        # the slowest other moving parts; both get extra scans per sweep,
        # which costs a fraction of the sweep but divides their
        # autocorrelation times accordingly
        for _ in range(5):
            self._update_block("overdispersion", adapting)
        for _ in range(2):
            self._update_random_effects("b0", adapting)
            self._update_random_effects("b", adapting)
        self._update_sigmas(adapting)
        self._update_hyper_means()
        if self.family.needs_augmentation:
            self._update_latent()
        if not np.isfinite(self.total_loglik()):
            raise SamplerCorruptionError(
                f"chain {self.chain_id}: log-likelihood became non-finite at "
                f"iteration {self.iteration} (state dump: {self.dump_state()})"
            )
        self.iteration += 1

    def dump_state(self) -> dict:
        return {
            "iteration": self.iteration,
            "chain": self.chain_id,
            "vec": {n: float(v) for n, v in zip(self.layout.names, self.vec)},
        }

    # -- checkpointing -----------------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "iteration": self.iteration,
            "vec": self.vec.copy(),
            "x": None if self.x is None else self.x.copy(),
            "s": None if self.s is None else self.s.copy(),
            "rng_state": self.rng.bit_generator.state,
            "adapt": {
                "blocks": {k: v.state() for k, v in self.adapt.blocks.items()},
                "b0": self.adapt.b0_sites.state(),
                "b": self.adapt.b_sites.state(),
                "sigma_b": self.adapt.sigma_b.state(),
                "step_count": self.adapt.step_count,
            },
        }

    def restore(self, ck: dict) -> None:
        self.iteration = ck["iteration"]
        self.vec = ck["vec"].copy()
        if ck["x"] is not None:
            self.x = ck["x"].copy()
            self.s = ck["s"].copy()
        self.rng.bit_generator.state = ck["rng_state"]
        for k, st in ck["adapt"]["blocks"].items():
            self.adapt.blocks[k].restore(st)
        self.adapt.b0_sites.restore(ck["adapt"]["b0"])
        self.adapt.b_sites.restore(ck["adapt"]["b"])
        self.adapt.sigma_b.restore(ck["adapt"]["sigma_b"])
        self.adapt.step_count = ck["adapt"]["step_count"]
        if self.iteration >= self.config.burn_in:
            self.adapt.freeze()
        self._refresh_caches()


# ---------------------------------------------------------------------------
# public operations


def update_latent_states(
    panel: CountPanel,
    spec: ModelSpec,
    theta: ParameterState,
    x: LatentStates,
    rng: np.random.Generator,
) -> LatentStates:
    """One systematic Gibbs sweep over the free presence indicators.

    Standalone version for the latent-state family; the chain engine uses
    the same kernel with cached matrices.
    """
    from .model import apply_constraints

    if not spec.family.needs_augmentation:
        raise ValueError(f"family {spec.family.value} does not use augmentation")
    theta = apply_constraints(theta, spec)
    ev = LikelihoodEvaluator(panel, spec)
    if np.any(x.x[x.forced] != 1):
        raise ValueError("latent states inconsistent: forced cells must be present")
    mu = ev.mean_matrix(theta)
    r = ev.overdisp_matrix(theta)
    with np.errstate(invalid="ignore", over="ignore"):
        obs_odds = -r * np.log1p(mu / r)
    obs_odds[~np.isfinite(obs_odds)] = -np.inf
    obs_odds[:, 0] = 0.0
    l01, l11 = ev.transition_logits(theta, None)
    xs = x.x.copy()
    s = ev.neighbour_presence(xs)
    ptr = [0]
    idx: list[int] = []
    for i in range(panel.n_areas):
        nbrs = np.flatnonzero(panel.adjacency[i])
        idx.extend(int(j) for j in nbrs)
        ptr.append(len(idx))
    gamma1 = theta.gamma_reemerge if spec.spatial_terms else 0.0
    gamma2 = theta.gamma_persist if spec.spatial_terms else 0.0
    _kernels.latent_sweep(
        xs,
        s,
        rng.random(xs.shape),
        obs_odds,
        x.forced.astype(np.uint8),
        l01,
        l11,
        gamma1,
        gamma2,
        np.asarray(idx, dtype=np.int64),
        np.asarray(ptr, dtype=np.int64),
        ev.log_init1 - ev.log_init0,
    )
    return LatentStates(x=xs, forced=x.forced.copy())


def update_parameters(
    panel: CountPanel,
    spec: ModelSpec,
    theta: ParameterState,
    x: LatentStates | None,
    rng: np.random.Generator,
    adapt: AdaptState | None = None,
    prior: PriorSpec | None = None,
    config: SamplerConfig | None = None,
    adapting: bool = True,
) -> tuple[ParameterState, AdaptState]:
    """One full parameter pass (no latent sweep); wraps the chain engine."""
    prior = prior or spec.prior
    config = config or SamplerConfig(n_iter=2, burn_in=1, n_chains=1)
    sampler = ChainSampler(panel, spec, prior, config, chain_id=0)
    sampler.rng = rng
    sampler.vec = sampler.layout.pack(theta)
    if adapt is not None:
        sampler.adapt = adapt
    if sampler.family.needs_augmentation:
        if x is None:
            raise ValueError("zs-msnb parameter update needs latent states")
        sampler.x = x.x.copy()
        sampler.forced = x.forced.copy()
        sampler.s = sampler.ev.neighbour_presence(sampler.x)
    sampler._refresh_caches()
    sampler.adapt.step_count += 1
    for name in sampler.layout.rw_blocks:
        sampler._update_block(name, adapting)
    sampler._update_random_effects("b0", adapting)
    sampler._update_random_effects("b", adapting)
    sampler._update_sigmas(adapting)
    sampler._update_hyper_means()
    return sampler.current_state(), sampler.adapt


@dataclass
class PosteriorDraws:
    """Post-burn-in, thinned draws of every chain, plus optional latent paths."""

    names: list[str]
    chains: list[np.ndarray]  # each (n_draws, P)
    iterations: list[np.ndarray]
    layout: ParamLayout
    spec: ModelSpec
    config: SamplerConfig
    latent: list[np.ndarray] | None = None  # each (n_draws, N, T) int8
    scale_traces: list[np.ndarray] | None = None

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def n_draws(self) -> int:
        return self.chains[0].shape[0] if self.chains else 0

    def series(self, name: str) -> np.ndarray:
        j = self.names.index(name)
        return np.stack([c[:, j] for c in self.chains])

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.chains, axis=0)

    def stacked_latent(self) -> np.ndarray | None:
        if self.latent is None:
            return None
        return np.concatenate(self.latent, axis=0)

    def state_at(self, chain: int, draw: int) -> ParameterState:
        return self.layout.unpack(self.chains[chain][draw])

    def save(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for c, (mat, its) in enumerate(zip(self.chains, self.iterations)):
            path = out_dir / f"chain_{c:02d}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["iteration", "parameter", "value"])
                for row_i in range(mat.shape[0]):
                    it = int(its[row_i])
                    for j, nm in enumerate(self.names):
                        w.writerow([it, nm, repr(float(mat[row_i, j]))])
            paths.append(path)
        if self.latent is not None:
            lat_path = out_dir / "latent_draws.npz"
            np.savez_compressed(
                lat_path, **{f"chain_{c:02d}": arr for c, arr in enumerate(self.latent)}
            )
            paths.append(lat_path)
        return paths

    @classmethod
    def load(
        cls, out_dir, panel: CountPanel, spec: ModelSpec, config: SamplerConfig
    ) -> "PosteriorDraws":
        out_dir = Path(out_dir)
        layout = ParamLayout.build(spec, panel)
        chains = []
        iterations = []
        for path in sorted(out_dir.glob("chain_*.csv")):
            rows: dict[int, dict[str, float]] = {}
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                if header != ["iteration", "parameter", "value"]:
                    raise ValueError(f"{path}: unexpected draw-file header {header}")
                for it_s, name, val in reader:
                    rows.setdefault(int(it_s), {})[name] = float(val)
            its = sorted(rows)
            mat = np.empty((len(its), layout.size))
            for k, it in enumerate(its):
                rec = rows[it]
                mat[k] = [rec[nm] for nm in layout.names]
            chains.append(mat)
            iterations.append(np.asarray(its, dtype=np.int64))
        if not chains:
            raise FileNotFoundError(f"no chain_*.csv files under {out_dir}")
        latent = None
        lat_path = out_dir / "latent_draws.npz"
        if lat_path.exists():
            with np.load(lat_path) as z:
                latent = [z[k] for k in sorted(z.files)]
        return cls(
            names=list(layout.names),
            chains=chains,
            iterations=iterations,
            layout=layout,
            spec=spec,
            config=config,
            latent=latent,
        )


def _run_one_chain(
    panel: CountPanel,
    spec: ModelSpec,
    prior: PriorSpec,
    config: SamplerConfig,
    chain_id: int,
    out_dir: Path | None,
    resume: bool,
):
    sampler = ChainSampler(panel, spec, prior, config, chain_id)
    kept: list[np.ndarray] = []
    kept_iters: list[int] = []
    kept_latent: list[np.ndarray] = []
    scale_trace: list[np.ndarray] = []
    csv_path = ck_path = None
    n_persisted = 0
    if out_dir is not None:
        csv_path = out_dir / f"chain_{chain_id:02d}.csv"
        ck_path = out_dir / f"chain_{chain_id:02d}.ckpt"

    if resume and ck_path is not None and ck_path.exists():
        with open(ck_path, "rb") as fh:
            saved = pickle.load(fh)
        sampler.restore(saved["sampler"])
        kept = [row.copy() for row in saved["kept"]]
        kept_iters = list(saved["kept_iters"])
        kept_latent = [arr.copy() for arr in saved["kept_latent"]]
        scale_trace = list(saved["scale_trace"])
        n_persisted = saved["n_persisted"]

    def flush():
        nonlocal n_persisted
        if csv_path is None:
            return
        mode = "a" if n_persisted else "w"
        with open(csv_path, mode, newline="") as fh:
            w = csv.writer(fh)
            if not n_persisted:
                w.writerow(["iteration", "parameter", "value"])
            for k in range(n_persisted, len(kept)):
                for j, nm in enumerate(sampler.layout.names):
                    w.writerow([kept_iters[k], nm, repr(float(kept[k][j]))])
        n_persisted = len(kept)
        with open(ck_path, "wb") as fh:
            pickle.dump(
                {
                    "sampler": sampler.checkpoint(),
                    "kept": kept,
                    "kept_iters": kept_iters,
                    "kept_latent": kept_latent,
                    "scale_trace": scale_trace,
                    "n_persisted": n_persisted,
                },
                fh,
            )

    while sampler.iteration < config.n_iter:
        sampler.step()
        it = sampler.iteration - 1  # iteration index just completed
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            kept.append(sampler.vec.copy())
            kept_iters.append(it)
            scale_trace.append(sampler.adapt.scales_snapshot())
            if sampler.family.needs_augmentation and config.store_latent:
                kept_latent.append(sampler.x.copy())
        if (
            config.checkpoint_every
            and sampler.iteration % config.checkpoint_every == 0
        ):
            flush()
    flush()
    return (
        np.asarray(kept),
        np.asarray(kept_iters, dtype=np.int64),
        (np.asarray(kept_latent, dtype=np.int8) if kept_latent else None),
        np.asarray(scale_trace),
    )


def run_chains(
    panel: CountPanel,
    spec: ModelSpec,
    prior: PriorSpec | None = None,
    config: SamplerConfig | None = None,
    out_dir=None,
    threads: int = 1,
    resume: bool = False,
) -> PosteriorDraws:
    """Run n_chains independent chains; bit-reproducible given (seed, config).

    Chains are independent and may run in separate processes (threads > 1);
    results are merged in chain order so parallelism never changes output.
    """
    prior = prior or spec.prior
    config = config or SamplerConfig()
    config.validate()
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)

    args = [(panel, spec, prior, config, c, out_path, resume) for c in range(config.n_chains)]
    if threads > 1 and config.n_chains > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=min(threads, config.n_chains)) as ex:
            results = list(ex.map(_run_one_chain_star, args))
    else:
        results = [_run_one_chain(*a) for a in args]

    layout = ParamLayout.build(spec, panel)
    chains = [r[0] for r in results]
    iters = [r[1] for r in results]
    latents = [r[2] for r in results]
    traces = [r[3] for r in results]
    latent = None
    if spec.family.needs_augmentation and config.store_latent and all(
        l is not None for l in latents
    ):
        latent = list(latents)
    return PosteriorDraws(
        names=list(layout.names),
        chains=chains,
        iterations=iters,
        layout=layout,
        spec=spec,
        config=config,
        latent=latent,
        scale_traces=traces,
    )


def _run_one_chain_star(a):
    return _run_one_chain(*a)
