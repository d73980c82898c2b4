"""Count distributions for under-reported disease surveillance.

Negative binomial kernels in mean/overdispersion form, the zero-truncated
variant, and the law of reported counts when true counts are zero-truncated
NB and each case is detected independently with probability p0. Includes the
moment-matched NB approximation of that law and a total-variation utility
for quantifying the approximation error.

Parametrization throughout: NB(mu, r) has mean mu and variance mu + mu^2/r,
i.e. pmf(y) = C(y+r-1, y) (r/(r+mu))^r (mu/(r+mu))^y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import nbinom

from .util import log1mexp


class ParameterDomainError(ValueError):
    """A distribution parameter is outside its domain."""


class SupportError(ValueError):
    """A pmf was evaluated outside the distribution's support."""


class DegenerateOverdispersionError(ValueError):
    """No NB distribution can match the requested variance."""


@dataclass(frozen=True)
class NBParams:
    """Mean/overdispersion parameters of a negative binomial."""

    mu: float
    r: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ParameterDomainError(f"mu must be finite and > 0, got {self.mu}")
        if not (np.isfinite(self.r) and self.r > 0):
            raise ParameterDomainError(f"r must be finite and > 0, got {self.r}")


@dataclass(frozen=True)
class ThinnedZTNBParams:
    """True counts ~ ZTNB(lam, r); each case reported with probability p0."""

    lam: float
    r: float
    p0: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ParameterDomainError(f"lam must be finite and > 0, got {self.lam}")
        if not (np.isfinite(self.r) and self.r > 0):
            raise ParameterDomainError(f"r must be finite and > 0, got {self.r}")
        if not (0.0 < self.p0 <= 1.0):
            raise ParameterDomainError(f"p0 must be in (0, 1], got {self.p0}")


@dataclass(frozen=True)
class MomentMatchedNB:
    """NB(mu_w, r_w) matching the reported-count mean and variance."""

    mu_w: float
    r_w: float


def _check_counts(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.number):
        raise SupportError("counts must be numeric")
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise SupportError("counts must be non-negative integers")
    return y.astype(np.int64)


def nb_logpmf(y, p: NBParams):
    """Log pmf of NB(mu, r); vectorized over y."""
    y = _check_counts(y)
    lq = -np.log1p(p.mu / p.r)  # log P(success), = log(r / (r + mu))
    ls = np.log(p.mu) - np.log(p.r + p.mu)
    out = gammaln(y + p.r) - gammaln(p.r) - gammaln(y + 1) + p.r * lq + y * ls
    return out if out.ndim else float(out)


def nb_pmf(y, p: NBParams):
    return np.exp(nb_logpmf(y, p))


def nb_zero_logprob(p: NBParams) -> float:
    """log P(Y = 0) under NB(mu, r), written to stay accurate for large r."""
    return -p.r * np.log1p(p.mu / p.r)


def ztnb_logpmf(y, p: NBParams):
    """Log pmf of NB(mu, r) conditioned on being positive."""
    y = _check_counts(y)
    if np.any(y == 0):
        raise SupportError("zero-truncated pmf evaluated at 0")
    log_norm = log1mexp(nb_zero_logprob(p))
    out = np.asarray(nb_logpmf(y, p)) - log_norm
    return out if out.ndim else float(out)


def ztnb_pmf(y, p: NBParams):
    return np.exp(ztnb_logpmf(y, p))


def ztnb_mean(p: NBParams) -> float:
    kappa = -np.expm1(nb_zero_logprob(p))
    return p.mu / kappa


def ztnb_var(p: NBParams) -> float:
    kappa = -np.expm1(nb_zero_logprob(p))
    ez = p.mu / kappa
    ez2 = (p.mu + p.mu**2 * (1.0 + 1.0 / p.r)) / kappa
    return ez2 - ez**2


def thinned_ztnb_logpmf(y, p: ThinnedZTNBParams):
    """Log pmf of the reported count: Binomial(p0) thinning of a ZTNB.

    Closed form: with q = r/(r+lam), s = lam/(lam+r), kappa = 1 - q^r and
    B = (lam p0 + r)/(lam + r),

        P(y) = q^r p0^y s^y Gamma(y+r) B^-(r+y) / (kappa y! Gamma(r)),  y > 0
        P(0) = q^r (B^-r - 1) / kappa.

    At p0 = 1 this reduces to the ZTNB pmf, with P(0) exactly 0.
    """
    y = _check_counts(y)
    lam, r, p0 = p.lam, p.r, p.p0
    lq = -np.log1p(lam / r)  # log q
    log_kappa = log1mexp(r * lq)
    log_b = np.log1p(lam * p0 / r) + lq  # log B, B in (q, 1]

    ls = np.log(lam) - np.log(lam + r)
    with np.errstate(divide="ignore"):
        log_p0 = np.log(p0)
        pos = (
            r * lq
            + y * (log_p0 + ls)
            + gammaln(y + r)
            - gammaln(r)
            - gammaln(y + 1)
            - (r + y) * log_b
            - log_kappa
        )
    if p0 == 1.0:
        zero = -np.inf  # thinning is the identity, so 0 is impossible
    else:
        zero = r * lq + np.log(np.expm1(-r * log_b)) - log_kappa
    out = np.where(y > 0, pos, zero)
    return out if out.ndim else float(out)


def thinned_ztnb_pmf(y, p: ThinnedZTNBParams):
    return np.exp(thinned_ztnb_logpmf(y, p))


def thinned_ztnb_mean_var(p: ThinnedZTNBParams) -> tuple[float, float]:
    """Exact mean and variance of the reported count.

    Uses E[Y] = p0 E[Z] and Var(Y) = p0(1-p0) E[Z] + p0^2 Var(Z) with
    Z ~ ZTNB(lam, r).
    """
    zt = NBParams(p.lam, p.r)
    ez = ztnb_mean(zt)
    vz = ztnb_var(zt)
    mean = p.p0 * ez
    var = p.p0 * (1.0 - p.p0) * ez + p.p0**2 * vz
    return float(mean), float(var)


def moment_match(p: ThinnedZTNBParams) -> MomentMatchedNB:
    """NB(mu_w, r_w) with the same mean and variance as the reported count.

    mu_w = p0 lam / kappa and r_w = 1 / (kappa (1 + 1/r) - 1); r_w does not
    depend on p0. When kappa (1 + 1/r) <= 1 the reported count is
    underdispersed relative to every NB and no match exists.
    """
    kappa = -np.expm1(nb_zero_logprob(NBParams(p.lam, p.r)))
    denom = kappa * (1.0 + 1.0 / p.r) - 1.0
    if denom <= 0.0:
        raise DegenerateOverdispersionError(
            f"reported-count variance <= mean at lam={p.lam}, r={p.r}; "
            "no NB moment match exists"
        )
    mu_w = p.p0 * p.lam / kappa
    return MomentMatchedNB(mu_w=float(mu_w), r_w=float(1.0 / denom))


def total_variation(
    p: ThinnedZTNBParams, q: MomentMatchedNB | None = None, tail_eps: float = 1e-10
) -> float:
    """Total variation distance between the exact reported-count law and an
    NB approximation (the moment match of p unless q is given).

    Sums |pmf difference| / 2 over y until both CDFs exceed 1 - tail_eps, so
    the truncation error is below tail_eps.
    """
    if not (0.0 < tail_eps <= 1e-4):
        raise ParameterDomainError(f"tail_eps must be in (0, 1e-4], got {tail_eps}")
    w = moment_match(p) if q is None else q
    nb = NBParams(w.mu_w, w.r_w)
    acc = 0.0
    cdf_exact = 0.0
    cdf_nb = 0.0
    start = 0
    block = 256
    while cdf_exact < 1.0 - tail_eps or cdf_nb < 1.0 - tail_eps:
        ys = np.arange(start, start + block)
        pe = thinned_ztnb_pmf(ys, p)
        pn = nb_pmf(ys, nb)
        acc += 0.5 * float(np.sum(np.abs(pe - pn)))
        cdf_exact += float(np.sum(pe))
        cdf_nb += float(np.sum(pn))
        start += block
        if start > 10_000_000:
            raise RuntimeError("total_variation failed to converge")
    return acc


def sample_nb(p: NBParams, size, rng: np.random.Generator) -> np.ndarray:
    """Draw from NB(mu, r)."""
    return rng.negative_binomial(p.r, p.r / (p.r + p.mu), size=size)


def sample_ztnb(p: NBParams, size, rng: np.random.Generator) -> np.ndarray:
    """Draw from the zero-truncated NB.

    Gamma-Poisson mixture with rejection of zeros; when P(0) > 0.95 the
    rejection loop would thrash, so we switch to inverse-CDF on a uniform
    restricted to (P(0), 1).
    """
    p_zero = np.exp(nb_zero_logprob(p))
    n = int(np.prod(size)) if np.iterable(size) else int(size)
    if p_zero > 0.95:
        u = rng.uniform(p_zero, 1.0, size=n)
        out = nbinom.ppf(u, p.r, p.r / (p.r + p.mu)).astype(np.int64)
        return out.reshape(size)
    out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        need = n - filled
        batch = int(np.ceil(need / (1.0 - p_zero))) + 16
        lam = rng.gamma(shape=p.r, scale=p.mu / p.r, size=batch)
        draws = rng.poisson(lam)
        draws = draws[draws > 0]
        take = min(need, draws.size)
        out[filled : filled + take] = draws[:take]
        filled += take
    return out.reshape(size)


def sample_ztnb_grid(mu: np.ndarray, r: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized ZTNB draws with per-element (mu, r).

    Same mechanism as `sample_ztnb`: gamma-Poisson with zero rejection,
    inverse-CDF for elements whose zero mass exceeds 0.95.
    """
    mu = np.asarray(mu, dtype=float)
    r = np.asarray(r, dtype=float)
    out = np.zeros(mu.shape, dtype=np.int64)
    p_zero = np.exp(-r * np.log1p(mu / r))
    hard = p_zero > 0.95
    if np.any(hard):
        u = rng.uniform(p_zero[hard], 1.0)
        out[hard] = nbinom.ppf(u, r[hard], r[hard] / (r[hard] + mu[hard])).astype(np.int64)
    todo = np.flatnonzero(~hard.ravel())
    mu_f, r_f = mu.ravel(), r.ravel()
    flat = out.ravel()
    for _ in range(200):
        if todo.size == 0:
            break
        lam = rng.gamma(shape=r_f[todo], scale=mu_f[todo] / r_f[todo])
        draws = rng.poisson(lam)
        ok = draws > 0
        flat[todo[ok]] = draws[ok]
        todo = todo[~ok]
    if todo.size:  # pathological zero mass despite the 0.95 split
        u = rng.uniform(p_zero.ravel()[todo], 1.0)
        flat[todo] = nbinom.ppf(
            u, r_f[todo], r_f[todo] / (r_f[todo] + mu_f[todo])
        ).astype(np.int64)
    return flat.reshape(mu.shape)


def sample_thinned(p: ThinnedZTNBParams, size, rng: np.random.Generator) -> np.ndarray:
    """Draw reported counts: ZTNB true counts thinned by Binomial(p0)."""
    z = sample_ztnb(NBParams(p.lam, p.r), size, rng)
    return rng.binomial(z, p.p0)
