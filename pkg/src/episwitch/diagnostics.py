"""Convergence diagnostics: split-chain R-hat and autocorrelation ESS.

R-hat follows the split-chain construction: each chain is halved, the
between/within variance ratio is computed over the resulting 2C sequences,
and R-hat = sqrt(var_plus / W) with var_plus = (n-1)/n W + B_over_n.

ESS uses FFT autocovariances averaged across split chains and the initial
positive sequence rule: autocorrelations are summed in adjacent pairs until
a pair sum turns negative, which gives a consistent, slightly conservative
integrated autocorrelation time for reversible chains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mcmc import InsufficientDrawsError, PosteriorDraws

RHAT_BAR = 1.05
ESS_BAR = 1000.0


def _split(series: np.ndarray) -> np.ndarray:
    """(C, n) -> (2C, n//2); drops one draw per chain when n is odd."""
    series = np.atleast_2d(np.asarray(series, dtype=float))
    n = series.shape[1]
    half = n // 2
    return np.concatenate([series[:, :half], series[:, n - half :]], axis=0)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of one sequence (denominator n), via FFT."""
    n = x.size
    xc = x - x.mean()
    size = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real
    return acov / n


def rhat(series: np.ndarray) -> float:
    """Split-chain potential scale reduction factor for one parameter."""
    chains = _split(series)
    m, n = chains.shape
    if n < 2:
        raise InsufficientDrawsError("rhat needs at least 4 draws per chain")
    w = float(np.mean(np.var(chains, axis=1, ddof=1)))
    b_over_n = float(np.var(np.mean(chains, axis=1), ddof=1))
    var_plus = (n - 1) / n * w + b_over_n
    if w == 0.0:
        return np.nan  # constant chains: undefined, flagged by the caller
    return float(np.sqrt(var_plus / w))


def ess(series: np.ndarray) -> float:
    """Effective sample size across chains for one parameter."""
    chains = _split(series)
    m, n = chains.shape
    if n < 2:
        raise InsufficientDrawsError("ess needs at least 4 draws per chain")
    w = float(np.mean(np.var(chains, axis=1, ddof=1)))
    if w == 0.0:
        return np.nan
    b_over_n = float(np.var(np.mean(chains, axis=1), ddof=1))
    var_plus = (n - 1) / n * w + b_over_n
    acov = np.mean([_autocov(chains[i]) for i in range(m)], axis=0)
    rho = 1.0 - (w - acov) / var_plus
    rho[0] = 1.0
    # initial positive sequence on pair sums rho_{2k} + rho_{2k+1}
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0.0:
            break
        tau += 2.0 * pair
        t += 2
    return float(m * n / tau)


@dataclass
class ParameterDiagnostic:
    name: str
    rhat: float
    ess: float
    flagged: bool
    reason: str = ""


@dataclass
class DiagnosticsReport:
    rows: list[ParameterDiagnostic]

    @property
    def flagged(self) -> list[ParameterDiagnostic]:
        return [r for r in self.rows if r.flagged]

    @property
    def ok(self) -> bool:
        return not self.flagged

    def row(self, name: str) -> ParameterDiagnostic:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def max_rhat(self) -> float:
        vals = [r.rhat for r in self.rows if np.isfinite(r.rhat)]
        return max(vals) if vals else np.nan

    def min_ess(self) -> float:
        vals = [r.ess for r in self.rows if np.isfinite(r.ess)]
        return min(vals) if vals else np.nan

    def to_dict(self) -> dict:
        return {
            r.name: {
                "rhat": None if not np.isfinite(r.rhat) else round(r.rhat, 5),
                "ess": None if not np.isfinite(r.ess) else round(r.ess, 1),
                "flagged": r.flagged,
                "reason": r.reason,
            }
            for r in self.rows
        }


def diagnostics(draws: PosteriorDraws, names: list[str] | None = None) -> DiagnosticsReport:
    """Per-parameter R-hat/ESS with flags for R-hat >= 1.05 or ESS <= 1000.

    Defaults to the top-level coefficients plus the two scale parameters
    (the usual convergence bar); pass explicit names to widen or narrow.
    """
    if draws.n_chains < 2:
        raise InsufficientDrawsError("diagnostics need at least 2 chains")
    if draws.n_draws < 10:
        raise InsufficientDrawsError("diagnostics need at least 10 retained draws per chain")
    if names is None:
        names = draws.layout.top_level_names() + ["sigma_b0", "sigma_b"]
    rows = []
    for nm in names:
        series = draws.series(nm)
        r = rhat(series)
        e = ess(series)
        if not np.isfinite(r) or not np.isfinite(e):
            rows.append(
                ParameterDiagnostic(nm, np.nan, np.nan, True, "degenerate (constant chain)")
            )
            continue
        reasons = []
        if r >= RHAT_BAR:
            reasons.append(f"rhat {r:.3f} >= {RHAT_BAR}")
        if e <= ESS_BAR:
            reasons.append(f"ess {e:.0f} <= {ESS_BAR:.0f}")
        rows.append(ParameterDiagnostic(nm, r, e, bool(reasons), "; ".join(reasons)))
    return DiagnosticsReport(rows)
