"""Shared builders for small deterministic panels and scenarios."""

import numpy as np
import pytest

from episwitch.model import Family, ModelSpec, ParameterState
from episwitch.panel import CountPanel
from episwitch.simulate import SimulationScenario, simulate_panel


def make_panel(counts, adjacency=None, covariates=None, populations=None, week_start=1):
    counts = np.asarray(counts, dtype=np.int64)
    n, t = counts.shape
    if adjacency is None:
        adjacency = np.zeros((n, n), dtype=bool)
        for i in range(n - 1):
            adjacency[i, i + 1] = adjacency[i + 1, i] = True
    if covariates is None:
        covariates = np.linspace(-1.0, 1.0, n).reshape(n, 1)
    covariates = np.asarray(covariates, dtype=float)
    if populations is None:
        populations = np.linspace(1e4, 5e4, n)
    return CountPanel(
        counts=counts,
        week_index=np.arange(week_start, week_start + t),
        area_ids=[f"A{k + 1:02d}" for k in range(n)],
        populations=np.asarray(populations, dtype=float),
        covariates=covariates,
        covariate_names=[f"x{j + 1}" for j in range(covariates.shape[1])],
        adjacency=np.asarray(adjacency, dtype=bool),
    )


def stable_params(n_areas, d=1, seed=11, **overrides):
    """A hand-tuned parameter point giving low-count, non-explosive panels."""
    theta = ParameterState.zeros(n_areas, d)
    theta.beta0_ar = -0.8
    theta.beta_ar = np.full(d, 0.2)
    theta.beta0_en = -0.5
    theta.beta1_en = 0.1
    theta.beta2_en = 0.4
    theta.beta3_en = -0.2
    theta.alpha0_reemerge = -1.0
    theta.alpha_reemerge = np.full(d, 0.3)
    theta.alpha0_persist = 0.3
    theta.alpha_persist = np.full(d, 0.3)
    theta.delta_persist = 0.6
    theta.alpha0_overdisp = 0.5
    theta.alpha_overdisp = np.full(d, 0.1)
    theta.delta_overdisp = 0.2
    theta.sigma_b0 = 0.2
    theta.sigma_b = 0.25
    for key, val in overrides.items():
        cur = getattr(theta, key)
        setattr(theta, key, np.asarray(val, dtype=float) if isinstance(cur, np.ndarray) else float(val))
    rng = np.random.default_rng(seed)
    theta.b0 = theta.beta0_ar + theta.sigma_b0 * rng.standard_normal(n_areas)
    pops = np.linspace(1e4, 5e4, n_areas)
    theta.b = theta.beta0_en + theta.beta1_en * np.log(pops) + theta.sigma_b * rng.standard_normal(n_areas)
    return theta


def quick_scenario(family, n_areas=4, n_weeks=40, seed=7, spatial=False, **overrides):
    spec = ModelSpec(family=Family(family), spatial_terms=spatial)
    theta = stable_params(n_areas, d=1, seed=seed, **overrides)
    if spatial:
        theta.gamma_reemerge = 0.5
        theta.gamma_persist = 0.5
    return SimulationScenario(
        spec=spec,
        true_params=theta,
        n_areas=n_areas,
        n_weeks=n_weeks,
        seed=seed,
        adjacency="ring",
        covariate_gen="normal",
        covariate_names=["risk"],
        init_presence=0.6,
        populations=np.linspace(1e4, 5e4, n_areas),
    )


@pytest.fixture
def zs_panel():
    panel, latent = simulate_panel(quick_scenario(Family.ZS_MSNB, n_areas=3, n_weeks=30, seed=5))
    return panel, latent


@pytest.fixture
def hurdle_panel():
    panel, latent = simulate_panel(quick_scenario(Family.ZS_MSNBH, n_areas=3, n_weeks=30, seed=6))
    return panel, latent
