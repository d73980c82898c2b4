"""Switching and zero-inflated negative-binomial models for weekly areal
count panels: simulation, MCMC fitting, WAIC, forecasting and scoring."""

__version__ = "0.1.0"

from .diagnostics import DiagnosticsReport, diagnostics
from .distributions import (
    DegenerateOverdispersionError,
    MomentMatchedNB,
    NBParams,
    ParameterDomainError,
    SupportError,
    ThinnedZTNBParams,
    moment_match,
    nb_logpmf,
    nb_pmf,
    sample_nb,
    sample_thinned,
    sample_ztnb,
    thinned_ztnb_logpmf,
    thinned_ztnb_pmf,
    total_variation,
    ztnb_logpmf,
    ztnb_pmf,
)
from .evaluation import (
    FittedValues,
    ForecastDraws,
    ScoreReport,
    WaicResult,
    averaged_rps,
    compare_reports,
    fitted_values,
    forecast,
    permutation_test,
    rps,
    rps_samples,
    score_forecasts,
    waic,
)
from .mcmc import (
    ParamLayout,
    PosteriorDraws,
    SamplerConfig,
    run_chains,
    update_latent_states,
    update_parameters,
)
from .model import (
    CouplingError,
    Family,
    LatentStates,
    ModelSpec,
    ParameterState,
    PriorSpec,
    SpecError,
    forward_loglik_zi,
    joint_loglik,
    loglik,
    marginal_loglik_hurdle,
    mean_components,
    obs_loglik,
    overdispersion,
    predictive_logdens,
    transition_probs,
)
from .panel import CountPanel, PanelValidationError, load_panel, write_panel
from .simulate import (
    SimulationScenario,
    grid_adjacency,
    ring_adjacency,
    scenario_presets,
    simulate_panel,
)

__all__ = [name for name in dir() if not name.startswith("_")]
