"""Evaluation layer: WAIC against hand sums, rps against hand values,
permutation test against exhaustive enumeration, forecast path properties."""

import itertools

import numpy as np
import pytest
from scipy.special import expit

from conftest import make_panel, quick_scenario, stable_params
from episwitch.distributions import NBParams, nb_logpmf, nb_pmf, ztnb_mean
from episwitch.evaluation import (
    ForecastDraws,
    NumericalError,
    PairingError,
    ScoreReport,
    averaged_rps,
    compare_reports,
    fitted_values,
    forecast,
    permutation_test,
    read_score_csv,
    rps,
    rps_samples,
    score_forecasts,
    waic,
    write_score_csv,
)
from episwitch.mcmc import ParamLayout, PosteriorDraws, SamplerConfig, run_chains
from episwitch.model import (
    Family,
    ModelSpec,
    apply_constraints,
    filtered_presence,
    mean_components,
    overdispersion,
)
from episwitch.simulate import simulate_panel


def draws_from_states(panel, spec, states, latent=None):
    """PosteriorDraws built from explicit parameter states, one chain."""
    lay = ParamLayout.build(spec, panel)
    mat = np.stack([lay.pack(apply_constraints(th, spec)) for th in states])
    cfg = SamplerConfig(n_iter=max(len(states), 2), burn_in=0, n_chains=1, thin=1)
    return PosteriorDraws(
        names=list(lay.names),
        chains=[mat],
        iterations=[np.arange(len(states))],
        layout=lay,
        spec=spec,
        config=cfg,
        latent=None if latent is None else [np.asarray(latent, dtype=np.int8)],
    )


@pytest.fixture(scope="module")
def zs_fit():
    scen = quick_scenario(Family.ZS_MSNB, n_areas=3, n_weeks=25, seed=12)
    panel, _ = simulate_panel(scen)
    cfg = SamplerConfig(n_iter=200, burn_in=80, n_chains=2, thin=4, seed=3)
    return panel, scen.spec, run_chains(panel, scen.spec, config=cfg)


@pytest.fixture(scope="module")
def nbh_fit():
    scen = quick_scenario(Family.NBH, n_areas=3, n_weeks=25, seed=13)
    panel, _ = simulate_panel(scen)
    cfg = SamplerConfig(n_iter=200, burn_in=80, n_chains=2, thin=4, seed=4)
    return panel, scen.spec, run_chains(panel, scen.spec, config=cfg)


class TestWaic:
    def test_hand_computation_nb(self):
        panel = make_panel([[1, 2, 0]], covariates=np.array([[0.4]]))
        spec = ModelSpec(family=Family.NB, center_covariates=False)
        states = [stable_params(1, seed=s) for s in (1, 2, 3)]
        draws = draws_from_states(panel, spec, states)

        logp = np.zeros((3, 2))  # draws x weeks 1..2
        for m, th in enumerate(states):
            for t in (1, 2):
                mu = mean_components(panel, spec, th, 0, t)[2]
                r = overdispersion(panel, spec, th, 0, t)
                logp[m, t - 1] = nb_logpmf(int(panel.counts[0, t]), NBParams(mu, r))
        lpdd = np.log(np.exp(logp).mean(axis=0)).sum()
        pwaic = logp.var(axis=0, ddof=1).sum()

        res = waic(panel, spec, draws)
        assert res.lpdd == pytest.approx(lpdd, rel=1e-10)
        assert res.pwaic == pytest.approx(pwaic, rel=1e-10)
        assert res.waic == pytest.approx(-2.0 * (lpdd - pwaic), rel=1e-10)
        assert res.n_draws == 3
        trip = tuple(res)
        assert trip == (res.lpdd, res.pwaic, res.waic)

    def test_identical_draws_zero_penalty(self):
        panel = make_panel([[1, 2, 0]], covariates=np.array([[0.4]]))
        spec = ModelSpec(family=Family.NB, center_covariates=False)
        th = stable_params(1, seed=1)
        res = waic(panel, spec, draws_from_states(panel, spec, [th, th.copy()]))
        assert res.pwaic == pytest.approx(0.0, abs=1e-12)
        assert res.waic == pytest.approx(-2.0 * res.lpdd, rel=1e-12)

    def test_numerical_error_names_cell(self):
        panel = make_panel([[1, 2, 0]], covariates=np.array([[0.4]]))
        spec = ModelSpec(family=Family.NB, center_covariates=False)
        bad = stable_params(1, seed=1)
        bad.b0 = np.array([800.0])  # mean overflows wherever y_prev > 0
        with pytest.raises(NumericalError, match=r"area A01, week 2"):
            waic(panel, spec, draws_from_states(panel, spec, [bad]))

    def test_zs_msnb_warns_and_needs_latent(self, zs_fit):
        panel, spec, draws = zs_fit
        with pytest.warns(UserWarning, match="conditional on the sampled states"):
            res = waic(panel, spec, draws)
        assert np.isfinite(res.waic)
        bare = PosteriorDraws(
            names=draws.names, chains=draws.chains, iterations=draws.iterations,
            layout=draws.layout, spec=spec, config=draws.config, latent=None,
        )
        with pytest.warns(UserWarning):
            with pytest.raises(ValueError, match="latent"):
                waic(panel, spec, bare)

    def test_subsampling_cap(self, nbh_fit):
        panel, spec, draws = nbh_fit
        res = waic(panel, spec, draws, max_draws=10, seed=1)
        assert res.n_draws == 10


class TestRps:
    def test_hand_values(self):
        assert rps_samples([0, 2], 1) == pytest.approx(0.5)
        assert rps_samples([1, 1, 1], 1) == 0.0
        assert rps_samples([0, 0, 0, 0], 3) == pytest.approx(3.0)
        # {0,1} vs 0: j=0 term (0.5-1)^2, j=1 term 0
        assert rps_samples([0, 1], 0) == pytest.approx(0.25)

    def test_brute_force_random_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            arr = rng.integers(0, 8, size=rng.integers(2, 40))
            y = int(rng.integers(0, 10))
            jmax = int(max(arr.max(), y))
            hand = sum(
                (np.mean(arr <= j) - (1.0 if y <= j else 0.0)) ** 2
                for j in range(jmax + 1)
            )
            assert rps_samples(arr, y) == pytest.approx(hand, rel=1e-12)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="at least 2"):
            rps_samples([3], 1)
        with pytest.raises(ValueError, match="nonnegative"):
            rps_samples([1, 2], -1)

    def test_forecast_wrapper_indexing(self):
        samples = np.zeros((4, 2, 3), dtype=np.int64)
        samples[:, 1, 2] = [0, 2, 0, 2]
        fc = ForecastDraws(origin=10, horizon=3, area_ids=["a", "b"], samples=samples, presence_samples=None)
        obs = np.array([[0, 0, 0], [0, 0, 1]])
        assert rps(fc, obs, 1, 3) == pytest.approx(rps_samples([0, 2, 0, 2], 1))
        with pytest.raises(ValueError, match="outside"):
            rps(fc, obs, 0, 4)

    def test_averaged(self):
        assert averaged_rps([1.0, 2.0, 3.0]) == 2.0
        with pytest.raises(ValueError, match="empty scoring window"):
            averaged_rps([])
        with pytest.raises(ValueError):
            averaged_rps([1.0, -0.5])

    def test_proper_scoring_sanity(self):
        # forecasting from the true law beats a shifted law on average
        rng = np.random.default_rng(5)
        p_true = NBParams(4.0, 2.0)
        p_off = NBParams(9.0, 2.0)
        good = bad = 0.0
        n_rep = 400
        for _ in range(n_rep):
            y = int(rng.negative_binomial(2.0, 2.0 / 6.0))
            good += rps_samples(rng.negative_binomial(p_true.r, p_true.r / (p_true.r + p_true.mu), 300), y)
            bad += rps_samples(rng.negative_binomial(p_off.r, p_off.r / (p_off.r + p_off.mu), 300), y)
        assert good / n_rep < bad / n_rep


class TestPermutationTest:
    def test_exhaustive_matches_brute_force(self):
        # integer-valued scores keep every sign-pattern statistic exact, so
        # tie handling agrees between implementation and enumeration
        rng = np.random.default_rng(1)
        a = rng.integers(0, 10, 10).astype(float)
        b = rng.integers(0, 10, 10).astype(float)
        d = a - b
        observed = abs(d.mean())
        stats = [
            abs(np.mean(np.asarray(signs) * d))
            for signs in itertools.product([-1, 1], repeat=10)
        ]
        expected = np.mean(np.asarray(stats) >= observed)
        assert permutation_test(a, b, n_perm=10000) == pytest.approx(expected, abs=1e-12)

    def test_identical_lists_give_one(self):
        a = np.array([0.3, 0.4, 0.5])
        assert permutation_test(a, a.copy()) == 1.0

    def test_sampled_mode_properties(self):
        rng = np.random.default_rng(2)
        a = rng.gamma(2.0, 1.0, 80)
        b = a + rng.normal(0.8, 0.1, 80)  # strongly separated
        p1 = permutation_test(a, b, n_perm=2000, rng=7)
        p2 = permutation_test(a, b, n_perm=2000, rng=7)
        assert p1 == p2
        assert 0.0 < p1 <= 1.0
        assert p1 == pytest.approx(1.0 / 2001.0)  # only the identity pattern is as extreme
        null = rng.normal(0.0, 1.0, 80)
        p_null = permutation_test(null, np.zeros(80), n_perm=2000, rng=8)
        assert p_null > 0.05

    def test_pairing_errors(self):
        with pytest.raises(PairingError):
            permutation_test([1.0, 2.0], [1.0])
        with pytest.raises(PairingError):
            permutation_test([], [])


class TestScoreReport:
    def make(self, model="m", scores=(1.0, 2.0, 3.0, 4.0)):
        return ScoreReport(
            model,
            np.array(["b", "a", "b", "a"], object),
            [5, 5, 6, 6],
            [1, 1, 1, 2],
            list(scores),
        )

    def test_sorted_and_averaged(self):
        rep = self.make()
        assert rep.cells() == [("a", 5, 1), ("b", 5, 1), ("a", 6, 2), ("b", 6, 1)]
        assert rep.averaged() == 2.5
        assert rep.by_horizon() == {1: pytest.approx((1.0 + 2.0 + 3.0) / 3), 2: 4.0}

    def test_pairing(self):
        a, b = self.make("x"), self.make("y", (9.0, 8.0, 7.0, 6.0))
        sa, sb = a.paired_with(b)
        assert sa.shape == sb.shape == (4,)
        other = ScoreReport("z", np.array(["a"], object), [5], [1], [1.0])
        with pytest.raises(PairingError, match="different"):
            a.paired_with(other)

    def test_csv_round_trip(self, tmp_path):
        reports = [self.make("x"), self.make("y", (9.0, 8.0, 7.0, 6.0))]
        path = tmp_path / "scores.csv"
        write_score_csv(reports, path)
        again = read_score_csv(path)
        assert [r.model for r in again] == ["x", "y"]
        np.testing.assert_array_equal(again[0].score, reports[0].score)
        assert again[0].cells() == reports[0].cells()

    def test_read_rejects_wrong_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("model,area_id,origin\nm,a,5\n")
        with pytest.raises(ValueError, match="expected columns"):
            read_score_csv(path)


class TestForecast:
    def test_shapes_and_determinism(self, nbh_fit):
        panel, spec, draws = nbh_fit
        fc = forecast(panel, spec, draws, origin=20, horizon=3, seed=5)
        m = draws.n_draws * draws.n_chains
        assert fc.samples.shape == (m, 3, 3)
        assert fc.presence_samples.shape == (m, 3, 3)
        again = forecast(panel, spec, draws, origin=20, horizon=3, seed=5)
        np.testing.assert_array_equal(fc.samples, again.samples)
        other_seed = forecast(panel, spec, draws, origin=20, horizon=3, seed=6)
        assert not np.array_equal(fc.samples, other_seed.samples)

    def test_prefix_stability(self, nbh_fit):
        panel, spec, draws = nbh_fit
        short = forecast(panel, spec, draws, origin=20, horizon=2, seed=5)
        long = forecast(panel, spec, draws, origin=20, horizon=5, seed=5)
        np.testing.assert_array_equal(short.samples, long.samples[:, :, :2])

    def test_origins_use_distinct_streams(self, nbh_fit):
        panel, spec, draws = nbh_fit
        a = forecast(panel, spec, draws, origin=19, horizon=2, seed=5)
        b = forecast(panel, spec, draws, origin=20, horizon=2, seed=5)
        assert not np.array_equal(a.samples, b.samples)

    def test_argument_validation(self, nbh_fit):
        panel, spec, draws = nbh_fit
        with pytest.raises(ValueError, match="not in the panel"):
            forecast(panel, spec, draws, origin=999, horizon=2)
        with pytest.raises(ValueError, match="positive"):
            forecast(panel, spec, draws, origin=20, horizon=0)

    def test_hurdle_presence_tracks_positivity(self, nbh_fit):
        panel, spec, draws = nbh_fit
        fc = forecast(panel, spec, draws, origin=18, horizon=4, seed=7)
        np.testing.assert_array_equal(fc.presence_samples.astype(bool), fc.samples > 0)

    def test_zs_absent_areas_emit_zero(self, zs_fit):
        panel, spec, draws = zs_fit
        fc = forecast(panel, spec, draws, origin=18, horizon=4, seed=7)
        assert np.all(fc.samples[fc.presence_samples == 0] == 0)
        assert np.all(fc.samples[fc.samples > 0] >= 0)

    def test_nb_has_no_presence_block(self):
        scen = quick_scenario(Family.NB, n_areas=2, n_weeks=20, seed=14)
        panel, _ = simulate_panel(scen)
        draws = draws_from_states(panel, scen.spec, [stable_params(2, seed=1), stable_params(2, seed=2)])
        fc = forecast(panel, scen.spec, draws, origin=15, horizon=2, seed=0)
        assert fc.presence_samples is None
        assert fc.n_paths == 2

    def test_absorbing_absence(self):
        # hurdle process that can never reemerge stays at zero forever
        counts = np.array([[3, 1, 0, 0], [2, 2, 0, 0]])
        panel = make_panel(counts)
        spec = ModelSpec(family=Family.NBH)
        th = stable_params(2, seed=3)
        th.alpha0_persist = -40.0
        th.alpha_persist = np.array([0.0])
        th.delta_persist = 0.0
        draws = draws_from_states(panel, spec, [th, th.copy()])
        fc = forecast(panel, spec, draws, origin=4, horizon=6, seed=0)
        assert fc.samples.max() == 0
        assert fc.presence_samples.max() == 0

    def test_max_draws_subsamples(self, nbh_fit):
        panel, spec, draws = nbh_fit
        fc = forecast(panel, spec, draws, origin=20, horizon=2, seed=5, max_draws=7)
        assert fc.samples.shape[0] == 7

    def test_save_csv(self, nbh_fit, tmp_path):
        panel, spec, draws = nbh_fit
        fc = forecast(panel, spec, draws, origin=20, horizon=2, seed=5, max_draws=4)
        path = tmp_path / "fc.csv"
        fc.save_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "draw,area_id,k,week,count,presence"
        assert len(lines) == 1 + 4 * 3 * 2

    def test_zs_extension_past_fit_window(self):
        # non-spatial switching fit extends its filter to a later origin
        scen = quick_scenario(Family.ZS_MSNB, n_areas=3, n_weeks=30, seed=15)
        panel, _ = simulate_panel(scen)
        fit_panel = panel.truncate_weeks(20)
        cfg = SamplerConfig(n_iter=120, burn_in=40, n_chains=1, thin=4, seed=6)
        draws = run_chains(fit_panel, scen.spec, config=cfg)
        fc = forecast(panel, scen.spec, draws, origin=25, horizon=2, seed=1)
        assert fc.samples.shape == (20, 3, 2)

    def test_zs_spatial_extension_refused(self):
        scen = quick_scenario(Family.ZS_MSNB, n_areas=4, n_weeks=30, seed=16, spatial=True)
        panel, _ = simulate_panel(scen)
        fit_panel = panel.truncate_weeks(20)
        cfg = SamplerConfig(n_iter=120, burn_in=40, n_chains=1, thin=4, seed=6)
        draws = run_chains(fit_panel, scen.spec, config=cfg)
        with pytest.raises(Exception, match="refit including the origin week"):
            forecast(panel, scen.spec, draws, origin=25, horizon=2, seed=1)


class TestFittedValues:
    def test_nb_single_draw_mean_is_analytic(self):
        panel = make_panel([[1, 2, 0, 4]], covariates=np.array([[0.4]]))
        spec = ModelSpec(family=Family.NB, center_covariates=False)
        th = stable_params(1, seed=2)
        fv = fitted_values(panel, spec, draws_from_states(panel, spec, [th]))
        assert np.isnan(fv.mean[0, 0]) and np.isnan(fv.lower[0, 0])
        for t in (1, 2, 3):
            mu = mean_components(panel, spec, th, 0, t)[2]
            assert fv.mean[0, t] == pytest.approx(mu, rel=1e-10)
        np.testing.assert_allclose(fv.presence, 1.0)

    def test_hurdle_single_draw_mean(self):
        panel = make_panel([[2, 0, 4]], covariates=np.array([[0.4]]))
        spec = ModelSpec(family=Family.NBH, center_covariates=False)
        th = apply_constraints(stable_params(1, seed=3), spec)
        fv = fitted_values(panel, spec, draws_from_states(panel, spec, [th]))
        # t=2: previous week zero, so the reemergence row drives the mean
        l01 = th.alpha0_reemerge + th.alpha_reemerge[0] * 0.4
        mu = mean_components(panel, spec, th, 0, 2)[2]
        r = overdispersion(panel, spec, th, 0, 2)
        want = expit(l01) * ztnb_mean(NBParams(mu, r))
        assert fv.mean[0, 2] == pytest.approx(want, rel=1e-10)
        np.testing.assert_array_equal(fv.presence, (panel.counts > 0).astype(float))

    def test_zinb_presence_is_smoothed(self):
        panel = make_panel([[3, 0, 2]], covariates=np.array([[0.4]]))
        spec = ModelSpec(family=Family.ZINB, center_covariates=False)
        th = apply_constraints(stable_params(1, seed=4), spec)
        fv = fitted_values(panel, spec, draws_from_states(panel, spec, [th]))
        assert fv.presence[0, 0] == 1.0 and fv.presence[0, 2] == 1.0
        # hand smoother: enumerate x_1 given both neighbours observed positive
        l01_2 = th.alpha0_reemerge + th.alpha_reemerge[0] * 0.4
        l11_1 = th.alpha0_persist + th.alpha_persist[0] * 0.4 + th.delta_persist * np.log1p(3)
        l11_2 = th.alpha0_persist + th.alpha_persist[0] * 0.4 + th.delta_persist * np.log1p(0)
        mu1 = mean_components(panel, spec, th, 0, 1)[2]
        r1 = overdispersion(panel, spec, th, 0, 1)
        mu2 = mean_components(panel, spec, th, 0, 2)[2]
        r2 = overdispersion(panel, spec, th, 0, 2)
        path1 = expit(l11_1) * nb_pmf(0, NBParams(mu1, r1)) * expit(l11_2) * nb_pmf(2, NBParams(mu2, r2))
        path0 = (1 - expit(l11_1)) * expit(l01_2) * nb_pmf(2, NBParams(mu2, r2))
        want = path1 / (path1 + path0)
        assert fv.presence[0, 1] == pytest.approx(want, rel=1e-8)

    def test_zinb_last_week_presence_equals_filter(self):
        panel = make_panel([[3, 0]], covariates=np.array([[0.4]]))
        spec = ModelSpec(family=Family.ZINB, center_covariates=False)
        th = apply_constraints(stable_params(1, seed=5), spec)
        fv = fitted_values(panel, spec, draws_from_states(panel, spec, [th]))
        filt = filtered_presence(panel, spec, th)
        assert fv.presence[0, 1] == pytest.approx(filt[0, 1], rel=1e-10)

    def test_zs_presence_is_latent_mean(self, zs_fit):
        panel, spec, draws = zs_fit
        fv = fitted_values(panel, spec, draws, max_draws=None)
        lat = draws.stacked_latent()
        np.testing.assert_allclose(fv.presence, lat.astype(float).mean(axis=0))
        bare = PosteriorDraws(
            names=draws.names, chains=draws.chains, iterations=draws.iterations,
            layout=draws.layout, spec=spec, config=draws.config, latent=None,
        )
        with pytest.raises(ValueError, match="latent"):
            fitted_values(panel, spec, bare)

    def test_interval_orders_and_csv(self, nbh_fit, tmp_path):
        panel, spec, draws = nbh_fit
        fv = fitted_values(panel, spec, draws)
        ok = ~np.isnan(fv.mean)
        assert np.all(fv.lower[ok] <= fv.upper[ok])
        path = tmp_path / "fitted.csv"
        fv.save_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "area_id,week,mean,lower,upper,presence"
        assert len(lines) == 1 + panel.n_areas * panel.n_weeks


class TestScoreForecasts:
    def test_cells_and_truncation(self, nbh_fit):
        panel, spec, draws = nbh_fit
        # panel has weeks 1..25; origin 23 leaves only 2 scorable horizons
        rep = score_forecasts(panel, spec, draws, origins=[20, 23], horizon=4, seed=2)
        cells = rep.cells()
        assert ("A01", 20, 4) in cells
        assert ("A01", 23, 2) in cells
        assert ("A01", 23, 3) not in cells
        assert rep.n_cells == 3 * 4 + 3 * 2
        assert rep.model == "nbh"

    def test_label_override(self, nbh_fit):
        panel, spec, draws = nbh_fit
        rep = score_forecasts(panel, spec, draws, origins=[20], horizon=1, model_label="mine")
        assert rep.model == "mine"

    def test_origin_without_future_rejected(self, nbh_fit):
        panel, spec, draws = nbh_fit
        with pytest.raises(ValueError, match="no observed weeks after origin"):
            score_forecasts(panel, spec, draws, origins=[25], horizon=2)

    def test_scores_match_direct_rps(self, nbh_fit):
        panel, spec, draws = nbh_fit
        rep = score_forecasts(panel, spec, draws, origins=[20], horizon=2, seed=9)
        fc = forecast(panel, spec, draws, origin=20, horizon=2, seed=9)
        pos = list(panel.week_index).index(20)
        want = rps_samples(fc.samples[:, 1, 0], int(panel.counts[1, pos + 1]))
        got = rep.score[[c == ("A02", 20, 1) for c in rep.cells()]]
        assert got[0] == pytest.approx(want, rel=1e-12)


class TestCompareReports:
    def test_summary_structure(self, nbh_fit):
        panel, spec, draws = nbh_fit
        a = score_forecasts(panel, spec, draws, origins=[18, 20], horizon=2, seed=1, model_label="one")
        b = score_forecasts(panel, spec, draws, origins=[18, 20], horizon=2, seed=2, model_label="two")
        out = compare_reports([a, b], n_perm=500, seed=0)
        assert out["models"] == ["one", "two"]
        assert set(out["averaged_rps"]["one"]) == {"1", "2"}
        assert set(out["best_by_horizon"]) == {"1", "2"}
        assert len(out["p_values"]) == 1
        entry = out["p_values"][0]
        assert 0.0 < entry["p_value"] <= 1.0
        assert entry["model_a"] == "one" and entry["model_b"] == "two"
        assert out["best_by_horizon"]["1"] in ("one", "two")

    def test_single_report_warns(self, nbh_fit):
        panel, spec, draws = nbh_fit
        rep = score_forecasts(panel, spec, draws, origins=[20], horizon=1)
        with pytest.warns(UserWarning, match="degenerate"):
            out = compare_reports([rep])
        assert out["p_values"] == []

    def test_mismatched_cells_raise(self, nbh_fit):
        panel, spec, draws = nbh_fit
        a = score_forecasts(panel, spec, draws, origins=[18], horizon=2, model_label="one")
        b = score_forecasts(panel, spec, draws, origins=[20], horizon=2, model_label="two")
        with pytest.raises(PairingError):
            compare_reports([a, b])
