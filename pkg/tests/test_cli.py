"""End-to-end CLI runs: exit codes, directory layouts, manifests."""

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from episwitch import __version__
from episwitch.cli import main
from episwitch.evaluation import read_score_csv
from episwitch.util import sha256_file


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim") / "panel"
    rc = run_cli("simulate", "--preset", "two-district-contrast", "--seed", 5, "--out", out)
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def spec_path(sim_dir):
    truth = json.loads((sim_dir / "truth.json").read_text())
    path = sim_dir.parent / "spec.json"
    path.write_text(json.dumps(truth["spec"]))
    return path


def quick_fit(out, sim_dir, *extra):
    return run_cli(
        "fit", "--panel", sim_dir, "--out", out,
        "--iters", 120, "--burn-in", 40, "--thin", 5, "--chains", 2,
        "--seed", 3, "--no-strict", *extra,
    )


@pytest.fixture(scope="module")
def fit_zs(tmp_path_factory, sim_dir, spec_path):
    out = tmp_path_factory.mktemp("fit") / "zs"
    assert quick_fit(out, sim_dir, "--spec", spec_path) == 0
    return out


@pytest.fixture(scope="module")
def fit_nb(tmp_path_factory, sim_dir):
    out = tmp_path_factory.mktemp("fit") / "nb"
    assert quick_fit(out, sim_dir, "--family", "nb") == 0
    return out


@pytest.fixture(scope="module")
def fit_zsm(tmp_path_factory, sim_dir):
    out = tmp_path_factory.mktemp("fit") / "zsm"
    assert quick_fit(out, sim_dir, "--family", "zs-msnb") == 0
    return out


class TestParsing:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("--version")
        assert exc.value.code == 0
        assert f"episwitch {__version__}" in capsys.readouterr().out

    def test_no_command_is_usage(self, capsys):
        assert run_cli() == 1
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag_is_usage(self, capsys):
        assert run_cli("validate", "--bogus") == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_preset_is_usage(self):
        assert run_cli("simulate", "--preset", "nope", "--out", "x") == 1

    def test_bad_origin_ranges(self, fit_nb):
        assert run_cli("rps", "--fit", fit_nb, "--origins", "5:4") == 1
        assert run_cli("rps", "--fit", fit_nb, "--origins", "1:2:3:4") == 1

    def test_entry_point_installed(self):
        exe = shutil.which("episwitch")
        if exe is None:
            pytest.skip("console script not on PATH")
        res = subprocess.run([exe, "--version"], capture_output=True, text=True)
        assert res.returncode == 0
        assert __version__ in res.stdout


class TestValidate:
    def test_ok(self, sim_dir, capsys):
        assert run_cli("validate", "--panel", sim_dir) == 0
        out = capsys.readouterr().out
        assert "panel OK" in out and "2 areas" in out and "200 weeks" in out

    def test_explicit_files(self, sim_dir):
        rc = run_cli(
            "validate",
            "--counts", sim_dir / "counts.csv",
            "--areas", sim_dir / "areas.csv",
            "--adjacency", sim_dir / "adjacency.csv",
        )
        assert rc == 0

    def test_partial_files_is_usage(self, sim_dir):
        assert run_cli("validate", "--counts", sim_dir / "counts.csv") == 1

    def test_missing_dir(self, tmp_path):
        assert run_cli("validate", "--panel", tmp_path / "nowhere") == 2

    def test_corrupt_counts(self, sim_dir, tmp_path, capsys):
        bad = tmp_path / "bad"
        shutil.copytree(sim_dir, bad)
        text = (bad / "counts.csv").read_text().splitlines()
        head, first = text[0], text[1].split(",")
        first[2] = "-4"
        (bad / "counts.csv").write_text("\n".join([head, ",".join(first)] + text[2:]) + "\n")
        assert run_cli("validate", "--panel", bad) == 2
        out = capsys.readouterr().out
        assert "validation failed" in out and "finding" in out


class TestSimulate:
    def test_outputs_and_manifest(self, sim_dir):
        for name in (
            "counts.csv", "areas.csv", "adjacency.csv",
            "truth.json", "truth_states.csv", "manifest.json",
        ):
            assert (sim_dir / name).exists(), name
        man = json.loads((sim_dir / "manifest.json").read_text())
        assert man["subcommand"] == "simulate"
        assert man["seed"] == 5
        assert man["spec"]["family"] == "zs-msnbh"
        assert man["outputs"]["counts"]["sha256"] == sha256_file(sim_dir / "counts.csv")

    def test_seed_reproducibility(self, sim_dir, tmp_path):
        again = tmp_path / "again"
        assert run_cli("simulate", "--preset", "two-district-contrast", "--seed", 5, "--out", again) == 0
        assert sha256_file(again / "counts.csv") == sha256_file(sim_dir / "counts.csv")
        other = tmp_path / "other"
        assert run_cli("simulate", "--preset", "two-district-contrast", "--seed", 6, "--out", other) == 0
        assert sha256_file(other / "counts.csv") != sha256_file(sim_dir / "counts.csv")

    def test_truth_states_cover_grid(self, sim_dir):
        lines = (sim_dir / "truth_states.csv").read_text().strip().splitlines()
        assert lines[0] == "area_id,week,x"
        assert len(lines) == 1 + 2 * 200


class TestFit:
    def test_directory_contents(self, fit_zs, sim_dir):
        for name in (
            "spec.json", "sampler_config.json", "manifest.json",
            "chain_00.csv", "chain_01.csv", "diagnostics.json", "fitted_values.csv",
        ):
            assert (fit_zs / name).exists(), name
        for name in ("counts.csv", "areas.csv", "adjacency.csv"):
            assert (fit_zs / "panel" / name).exists()
        # the hurdle-family switching model observes its states
        assert not (fit_zs / "latent_draws.npz").exists()
        man = json.loads((fit_zs / "manifest.json").read_text())
        assert man["subcommand"] == "fit"
        assert man["inputs"]["counts"]["sha256"] == sha256_file(sim_dir / "counts.csv")
        assert man["sampler_config"]["n_iter"] == 120
        assert man["diagnostics"] is not None
        fv = (fit_zs / "fitted_values.csv").read_text().strip().splitlines()
        assert fv[0] == "area_id,week,mean,lower,upper,presence"
        assert len(fv) == 1 + 2 * 200

    def test_latent_stored_for_augmented_family(self, fit_zsm):
        assert (fit_zsm / "latent_draws.npz").exists()
        with np.load(fit_zsm / "latent_draws.npz") as z:
            assert set(z.files) == {"chain_00", "chain_01"}
            assert z["chain_00"].shape == (16, 2, 200)

    def test_short_run_fails_strict_mode(self, sim_dir, tmp_path, capsys):
        rc = run_cli(
            "fit", "--panel", sim_dir, "--family", "nb", "--out", tmp_path / "strict",
            "--iters", 120, "--burn-in", 40, "--thin", 5, "--chains", 2, "--seed", 3,
        )
        assert rc == 3
        assert "strict mode" in capsys.readouterr().out

    def test_needs_spec_or_family(self, sim_dir, tmp_path):
        assert run_cli("fit", "--panel", sim_dir, "--out", tmp_path / "x", "--iters", 20) == 1

    def test_family_contradicts_spec(self, sim_dir, spec_path, tmp_path):
        rc = run_cli(
            "fit", "--panel", sim_dir, "--spec", spec_path, "--family", "nb",
            "--out", tmp_path / "x", "--iters", 20,
        )
        assert rc == 2

    def test_spatial_needs_switching_family(self, sim_dir, tmp_path):
        rc = run_cli(
            "fit", "--panel", sim_dir, "--family", "nb", "--spatial",
            "--out", tmp_path / "x", "--iters", 20,
        )
        assert rc == 2


class TestWaic:
    def test_writes_payload(self, fit_nb, capsys):
        assert run_cli("waic", "--fit", fit_nb) == 0
        payload = json.loads((fit_nb / "waic" / "waic.json").read_text())
        assert payload["family"] == "nb"
        assert np.isfinite(payload["waic"])
        assert payload["n_draws"] == 32
        man = json.loads((fit_nb / "waic" / "manifest.json").read_text())
        assert "chain_00" in man["inputs"] and "chain_01" in man["inputs"]
        assert "waic[nb]" in capsys.readouterr().out

    def test_augmented_family_works(self, fit_zsm, tmp_path):
        with pytest.warns(UserWarning, match="conditional"):
            rc = run_cli("waic", "--fit", fit_zsm, "--out", tmp_path / "w", "--max-draws", 8)
        assert rc == 0
        payload = json.loads((tmp_path / "w" / "waic.json").read_text())
        assert payload["n_draws"] == 8

    def test_not_a_fit_dir(self, tmp_path):
        (tmp_path / "junk").mkdir()
        assert run_cli("waic", "--fit", tmp_path / "junk") == 2


class TestForecast:
    def test_default_out_dir(self, fit_nb, capsys):
        assert run_cli("forecast", "--fit", fit_nb, "--origin", 195, "--horizon", 3,
                       "--max-draws", 6) == 0
        out = fit_nb / "forecast_195_3"
        lines = (out / "forecast_draws.csv").read_text().strip().splitlines()
        assert lines[0] == "draw,area_id,k,week,count"
        assert len(lines) == 1 + 6 * 2 * 3
        man = json.loads((out / "manifest.json").read_text())
        assert man["origin"] == 195 and man["horizon"] == 3 and man["n_paths"] == 6
        assert "6 paths" in capsys.readouterr().out

    def test_presence_column_for_switching(self, fit_zs, tmp_path):
        assert run_cli("forecast", "--fit", fit_zs, "--origin", 195, "--horizon", 2,
                       "--max-draws", 4, "--out", tmp_path / "fc") == 0
        lines = (tmp_path / "fc" / "forecast_draws.csv").read_text().splitlines()
        assert lines[0] == "draw,area_id,k,week,count,presence"

    def test_bad_origin_and_horizon(self, fit_nb, tmp_path):
        assert run_cli("forecast", "--fit", fit_nb, "--origin", 900, "--horizon", 2,
                       "--out", tmp_path / "a") == 2
        assert run_cli("forecast", "--fit", fit_nb, "--origin", 195, "--horizon", 0,
                       "--out", tmp_path / "b") == 2


class TestRps:
    def test_fixed_fit_scores(self, fit_nb, tmp_path, capsys):
        rc = run_cli("rps", "--fit", fit_nb, "--origins", "190:196:3", "--horizon", 3,
                     "--out", tmp_path / "s", "--max-draws", 20)
        assert rc == 0
        reports = read_score_csv(tmp_path / "s" / "scores.csv")
        assert len(reports) == 1 and reports[0].model == "nb"
        assert reports[0].n_cells == 2 * 3 * 3  # areas x origins x horizons
        summary = json.loads((tmp_path / "s" / "summary.json").read_text())
        assert summary["mode"] == "fixed-fit"
        assert summary["origins"] == [190, 193, 196]
        assert set(summary["averaged_rps"]) == {"1", "2", "3"}
        assert "averaged rps" in capsys.readouterr().out

    def test_refit_mode(self, fit_nb, tmp_path):
        rc = run_cli("rps", "--fit", fit_nb, "--origins", "198", "--horizon", 2,
                     "--out", tmp_path / "r", "--refit", "--max-draws", 20)
        assert rc == 0
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert summary["mode"] == "refit"
        assert set(summary["averaged_rps"]) == {"1", "2"}


class TestCompare:
    def test_two_fits(self, fit_zs, fit_nb, tmp_path, capsys):
        rc = run_cli(
            "compare", "--fits", fit_zs, fit_nb, "--origins", "190,194",
            "--horizon", 2, "--out", tmp_path / "cmp", "--max-draws", 20,
            "--n-perm", 2000,
        )
        assert rc == 0
        summary = json.loads((tmp_path / "cmp" / "summary.json").read_text())
        assert summary["models"] == ["zs-msnbh", "nb"]
        assert len(summary["p_values"]) == 1
        assert 0.0 < summary["p_values"][0]["p_value"] <= 1.0
        assert set(summary["best_by_horizon"]) == {"1", "2"}
        reports = read_score_csv(tmp_path / "cmp" / "scores.csv")
        assert sorted(r.model for r in reports) == ["nb", "zs-msnbh"]
        out = capsys.readouterr().out
        assert "best at k=1:" in out and "permutation p" in out

    def test_same_fit_twice_gets_suffix_and_p_one(self, fit_nb, tmp_path):
        rc = run_cli(
            "compare", "--fits", fit_nb, fit_nb, "--origins", "190,194",
            "--horizon", 2, "--out", tmp_path / "dup", "--max-draws", 20,
        )
        assert rc == 0
        summary = json.loads((tmp_path / "dup" / "summary.json").read_text())
        assert summary["models"] == ["nb", "nb#2"]
        assert summary["p_values"][0]["p_value"] == 1.0

    def test_different_panels_refused(self, fit_nb, tmp_path, capsys):
        other_sim = tmp_path / "sim2"
        assert run_cli("simulate", "--preset", "two-district-contrast", "--seed", 9,
                       "--out", other_sim) == 0
        other_fit = tmp_path / "fit2"
        assert quick_fit(other_fit, other_sim, "--family", "nb") == 0
        rc = run_cli(
            "compare", "--fits", fit_nb, other_fit, "--origins", "190",
            "--horizon", 2, "--out", tmp_path / "cmp2", "--max-draws", 20,
        )
        assert rc == 2
        assert "different panel" in capsys.readouterr().err


class TestApprox:
    def test_stdout_table(self, capsys):
        assert run_cli("approx", "--lam", 8, "--r", 2, "--p0", 0.1, 0.3) == 0
        cap = capsys.readouterr()
        lines = cap.out.strip().splitlines()
        assert lines[0] == "p0,y,pmf_exact,pmf_nb,tv"
        rows = [ln.split(",") for ln in lines[1:]]
        for p0, want_tv in ((0.1, 0.004132024330), (0.3, 0.018131115977)):
            block = [r for r in rows if float(r[0]) == p0]
            assert sum(float(r[2]) for r in block) == pytest.approx(1.0, abs=1e-9)
            assert float(block[0][4]) == pytest.approx(want_tv, abs=1e-9)
        assert "# tv(p0=0.1)" in cap.err

    def test_csv_output(self, tmp_path):
        assert run_cli("approx", "--lam", 8, "--r", 2, "--p0", 0.8,
                       "--out", tmp_path / "ap") == 0
        lines = (tmp_path / "ap" / "approx.csv").read_text().strip().splitlines()
        assert lines[0] == "p0,y,pmf_exact,pmf_nb,tv"
        man = json.loads((tmp_path / "ap" / "manifest.json").read_text())
        assert man["subcommand"] == "approx" and man["p0"] == [0.8]

    def test_bad_distribution_args(self):
        assert run_cli("approx", "--lam", -1, "--r", 2, "--p0", 0.5) == 2
