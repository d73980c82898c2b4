"""Command-line front end.

Subcommands: validate, simulate, fit, waic, forecast, rps, compare, approx.
Every run that writes a directory leaves exactly one manifest.json recording
the subcommand, input digests, spec, sampler settings, seed, version and
wall clock, so any output can be traced back to its inputs.

Exit codes: 0 success, 1 usage, 2 validation/configuration,
3 convergence failure, 4 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import diagnostics
from .distributions import (
    NBParams,
    ThinnedZTNBParams,
    moment_match,
    nb_pmf,
    thinned_ztnb_pmf,
    total_variation,
)
from .evaluation import (
    EvaluationError,
    PairingError,
    compare_reports,
    fitted_values,
    forecast,
    score_forecasts,
    waic,
    write_score_csv,
)
from .mcmc import (
    InsufficientDrawsError,
    PosteriorDraws,
    SamplerConfig,
    SamplerCorruptionError,
    run_chains,
)
from .model import Family, ModelSpec, SpecError
from .panel import CountPanel, PanelValidationError, load_panel, write_panel
from .simulate import SimulationError, scenario_presets, simulate_panel
from .util import atomic_write_text, sha256_file

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_INTERNAL = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for validation
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _default_threads() -> int:
    raw = os.environ.get("EPISWITCH_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _digest_map(paths: dict[str, Path]) -> dict:
    return {
        label: {"path": str(p), "sha256": sha256_file(p)}
        for label, p in sorted(paths.items())
    }


def _write_manifest(
    out_dir: Path,
    subcommand: str,
    inputs: dict[str, Path],
    started: float,
    spec: ModelSpec | None = None,
    config: SamplerConfig | None = None,
    seed: int | None = None,
    diag_summary: dict | None = None,
    extra: dict | None = None,
) -> Path:
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "created": _utc_now(),
        "wall_clock_seconds": round(time.time() - started, 3),
        "seed": seed,
        "inputs": _digest_map(inputs),
        "spec": spec.to_dict() if spec is not None else None,
        "sampler_config": config.to_dict() if config is not None else None,
        "diagnostics": diag_summary,
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _panel_paths(args) -> dict[str, Path]:
    if getattr(args, "panel", None):
        base = Path(args.panel)
        paths = {
            "counts": base / "counts.csv",
            "areas": base / "areas.csv",
            "adjacency": base / "adjacency.csv",
        }
    elif args.counts and args.areas and args.adjacency:
        paths = {
            "counts": Path(args.counts),
            "areas": Path(args.areas),
            "adjacency": Path(args.adjacency),
        }
    else:
        raise _UsageError(
            "give --panel DIR, or all of --counts/--areas/--adjacency"
        )
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise FileNotFoundError("missing panel file(s): " + ", ".join(missing))
    return paths


def _add_panel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--panel", help="directory holding counts/areas/adjacency CSVs")
    p.add_argument("--counts", help="counts CSV (area_id, week, count)")
    p.add_argument("--areas", help="areas CSV (area_id, population, covariates...)")
    p.add_argument("--adjacency", help="adjacency CSV (area_id, neighbor_id)")


def _load_spec(args, panel: CountPanel) -> ModelSpec:
    if args.spec:
        spec = ModelSpec.from_json(Path(args.spec).read_text())
        if args.family and Family(args.family) is not spec.family:
            raise SpecError(
                f"--family {args.family} contradicts spec file family "
                f"{spec.family.value}"
            )
        if args.spatial and not spec.spatial_terms:
            raise SpecError("--spatial contradicts spec file (spatial_terms false)")
    elif args.family:
        spec = ModelSpec(family=Family(args.family), spatial_terms=args.spatial)
    else:
        raise _UsageError("give --spec FILE or --family NAME")
    spec.validate_against(panel)
    return spec


def _load_fit_dir(fit_dir) -> tuple[CountPanel, ModelSpec, SamplerConfig, PosteriorDraws]:
    fit = Path(fit_dir)
    spec_path = fit / "spec.json"
    cfg_path = fit / "sampler_config.json"
    if not spec_path.exists() or not cfg_path.exists():
        raise FileNotFoundError(f"{fit} is not a fit directory (missing spec/config)")
    spec = ModelSpec.from_json(spec_path.read_text())
    config = SamplerConfig.from_dict(json.loads(cfg_path.read_text()))
    pdir = fit / "panel"
    panel = load_panel(pdir / "counts.csv", pdir / "areas.csv", pdir / "adjacency.csv")
    draws = PosteriorDraws.load(fit, panel, spec, config)
    return panel, spec, config, draws


def _fit_input_paths(fit: Path) -> dict[str, Path]:
    paths = {
        "spec": fit / "spec.json",
        "counts": fit / "panel" / "counts.csv",
        "areas": fit / "panel" / "areas.csv",
        "adjacency": fit / "panel" / "adjacency.csv",
    }
    for c, p in enumerate(sorted(fit.glob("chain_*.csv"))):
        paths[f"chain_{c:02d}"] = p
    return paths


def _parse_origins(text: str) -> list[int]:
    """'280:380' (inclusive), '280:380:5', or '280,290,300'."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise _UsageError(f"cannot parse origin range {text!r}")
        a, b = int(parts[0]), int(parts[1])
        step = int(parts[2]) if len(parts) == 3 else 1
        if step < 1 or b < a:
            raise _UsageError(f"bad origin range {text!r}")
        return list(range(a, b + 1, step))
    return [int(tok) for tok in text.split(",") if tok.strip()]


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    paths = _panel_paths(args)
    try:
        panel = load_panel(paths["counts"], paths["areas"], paths["adjacency"])
    except PanelValidationError as e:
        print(f"panel validation failed ({len(e.findings)} finding(s)):")
        for line in e.findings:
            print(f"  {line}")
        return EXIT_VALIDATION
    print(
        f"panel OK: {panel.n_areas} areas, {panel.n_weeks} weeks, "
        f"{panel.n_covariates} covariate(s), weeks "
        f"{panel.week_index[0]}..{panel.week_index[-1]}"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    presets = scenario_presets()
    scenario = presets[args.preset]
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=int(args.seed))
    panel, states = simulate_panel(scenario)
    out = Path(args.out)
    paths = write_panel(panel, out)
    truth = {
        "preset": args.preset,
        "seed": scenario.seed,
        "spec": scenario.spec.to_dict(),
        "params": scenario.true_params.to_dict(),
    }
    atomic_write_text(out / "truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n")
    lines = ["area_id,week,x"]
    for i, aid in enumerate(panel.area_ids):
        for t, wk in enumerate(panel.week_index):
            lines.append(f"{aid},{int(wk)},{int(states.x[i, t])}")
    atomic_write_text(out / "truth_states.csv", "\n".join(lines) + "\n")
    outputs = dict(paths)
    outputs["truth"] = out / "truth.json"
    outputs["truth_states"] = out / "truth_states.csv"
    _write_manifest(
        out,
        "simulate",
        inputs={},
        started=started,
        spec=scenario.spec,
        seed=scenario.seed,
        extra={"preset": args.preset, "outputs": _digest_map(outputs)},
    )
    print(
        f"simulated preset {args.preset!r} (seed {scenario.seed}): "
        f"{panel.n_areas} areas x {panel.n_weeks} weeks -> {out}"
    )
    return EXIT_OK


def _diag_summary(report) -> dict:
    return {
        "ok": report.ok,
        "max_rhat": None if not np.isfinite(report.max_rhat()) else round(report.max_rhat(), 4),
        "min_ess": None if not np.isfinite(report.min_ess()) else round(report.min_ess(), 1),
        "flagged": [r.name for r in report.flagged],
    }


def cmd_fit(args) -> int:
    started = time.time()
    paths = _panel_paths(args)
    panel = load_panel(paths["counts"], paths["areas"], paths["adjacency"])
    spec = _load_spec(args, panel)
    config = SamplerConfig(
        n_iter=args.iters,
        burn_in=args.burn_in if args.burn_in is not None else args.iters // 2,
        n_chains=args.chains,
        thin=args.thin,
        seed=args.seed,
        random_scan=args.random_scan,
        store_latent=not args.no_latent,
        checkpoint_every=args.checkpoint_every,
    )
    config.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "spec.json", spec.to_json() + "\n")
    atomic_write_text(
        out / "sampler_config.json",
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
    )
    write_panel(panel, out / "panel")

    draws = run_chains(
        panel, spec, config=config, out_dir=out, threads=args.threads, resume=args.resume
    )
    if draws.latent is not None:
        np.savez_compressed(
            out / "latent_draws.npz",
            **{f"chain_{c:02d}": arr for c, arr in enumerate(draws.latent)},
        )

    diag = None
    diag_summary = None
    try:
        diag = diagnostics(draws)
        diag_summary = _diag_summary(diag)
        atomic_write_text(
            out / "diagnostics.json",
            json.dumps(diag.to_dict(), indent=2, sort_keys=True) + "\n",
        )
    except InsufficientDrawsError as e:
        print(f"diagnostics unavailable: {e}")

    if not (spec.family.needs_augmentation and draws.latent is None):
        fv = fitted_values(panel, spec, draws, seed=config.seed)
        fv.save_csv(out / "fitted_values.csv")

    _write_manifest(
        out,
        "fit",
        inputs=paths,
        started=started,
        spec=spec,
        config=config,
        seed=config.seed,
        diag_summary=diag_summary,
    )

    print(
        f"fit {spec.family.value}: {config.n_chains} chains x {config.n_iter} "
        f"iterations, {draws.n_draws} retained draws/chain -> {out}"
    )
    if diag is not None:
        print(f"{'parameter':<26} {'rhat':>8} {'ess':>10}")
        for row in diag.rows:
            mark = "  <- flagged" if row.flagged else ""
            rh = "nan" if not np.isfinite(row.rhat) else f"{row.rhat:.4f}"
            es = "nan" if not np.isfinite(row.ess) else f"{row.ess:.0f}"
            print(f"{row.name:<26} {rh:>8} {es:>10}{mark}")
    if args.strict:
        if diag is None:
            print("strict mode: convergence could not be assessed")
            return EXIT_CONVERGENCE
        if not diag.ok:
            names = ", ".join(r.name for r in diag.flagged)
            print(f"strict mode: convergence thresholds failed for: {names}")
            return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_waic(args) -> int:
    started = time.time()
    fit = Path(args.fit)
    panel, spec, config, draws = _load_fit_dir(fit)
    res = waic(panel, spec, draws, max_draws=args.max_draws, seed=args.seed)
    out = Path(args.out) if args.out else fit / "waic"
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "family": spec.family.value,
        "lpdd": res.lpdd,
        "pwaic": res.pwaic,
        "waic": res.waic,
        "n_draws": res.n_draws,
    }
    atomic_write_text(out / "waic.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out, "waic", inputs=_fit_input_paths(fit), started=started,
        spec=spec, config=config, seed=args.seed,
    )
    print(
        f"waic[{spec.family.value}] = {res.waic:.2f} "
        f"(lpdd {res.lpdd:.2f}, pwaic {res.pwaic:.2f}, {res.n_draws} draws)"
    )
    return EXIT_OK


def cmd_forecast(args) -> int:
    started = time.time()
    fit = Path(args.fit)
    panel, spec, config, draws = _load_fit_dir(fit)
    fc = forecast(
        panel, spec, draws, origin=args.origin, horizon=args.horizon,
        seed=args.seed, max_draws=args.max_draws,
    )
    out = Path(args.out) if args.out else fit / f"forecast_{args.origin}_{args.horizon}"
    out.mkdir(parents=True, exist_ok=True)
    fc.save_csv(out / "forecast_draws.csv")
    _write_manifest(
        out, "forecast", inputs=_fit_input_paths(fit), started=started,
        spec=spec, config=config, seed=args.seed,
        extra={"origin": args.origin, "horizon": args.horizon, "n_paths": fc.n_paths},
    )
    print(
        f"forecast from week {args.origin}: {fc.n_paths} paths x "
        f"{panel.n_areas} areas x {args.horizon} weeks -> {out}"
    )
    return EXIT_OK


def _label_for(spec: ModelSpec) -> str:
    return spec.family.value + ("+spatial" if spec.spatial_terms else "")


def _score_one_fit(fit_dir, origins, horizon, seed, max_draws, refit, threads) -> tuple:
    panel, spec, config, draws = _load_fit_dir(fit_dir)
    label = _label_for(spec)
    if not refit:
        report = score_forecasts(
            panel, spec, draws, origins, horizon,
            seed=seed, max_draws=max_draws, model_label=label,
        )
        return panel, spec, report
    # rolling refits: one fresh posterior per origin, fitted on data up to it
    weeks = list(panel.week_index)
    parts = []
    for origin in origins:
        pos = weeks.index(int(origin))
        sub = panel.truncate_weeks(pos + 1)
        cfg = dataclasses.replace(config, seed=config.seed + pos)
        d = run_chains(sub, spec, config=cfg, threads=threads)
        parts.append(
            score_forecasts(
                panel, spec, d, [origin], horizon,
                seed=seed, max_draws=max_draws, model_label=label,
            )
        )
    merged = parts[0]
    if len(parts) > 1:
        from .evaluation import ScoreReport

        merged = ScoreReport(
            label,
            np.concatenate([p.area_id for p in parts]),
            np.concatenate([p.origin for p in parts]),
            np.concatenate([p.k for p in parts]),
            np.concatenate([p.score for p in parts]),
        )
    return panel, spec, merged


def cmd_rps(args) -> int:
    started = time.time()
    fit = Path(args.fit)
    origins = _parse_origins(args.origins)
    panel, spec, report = _score_one_fit(
        fit, origins, args.horizon, args.seed, args.max_draws, args.refit, args.threads
    )
    out = Path(args.out) if args.out else fit / "scores"
    out.mkdir(parents=True, exist_ok=True)
    write_score_csv([report], out / "scores.csv")
    summary = {
        "model": report.model,
        "mode": "refit" if args.refit else "fixed-fit",
        "origins": [int(v) for v in origins],
        "horizon": args.horizon,
        "averaged_rps": {str(k): v for k, v in report.by_horizon().items()},
    }
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out, "rps", inputs=_fit_input_paths(fit), started=started,
        spec=spec, seed=args.seed,
        extra={"origins": summary["origins"], "horizon": args.horizon, "mode": summary["mode"]},
    )
    print(f"rps[{report.model}] over {len(origins)} origin(s):")
    for k, v in report.by_horizon().items():
        print(f"  k={k}: averaged rps = {v:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    started = time.time()
    origins = _parse_origins(args.origins)
    reports = []
    inputs: dict[str, Path] = {}
    panel_digests = None
    labels_seen: dict[str, int] = {}
    for idx, fit_dir in enumerate(args.fits):
        fit = Path(fit_dir)
        panel, spec, report = _score_one_fit(
            fit, origins, args.horizon, args.seed, args.max_draws, args.refit,
            args.threads,
        )
        digests = tuple(
            sha256_file(fit / "panel" / f"{name}.csv")
            for name in ("counts", "areas", "adjacency")
        )
        if panel_digests is None:
            panel_digests = digests
        elif digests != panel_digests:
            raise PairingError(
                f"fit directory {fit} was fitted on a different panel than "
                f"{args.fits[0]}; compared runs must share one panel"
            )
        n_prev = labels_seen.get(report.model, 0)
        labels_seen[report.model] = n_prev + 1
        if n_prev:
            report.model = f"{report.model}#{n_prev + 1}"
        reports.append(report)
        for label, p in _fit_input_paths(fit).items():
            inputs[f"fit{idx}:{label}"] = p
    summary = compare_reports(reports, n_perm=args.n_perm, seed=args.seed)
    summary["origins"] = [int(v) for v in origins]
    summary["horizon"] = args.horizon
    summary["mode"] = "refit" if args.refit else "fixed-fit"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_score_csv(reports, out / "scores.csv")
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "compare", inputs=inputs, started=started, seed=args.seed,
                    extra={"origins": summary["origins"], "horizon": args.horizon})
    horizons = sorted({k for r in reports for k in r.horizons()})
    print(f"{'model':<20}" + "".join(f"  rps(k={k})" for k in horizons))
    for rep in reports:
        by_k = rep.by_horizon()
        cells = "".join(f"  {by_k.get(k, float('nan')):>8.4f}" for k in horizons)
        print(f"{rep.model:<20}{cells}")
    for k in horizons:
        print(f"best at k={k}: {summary['best_by_horizon'][str(k)]}")
    for pv in summary["p_values"]:
        print(
            f"permutation p ({pv['model_a']} vs {pv['model_b']}): "
            f"{pv['p_value']:.4g}"
        )
    return EXIT_OK


def cmd_approx(args) -> int:
    started = time.time()
    rows = []
    tvs = {}
    for p0 in args.p0:
        params = ThinnedZTNBParams(lam=args.lam, r=args.r, p0=p0)
        w = moment_match(params)
        tv = total_variation(params, w, tail_eps=args.tail_eps)
        tvs[p0] = tv
        nb = NBParams(w.mu_w, w.r_w)
        # walk far enough that both pmfs have negligible tail mass
        y_hi, cdf_e, cdf_n = 0, 0.0, 0.0
        while cdf_e < 1.0 - 1e-10 or cdf_n < 1.0 - 1e-10:
            ys = np.arange(y_hi, y_hi + 256)
            pe = thinned_ztnb_pmf(ys, params)
            pn = nb_pmf(ys, nb)
            for yv, a, b in zip(ys, pe, pn):
                rows.append((p0, int(yv), float(a), float(b), tv))
            cdf_e += float(pe.sum())
            cdf_n += float(pn.sum())
            y_hi += 256
            if y_hi > 1_000_000:
                raise EvaluationError("approx pmf tail failed to converge")
    header = "p0,y,pmf_exact,pmf_nb,tv"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = [header] + [
            f"{p0!r},{y},{pe!r},{pn!r},{tv!r}" for p0, y, pe, pn, tv in rows
        ]
        atomic_write_text(out / "approx.csv", "\n".join(lines) + "\n")
        _write_manifest(
            out, "approx", inputs={}, started=started, seed=None,
            extra={"lam": args.lam, "r": args.r, "p0": list(args.p0),
                   "tail_eps": args.tail_eps},
        )
        print(f"wrote {len(rows)} rows -> {out / 'approx.csv'}")
    else:
        print(header)
        for p0, y, pe, pn, tv in rows:
            print(f"{p0!r},{y},{pe!r},{pn!r},{tv!r}")
    for p0 in args.p0:
        print(f"# tv(p0={p0}) = {tvs[p0]:.6f}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="episwitch",
        description="Markov-switching and zero-inflated NB models for weekly "
        "areal count panels: simulate, fit, compare, forecast, score.",
    )
    parser.add_argument("--version", action="version", version=f"episwitch {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("validate", help="check panel CSVs, report every problem")
    _add_panel_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="generate a synthetic panel from a preset")
    p.add_argument("--preset", required=True, choices=sorted(scenario_presets()),
                   help="scenario name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the preset seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the MCMC sampler on a panel")
    _add_panel_args(p)
    p.add_argument("--spec", help="ModelSpec JSON file")
    p.add_argument("--family", choices=[f.value for f in Family],
                   help="family shortcut when no spec file is given")
    p.add_argument("--spatial", action="store_true",
                   help="include neighbour terms (markov-switching families)")
    p.add_argument("--out", required=True, help="fit output directory")
    p.add_argument("--iters", type=int, default=80000, help="iterations per chain")
    p.add_argument("--burn-in", type=int, default=None,
                   help="burn-in iterations (default: iters // 2)")
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help="parallel chain processes (env EPISWITCH_THREADS)")
    p.add_argument("--random-scan", action="store_true",
                   help="randomize block update order each sweep")
    p.add_argument("--no-latent", action="store_true",
                   help="do not store latent state draws")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="persist draws every this many iterations (0: at end)")
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoints in --out")
    p.add_argument("--no-strict", dest="strict", action="store_false",
                   help="exit 0 even when convergence thresholds fail")
    p.set_defaults(func=cmd_fit, strict=True)

    p = sub.add_parser("waic", help="WAIC of a fitted run")
    p.add_argument("--fit", required=True, help="fit directory")
    p.add_argument("--out", help="output directory (default: <fit>/waic)")
    p.add_argument("--max-draws", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_waic)

    p = sub.add_parser("forecast", help="posterior-predictive paths from an origin week")
    p.add_argument("--fit", required=True)
    p.add_argument("--origin", type=int, required=True, help="origin week value")
    p.add_argument("--horizon", type=int, required=True, help="weeks ahead (K)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-draws", type=int, default=None)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("rps", help="ranked probability scores over rolling origins")
    p.add_argument("--fit", required=True)
    p.add_argument("--origins", required=True,
                   help="'280:380', '280:380:5' or comma list of origin weeks")
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument("--out", help="output directory (default: <fit>/scores)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-draws", type=int, default=None)
    p.add_argument("--refit", action="store_true",
                   help="refit at every origin instead of reusing one fit")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_rps)

    p = sub.add_parser("compare", help="score several fits of one panel against each other")
    p.add_argument("--fits", nargs="+", required=True, help="fit directories")
    p.add_argument("--origins", required=True)
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-draws", type=int, default=None)
    p.add_argument("--n-perm", type=int, default=10000)
    p.add_argument("--refit", action="store_true")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("approx", help="exact vs moment-matched NB pmf table")
    p.add_argument("--lam", type=float, required=True, help="ZTNB mean parameter")
    p.add_argument("--r", type=float, required=True, help="overdispersion")
    p.add_argument("--p0", type=float, nargs="+", required=True,
                   help="reporting probabilities")
    p.add_argument("--tail-eps", type=float, default=1e-10)
    p.add_argument("--out", help="output directory for approx.csv")
    p.set_defaults(func=cmd_approx)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except PanelValidationError as e:
        print("panel validation failed:", file=sys.stderr)
        for line in e.findings:
            print(f"  {line}", file=sys.stderr)
        return EXIT_VALIDATION
    except PairingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SpecError, SimulationError, FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SamplerCorruptionError, EvaluationError, ArithmeticError, OSError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # anything else is a bug, not a user mistake
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
