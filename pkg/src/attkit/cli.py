"""Command-line front end.

Subcommands: simulate, fit-var, estimate, benchmark, report. Scenario
parameters come from a named preset or a key=value config file, with
repeatable --set overrides on top. Every run writes a manifest capturing
the effective parameters and seeds needed to reproduce it exactly.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (including too many failed benchmark replicates).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, figures
from .additive import FallbackPolicy, cumulative_effects, fit, fit_debiased, max_horizon
from .benchmark import (ESTIMATORS, format_benchmark_table, replicate_rows,
                        run_benchmark, summary_rows)
from .errors import ConfigError, DataError, NumericalError
from .panel import CovariateSource, load_panel, write_panel
from .simulate import PRESETS, SimParams, preset, simulate_cohort
from .varmodel import (error_covariance_from, fit_var, forecast_all,
                       load_var_model, save_var_model)

_VECTOR_KEYS = {"min_x", "max_x", "kappa_untreated", "kappa_treated",
                "treat_loadings", "x_rates", "z_rates", "noise_diag"}
_SCALAR_KEYS = {"treat_scale", "treat_rate_effect", "base_rate", "z1_min",
                "z1_max", "z2_prob", "z3_rate", "sigma"}
_INT_KEYS = {"d_x", "horizon", "n", "seed"}
_BOOL_KEYS = {"cf_from_observed"}
_ALL_KEYS = _VECTOR_KEYS | _SCALAR_KEYS | _INT_KEYS | _BOOL_KEYS


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _SCALAR_KEYS:
            return float(raw)
        if key in _BOOL_KEYS:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        return np.array([float(v) for v in raw.split(",")])
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def apply_settings(params: SimParams, settings: Dict[str, object]) -> SimParams:
    """Rebuild SimParams with overrides; d_x changes reset vector defaults."""
    fields = dataclasses.asdict(params)
    for key, value in settings.items():
        if key == "sigma":
            fields["noise_cov"] = float(value) * np.eye(int(fields["d_x"]))
        elif key == "noise_diag":
            fields["noise_cov"] = np.diag(np.atleast_1d(value))
        else:
            fields[key] = value
    return SimParams(**fields)


def parse_overrides(pairs: Sequence[str]) -> Dict[str, object]:
    settings: Dict[str, object] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown parameter {key!r}; known: {', '.join(sorted(_ALL_KEYS))}")
        settings[key] = _parse_value(key, raw)
    return settings


def load_config(path) -> Dict[str, object]:
    """Flat key=value scenario file; '#' starts a comment."""
    settings: Dict[str, object] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown parameter {key!r}")
        settings[key] = _parse_value(key, raw)
    return settings


def resolve_params(args) -> SimParams:
    if getattr(args, "preset", None):
        params = preset(args.preset)
    else:
        params = SimParams()
    settings: Dict[str, object] = {}
    if getattr(args, "config", None):
        settings.update(load_config(args.config))
    settings.update(parse_overrides(getattr(args, "set", None) or []))
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    if "d_x" in settings and int(settings["d_x"]) != params.d_x:
        # dimension change: restart from defaults so scalar vector entries
        # broadcast to the new length
        params = SimParams(d_x=int(settings["d_x"]))
        settings = {k: v for k, v in settings.items() if k != "d_x"}
    return apply_settings(params, settings)


# ---------------------------------------------------------------------------
# Output helpers

def _fmt_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "" if math.isnan(value) else repr(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_rows(path, fieldnames: Sequence[str], rows: List[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt_cell(row.get(name, "")) for name in fieldnames])


def read_rows(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            parsed = {}
            for key, val in row.items():
                if val is None or val == "":
                    parsed[key] = float("nan") if key not in ("scenario", "estimator", "coef_name", "flag_fallback") else val
                    continue
                try:
                    fval = float(val)
                    parsed[key] = int(fval) if key in ("replicate", "t_index", "n_replicates", "n_failed") else fval
                except ValueError:
                    parsed[key] = val
            out.append(parsed)
        return out


def _params_manifest(params: SimParams) -> dict:
    out = {}
    for f in dataclasses.fields(params):
        value = getattr(params, f.name)
        out[f.name] = value.tolist() if isinstance(value, np.ndarray) else value
    return out


def write_manifest(out_dir: Path, command: str, params: Optional[SimParams],
                   extra: dict) -> None:
    manifest = {
        "tool": "attkit",
        "version": __version__,
        "command": command,
        "seed_streams": "SeedSequence(seed, spawn_key=(stream, replicate)); "
                        "stream 0 = reference pool, stream 1 = replicates",
    }
    if params is not None:
        manifest["params"] = _params_manifest(params)
    manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands

def cmd_simulate(args) -> int:
    params = resolve_params(args)
    out = _out_dir(args)
    from .benchmark import replicate_rng
    names = []
    for r in range(args.reps):
        panel = simulate_cohort(params, replicate_rng(params.seed, 1, r))
        name = f"panel_rep{r}.csv"
        write_panel(panel, out / name)
        names.append(name)
    write_manifest(out, "simulate", params, {"reps": args.reps, "panels": names})
    print(f"wrote {len(names)} panel(s) and manifest.json to {out}")
    return 0


def cmd_fit_var(args) -> int:
    panel = load_panel(args.panel)
    model = fit_var(panel)
    out = Path(args.out)
    if out.is_dir():
        out = out / "var_model.txt"
    save_var_model(model, out)
    print(f"fitted on {model.n_obs} untreated transitions; "
          f"coefficient matrix diagonal: "
          f"{np.array2string(np.diag(model.pi), precision=4)}")
    print(f"model written to {out}")
    return 0


def _known_estimators(names: Sequence[str]) -> List[str]:
    for name in names:
        if name not in ESTIMATORS:
            raise ConfigError(
                f"unknown estimator {name!r}; known: {', '.join(ESTIMATORS)}")
    return list(names)


def cmd_estimate(args) -> int:
    panel = load_panel(args.panel)
    out = _out_dir(args)
    policy = FallbackPolicy.parse(args.fallback)
    wanted = _known_estimators((args.estimators or "naive,uncorrected,debiased").split(","))

    model = None
    forecasts = None
    if {"uncorrected", "debiased", "debiased_true_sigma"} & set(wanted):
        if args.var_model:
            model = load_var_model(args.var_model)
        else:
            model = fit_var(panel)
        forecasts = forecast_all(model, panel)
        save_var_model(model, out / "var_model.txt")

    results = []
    for name in wanted:
        if name == "oracle":
            results.append(fit(panel, CovariateSource.true_counterfactual(), policy))
        elif name == "naive":
            results.append(fit(panel, CovariateSource.observed(), policy))
        elif name == "uncorrected":
            results.append(fit(panel, CovariateSource.forecast(forecasts), policy))
        elif name == "debiased":
            results.append(fit_debiased(panel, model, forecasts=forecasts, policy=policy))
        elif name == "debiased_true_sigma":
            params = resolve_params(args)
            true_cov = error_covariance_from(np.diag(params.kappa_untreated),
                                             params.noise_cov, max_horizon(panel))
            results.append(fit_debiased(panel, model, forecasts=forecasts,
                                        error_cov=true_cov, policy=policy,
                                        label="debiased_true_sigma"))

    fields = ["t_index", "t", "estimator", "coef_name", "value", "cumulative",
              "flag_fallback"]
    for paths in results:
        rows = cumulative_effects(paths)
        write_rows(out / f"coeffs_{paths.label}.csv", fields, rows)
        cum = paths.cumulative()
        cum_rows = [{"t_index": k, "t": paths.grid.points[k], "estimator": paths.label,
                     "coef_name": name, "cumulative": cum[k, j]}
                    for k in range(cum.shape[0])
                    for j, name in enumerate(paths.coef_names)]
        write_rows(out / f"cumulative_{paths.label}.csv",
                   ["t_index", "t", "estimator", "coef_name", "cumulative"], cum_rows)
    write_manifest(out, "estimate", None,
                   {"panel": str(args.panel), "estimators": wanted})
    print(f"wrote coefficient tables for {', '.join(p.label for p in results)} to {out}")
    return 0


def cmd_benchmark(args) -> int:
    params = resolve_params(args)
    out = _out_dir(args)
    policy = FallbackPolicy.parse(args.fallback)
    sigmas = ([float(s) for s in args.sigma_grid.split(",")]
              if args.sigma_grid else [float(np.diag(params.noise_cov)[0])])
    scenario = args.preset or "custom"
    results = []
    for sigma in sigmas:
        res = run_benchmark(params.with_sigma(sigma), reps=args.reps,
                            seed=params.seed, jobs=args.jobs, policy=policy,
                            scenario=scenario)
        results.append(res)
        print(f"sigma={sigma:g}: " + "  ".join(
            f"{name}={res.means[name]:.4g}" for name in ESTIMATORS), file=sys.stderr)

    write_rows(out / "benchmark_replicates.csv",
               ["scenario", "sigma", "replicate", *ESTIMATORS],
               replicate_rows(results))
    write_rows(out / "benchmark_summary.csv",
               ["scenario", "sigma", "estimator", "mean_mise", "sd_mise",
                "wilcoxon_p_vs_debiased", "n_replicates", "n_failed"],
               summary_rows(results))
    table = format_benchmark_table(results)
    (out / "benchmark_table.txt").write_text(table + "\n", encoding="utf-8")
    write_manifest(out, "benchmark", params,
                   {"reps": args.reps, "sigma_grid": sigmas, "scenario": scenario,
                    "fallback": args.fallback})
    print(table)
    return 0


def cmd_report(args) -> int:
    src = Path(args.input)
    out = _out_dir(args)
    made = []
    bench = src / "benchmark_replicates.csv"
    if bench.exists():
        reps = read_rows(bench)
        summary = read_rows(src / "benchmark_summary.csv")
        present = [e for e in ESTIMATORS if reps and e in reps[0]]
        made.append(figures.mise_summary_figure(summary, out / "mise_by_sigma.png"))
        made.append(figures.mise_distribution_figure(reps, present,
                                                     out / "mise_distribution.png"))
        write_rows(out / "report_summary.csv",
                   ["scenario", "sigma", "estimator", "mean_mise", "sd_mise",
                    "wilcoxon_p_vs_debiased", "n_replicates", "n_failed"], summary)
        table_src = src / "benchmark_table.txt"
        if table_src.exists():
            (out / "benchmark_table.txt").write_text(
                table_src.read_text(encoding="utf-8"), encoding="utf-8")
    coeff_files = sorted(src.glob("coeffs_*.csv"))
    if coeff_files:
        rows = []
        for f in coeff_files:
            rows.extend(read_rows(f))
        made.append(figures.cumulative_effect_figure(
            rows, "D", out / "cumulative_att.png",
            "Cumulative treatment effect on the treated"))
        estimators = sorted({r["estimator"] for r in rows})
        for est in estimators:
            made.append(figures.coefficient_paths_figure(
                rows, est, out / f"coefficients_{est}.png"))
        write_rows(out / "report_coefficients.csv",
                   ["t_index", "t", "estimator", "coef_name", "value",
                    "cumulative", "flag_fallback"], rows)
    if not made:
        raise DataError(f"{src}: no benchmark or coefficient outputs found")
    print("wrote " + ", ".join(str(m) for m in made))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attkit",
        description="Debiased treatment-effect-on-the-treated estimation "
                    "for recurrent-event panels")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--preset", choices=sorted(PRESETS),
                       help="named scenario preset")
        p.add_argument("--config", help="key=value scenario file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one scenario parameter (repeatable)")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", default=".", help="output directory")

    p_sim = sub.add_parser("simulate", help="generate cohort panels")
    common(p_sim)
    p_sim.add_argument("--reps", type=int, default=1)
    p_sim.set_defaults(func=cmd_simulate)

    p_var = sub.add_parser("fit-var", help="fit the covariate forecast model")
    p_var.add_argument("--panel", required=True)
    p_var.add_argument("--out", default="var_model.txt")
    p_var.set_defaults(func=cmd_fit_var)

    p_est = sub.add_parser("estimate", help="fit treatment-effect estimators")
    common(p_est)
    p_est.add_argument("--panel", required=True)
    p_est.add_argument("--var-model", help="reuse a fitted forecast model file")
    p_est.add_argument("--estimators",
                       help=f"comma list from: {', '.join(ESTIMATORS)}")
    p_est.add_argument("--fallback", default="psd-floor",
                       help="psd-floor, ridge:<value>, or fail")
    p_est.set_defaults(func=cmd_estimate)

    p_bench = sub.add_parser("benchmark", help="run the estimator comparison")
    common(p_bench)
    p_bench.add_argument("--reps", type=int, default=100)
    p_bench.add_argument("--jobs", type=int, default=1)
    p_bench.add_argument("--sigma-grid", help="comma list of noise levels")
    p_bench.add_argument("--fallback", default="psd-floor")
    p_bench.set_defaults(func=cmd_benchmark)

    p_rep = sub.add_parser("report", help="render figures from prior outputs")
    p_rep.add_argument("--in", dest="input", required=True,
                       help="directory with benchmark or estimate outputs")
    p_rep.add_argument("--out", default=".", help="output directory")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
