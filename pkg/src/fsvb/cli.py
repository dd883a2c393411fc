"""Command-line frontend: simulate, fit, update, forecast, score, summarise.

Every randomized subcommand requires an explicit --seed (or a seed in the
config file); there is no implicit random seeding.  Artifacts are plain CSV
with full-precision floats, and each command prints a JSON run summary to
stdout.  BLAS pools are pinned to one thread unless the caller already set
them; the --threads flag controls only the forecast chunk workers, whose
keyed rng streams make results bit-identical for any thread count.
"""

from __future__ import annotations

import os

for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import engine, forecast
from .families import count_variational_params, srn_sample, tbn_sample
from .model import ModelSpec
from .simio import (
    Panel,
    RunConfig,
    default_sim_params,
    load_panel,
    load_snapshot,
    parse_config,
    save_panel,
    save_snapshot,
    simulate_fsv,
    validate_config,
)
from .util import STREAM_SUMMARY, derive_seed, sigmoid, stream


# ---------------------------------------------------------------------------
# Small shared helpers
# ---------------------------------------------------------------------------


def _num(value: float) -> float | None:
    """JSON-safe number: non-finite values become null."""
    value = float(value)
    return value if np.isfinite(value) else None


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header: list[str], rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def _load_config(args: argparse.Namespace) -> RunConfig:
    """Config file (flag, then FSVB_CONFIG, then defaults) plus CLI overrides."""
    path = getattr(args, "config", None) or os.environ.get("FSVB_CONFIG")
    config = parse_config(Path(path)) if path else RunConfig()
    overrides = {}
    for attr, name in (("family", "family"), ("error_family", "error_family"),
                       ("K", "n_factors"), ("iters", "iters"), ("seed", "seed")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        config = dataclasses.replace(config, **overrides)
        validate_config(config)
    return config


def _require_seed(config: RunConfig) -> int:
    if config.seed is None:
        raise ValueError("this subcommand is randomized: pass --seed "
                         "(or set seed in the config)")
    return config.seed


def _series_names(n: int) -> list[str]:
    return [f"s{j + 1}" for j in range(n)]


def _trace_path(snapshot_path) -> Path:
    snapshot_path = Path(snapshot_path)
    return snapshot_path.with_name(snapshot_path.stem + ".elbo.csv")


def _write_trace(fitted: engine.FittedModel, path) -> str:
    rows = ((i + 1, value) for i, value in enumerate(fitted.elbo_trace))
    return _write_csv(path, ["iteration", "elbo"], rows)


def _fit_payload(fitted: engine.FittedModel, elapsed: float, steps: int) -> dict:
    mean, sd = fitted.final_elbo()
    return {
        "family": fitted.vspec.family,
        "error_family": fitted.model.error_family,
        "n_series": fitted.model.n_series,
        "n_factors": fitted.model.n_factors,
        "n_periods": fitted.model.n_periods,
        "iterations": fitted.iterations_run,
        "seconds_per_iteration": elapsed / steps if steps else None,
        "final_elbo_mean": _num(mean),
        "final_elbo_sd": _num(sd),
        "rejected_steps": fitted.diagnostics.rejected_steps,
        "clamp_events": fitted.diagnostics.clamp_events,
        "unstable": fitted.diagnostics.unstable,
    }


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> dict:
    config = _load_config(args)
    seed = _require_seed(config)
    model = ModelSpec(n_series=args.S, n_factors=args.K, n_periods=0,
                      error_family=config.error_family)
    theta = default_sim_params(model, seed)
    panel, truth = simulate_fsv(model, theta, args.T, seed)
    save_panel(panel, args.out)
    artifacts = {"panel": str(args.out)}
    if args.truth_dir is not None:
        outdir = Path(args.truth_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        blocks = [("h_eps", truth.states.h_eps, "s"), ("h_f", truth.states.h_f, "f"),
                  ("f", truth.states.f, "f")]
        if model.is_student_t:
            blocks += [("w_eps", truth.states.w_eps, "s"),
                       ("w_f", truth.states.w_f, "f")]
        for name, values, prefix in blocks:
            columns = [f"{prefix}{j + 1}" for j in range(values.shape[0])]
            path = outdir / f"truth_{name}.csv"
            save_panel(Panel(values=values.T, columns=columns), path)
            artifacts[name] = str(path)
    return {"command": "simulate", "n_series": args.S, "n_factors": args.K,
            "n_periods": args.T, "error_family": config.error_family,
            "seed": seed, "artifacts": artifacts}


# ---------------------------------------------------------------------------
# fit and update
# ---------------------------------------------------------------------------


def cmd_fit(args: argparse.Namespace) -> dict:
    config = _load_config(args)
    seed = _require_seed(config)
    panel = load_panel(args.data)
    model = ModelSpec(n_series=panel.values.shape[1], n_factors=config.n_factors,
                      n_periods=0, error_family=config.error_family)
    start = time.perf_counter()
    fitted = engine.fit(model, config.variational_spec(), panel.values,
                        iters=config.iters, master_seed=seed,
                        adam_alpha=config.adam_alpha, adam_tau1=config.adam_tau1,
                        adam_tau2=config.adam_tau2, adam_eps=config.adam_eps)
    elapsed = time.perf_counter() - start
    save_snapshot(fitted, args.snapshot)
    trace = _write_trace(fitted, args.trace_out or _trace_path(args.snapshot))
    payload = {"command": "fit", "seed": seed,
               "artifacts": {"snapshot": str(args.snapshot), "elbo_trace": trace}}
    payload.update(_fit_payload(fitted, elapsed, config.iters))
    return payload


def cmd_update(args: argparse.Namespace) -> dict:
    config = _load_config(args)
    panel = load_panel(args.data)
    fitted = load_snapshot(args.snapshot, panel=panel.values)
    rows = load_panel(args.rows)
    iters = args.iters if args.iters is not None else config.seq_iters
    start = time.perf_counter()
    forecast.sequential_update(fitted, rows.values, iters=iters)
    elapsed = time.perf_counter() - start
    out = args.out or args.snapshot
    save_snapshot(fitted, out)
    trace = _write_trace(fitted, args.trace_out or _trace_path(out))
    payload = {"command": "update", "rows_absorbed": rows.values.shape[0],
               "update_iterations": iters,
               "artifacts": {"snapshot": str(out), "elbo_trace": trace}}
    payload.update(_fit_payload(fitted, elapsed, iters))
    return payload


# ---------------------------------------------------------------------------
# forecast and predictive scores
# ---------------------------------------------------------------------------


def cmd_forecast(args: argparse.Namespace) -> dict:
    config = _load_config(args)
    seed = _require_seed(config)
    fitted = load_snapshot(args.snapshot)
    horizon = args.horizon if args.horizon is not None else config.forecast_h
    n_draws = args.draws if args.draws is not None else config.forecast_m
    draws = forecast.forecast_draws(fitted, horizon, n_draws, seed,
                                    threads=args.threads)
    names = _series_names(fitted.model.n_series)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    def draw_rows():
        for step in range(horizon):
            for m in range(n_draws):
                yield (step + 1, m + 1, *draws.y[step, m])

    def weight_rows():
        for step in range(horizon):
            w = forecast.min_variance_weights(draws.mean_sigma(step))
            yield (step + 1, *w)

    def corr_rows():
        for step in range(horizon):
            corr = draws.mean_correlation(step)
            for i in range(corr.shape[0]):
                for j in range(i, corr.shape[0]):
                    yield (step + 1, names[i], names[j], corr[i, j])

    def hist_rows():
        for step in range(horizon):
            for j, name in enumerate(names):
                counts, edges = np.histogram(draws.y[step, :, j], bins=args.bins)
                for b in range(counts.size):
                    yield (step + 1, name, edges[b], edges[b + 1], counts[b])

    artifacts = {
        "draws": _write_csv(outdir / "forecast_draws.csv",
                            ["step", "draw", *names], draw_rows()),
        "weights": _write_csv(outdir / "forecast_weights.csv",
                              ["step", *names], weight_rows()),
        "correlation": _write_csv(outdir / "forecast_correlation.csv",
                                  ["step", "series_i", "series_j", "mean_corr"],
                                  corr_rows()),
        "histogram": _write_csv(outdir / "forecast_histogram.csv",
                                ["step", "series", "bin_left", "bin_right", "count"],
                                hist_rows()),
    }
    return {"command": "forecast", "horizon": horizon, "draws": n_draws,
            "seed": seed, "artifacts": artifacts}


def cmd_apl(args: argparse.Namespace) -> dict:
    config = _load_config(args)
    seed = _require_seed(config)
    fitted = load_snapshot(args.snapshot)
    rows = load_panel(args.rows)
    n_draws = args.draws if args.draws is not None else config.forecast_m
    value = forecast.predictive_likelihood(fitted, rows.values[0], n_draws, seed,
                                           threads=args.threads)
    return {"command": "apl", "log_apl": value, "draws": n_draws, "seed": seed,
            "scored_period": fitted.model.n_periods + 1,
            "rows_ignored": rows.values.shape[0] - 1, "artifacts": {}}


def cmd_clapl(args: argparse.Namespace) -> dict:
    config = _load_config(args)
    seed = _require_seed(config)
    panel = load_panel(args.data)
    fitted = load_snapshot(args.snapshot, panel=panel.values)
    holdout = load_panel(args.rows)
    n_draws = args.draws if args.draws is not None else config.forecast_m
    frequency = (args.update_frequency if args.update_frequency is not None
                 else config.seq_update_frequency)
    update_iters = (args.update_iters if args.update_iters is not None
                    else config.seq_iters)
    terms, fitted = forecast.clapl_run(fitted, holdout.values, n_draws, frequency,
                                       seed, update_iters, threads=args.threads)
    rows = ((j + 1, j % frequency + 1, terms[j]) for j in range(terms.size))
    path = _write_csv(args.out, ["row", "horizon", "log_apl"], rows)
    return {"command": "clapl", "clapl": float(np.sum(terms)),
            "rows_scored": int(terms.size), "update_frequency": frequency,
            "update_iterations": update_iters, "draws": n_draws, "seed": seed,
            "final_periods": fitted.model.n_periods,
            "artifacts": {"terms": path}}


def cmd_select_k(args: argparse.Namespace) -> dict:
    config = _load_config(args)
    seed = _require_seed(config)
    panel = load_panel(args.data)
    T = panel.values.shape[0]
    if not 1 <= args.holdout < T - 1:
        raise ValueError("holdout must leave at least two training rows")
    train = panel.values[: T - args.holdout]
    holdout = panel.values[T - args.holdout :]
    n_draws = args.draws if args.draws is not None else config.forecast_m
    results = []
    for k in range(1, args.kmax + 1):
        model = ModelSpec(n_series=panel.values.shape[1], n_factors=k,
                          n_periods=0, error_family=config.error_family)
        fitted = engine.fit(model, config.variational_spec(), train,
                            iters=config.iters, master_seed=derive_seed(seed, k),
                            adam_alpha=config.adam_alpha, adam_tau1=config.adam_tau1,
                            adam_tau2=config.adam_tau2, adam_eps=config.adam_eps)
        mean, sd = fitted.final_elbo()
        total = forecast.clapl(fitted, holdout, n_draws,
                               config.seq_update_frequency, seed,
                               config.seq_iters, threads=args.threads)
        results.append({"K": k, "elbo_mean": _num(mean), "elbo_sd": _num(sd),
                        "clapl": total})
    path = _write_csv(args.out, ["K", "elbo_mean", "elbo_sd", "clapl"],
                      ((r["K"], r["elbo_mean"], r["elbo_sd"], r["clapl"])
                       for r in results))
    scored = [r for r in results if r["elbo_mean"] is not None]
    return {"command": "select-k", "seed": seed, "results": results,
            "best_k_by_elbo": max(scored, key=lambda r: r["elbo_mean"])["K"]
            if scored else None,
            "best_k_by_clapl": max(results, key=lambda r: r["clapl"])["K"],
            "artifacts": {"table": path}}


# ---------------------------------------------------------------------------
# count-params
# ---------------------------------------------------------------------------


def cmd_count_params(args: argparse.Namespace) -> None:
    model = ModelSpec(n_series=args.S, n_factors=args.K, n_periods=args.T,
                      error_family=args.error_family)
    vspec = RunConfig(family=args.family, p_beta=args.p_beta,
                      p_fpath=args.p_fpath).variational_spec()
    print(count_variational_params(vspec, model))


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------


class _MeanVar:
    """Streaming mean and standard deviation over posterior draws."""

    def __init__(self, shape) -> None:
        self.n = 0
        self.total = np.zeros(shape)
        self.sq = np.zeros(shape)

    def add(self, value: np.ndarray) -> None:
        self.n += 1
        self.total += value
        self.sq += np.asarray(value) ** 2

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.n

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.sq / self.n - self.mean**2, 0.0))


def _summary_accumulate(fitted: engine.FittedModel, n_draws: int, seed: int) -> dict:
    """Accumulate posterior means/sds of psi, phi, beta, h, and f paths.

    With a panel attached the draws come from the engine's full iteration
    sampler (exact factor conditional for the q3 family); without one the
    blocks are sampled directly, which covers every quantity except the q3
    factor paths.
    """
    model, vspec, params = fitted.model, fitted.vspec, fitted.params
    S, K, T = model.n_series, model.n_factors, model.n_periods
    acc = {
        "psi_eps": _MeanVar(S), "phi_eps": _MeanVar(S),
        "psi_f": _MeanVar(K), "phi_f": _MeanVar(K),
        "beta": _MeanVar((S, K)),
        "h_eps": _MeanVar((S, T)), "h_f": _MeanVar((K, T)),
    }
    use_engine_draws = fitted.panel is not None
    has_f = use_engine_draws or vspec.family != "q3"
    if has_f:
        acc["f"] = _MeanVar((K, T))
    master = derive_seed(seed, STREAM_SUMMARY)
    y = fitted.panel.T if use_engine_draws else None
    for i in range(n_draws):
        if use_engine_draws:
            draw = engine.draw_iteration(model, vspec, params, y, master, i)
            theta, x = draw.theta, draw.x
            psi_eps, psi_f = theta.psi_eps, theta.psi_f
            beta_free, h_eps, h_f, f = theta.beta_free, x.h_eps, x.h_f, x.f
        else:
            rng = stream(seed, STREAM_SUMMARY, 0, i)
            if vspec.family == "mf":
                layout = engine.MfLayout(model)
                smp = srn_sample(params.mf, rng.standard_normal(0),
                                 rng.standard_normal(layout.size))
                theta, x = layout.split(smp.values)
                psi_eps, psi_f = theta.psi_eps, theta.psi_f
                beta_free, h_eps, h_f, f = theta.beta_free, x.h_eps, x.h_f, x.f
            else:
                psi_eps = np.empty(S)
                h_eps = np.empty((S, T))
                for s, block in enumerate(params.idio):
                    smp = tbn_sample(block, rng.standard_normal(3),
                                     rng.standard_normal(T))
                    psi_eps[s] = smp.xi[2]
                    h_eps[s] = smp.zeta
                psi_f = np.empty(K)
                h_f = np.empty((K, T))
                for k, block in enumerate(params.fvol):
                    smp = tbn_sample(block, rng.standard_normal(2),
                                     rng.standard_normal(T))
                    psi_f[k] = smp.xi[1]
                    h_f[k] = smp.zeta
                f = np.empty((K, T)) if has_f else None
                if params.beta is not None:
                    beta_free = srn_sample(params.beta,
                                           rng.standard_normal(params.beta.rank),
                                           rng.standard_normal(params.beta.n_values)).values
                else:
                    cols = engine.beta_column_positions(model)
                    beta_free = np.empty(model.n_beta_free)
                    for k, block in enumerate(params.joint):
                        smp = srn_sample(block, rng.standard_normal(block.rank),
                                         rng.standard_normal(block.n_values))
                        f[k] = smp.values[:T]
                        beta_free[cols[k]] = smp.values[T:]
                for k, block in enumerate(params.fpath):
                    f[k] = srn_sample(block, rng.standard_normal(block.rank),
                                      rng.standard_normal(block.n_values)).values
        acc["psi_eps"].add(psi_eps)
        acc["phi_eps"].add(sigmoid(psi_eps))
        acc["psi_f"].add(psi_f)
        acc["phi_f"].add(sigmoid(psi_f))
        acc["beta"].add(forecast._beta_matrices(beta_free[None, :], model)[0])
        acc["h_eps"].add(h_eps)
        acc["h_f"].add(h_f)
        if has_f:
            acc["f"].add(f)
    return acc


def cmd_summary(args: argparse.Namespace) -> dict:
    config = _load_config(args)
    seed = _require_seed(config)
    panel = load_panel(args.data).values if args.data else None
    fitted = load_snapshot(args.snapshot, panel=panel)
    acc = _summary_accumulate(fitted, args.draws, seed)
    model = fitted.model
    S, K, T = model.n_series, model.n_factors, model.n_periods
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    def psi_rows():
        for s in range(S):
            yield ("eps", s + 1, acc["psi_eps"].mean[s], acc["psi_eps"].sd[s],
                   acc["phi_eps"].mean[s], acc["phi_eps"].sd[s])
        for k in range(K):
            yield ("f", k + 1, acc["psi_f"].mean[k], acc["psi_f"].sd[k],
                   acc["phi_f"].mean[k], acc["phi_f"].sd[k])

    def beta_rows():
        for s in range(S):
            for k in range(K):
                yield (s + 1, k + 1, acc["beta"].mean[s, k], acc["beta"].sd[s, k])

    def h_rows():
        for s in range(S):
            for t in range(T):
                yield ("eps", s + 1, t + 1, acc["h_eps"].mean[s, t],
                       acc["h_eps"].sd[s, t])
        for k in range(K):
            for t in range(T):
                yield ("f", k + 1, t + 1, acc["h_f"].mean[k, t], acc["h_f"].sd[k, t])

    artifacts = {
        "psi": _write_csv(outdir / "summary_psi.csv",
                          ["block", "index", "psi_mean", "psi_sd",
                           "phi_mean", "phi_sd"], psi_rows()),
        "beta": _write_csv(outdir / "summary_beta.csv",
                           ["series", "factor", "mean", "sd"], beta_rows()),
        "h": _write_csv(outdir / "summary_h.csv",
                        ["block", "index", "t", "mean", "sd"], h_rows()),
    }
    if "f" in acc:
        artifacts["f"] = _write_csv(
            outdir / "summary_f.csv", ["factor", "t", "mean", "sd"],
            ((k + 1, t + 1, acc["f"].mean[k, t], acc["f"].sd[k, t])
             for k in range(K) for t in range(T)))
    draws = forecast.forecast_draws(fitted, 1, args.draws, seed,
                                    threads=args.threads)
    corr = _MeanVar((S, S))
    for m in range(args.draws):
        corr.add(forecast.correlation_at(draws.sigma_draw(0, m)))
    names = _series_names(S)
    artifacts["corr"] = _write_csv(
        outdir / "summary_corr.csv",
        ["series_i", "series_j", "mean", "sd"],
        ((names[i], names[j], corr.mean[i, j], corr.sd[i, j])
         for i in range(S) for j in range(i, S)))
    return {"command": "summary", "draws": args.draws, "seed": seed,
            "includes_factor_paths": "f" in acc, "artifacts": artifacts}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(parser, k_flag=True, iters_flag=True):
    parser.add_argument("--config", help="TOML config path (overrides FSVB_CONFIG)")
    parser.add_argument("--seed", type=int, help="master seed for all randomness")
    parser.add_argument("--family", choices=("mf", "q1", "q2", "q3"),
                        help="variational family (default from config: q3)")
    parser.add_argument("--error-family", dest="error_family",
                        choices=("normal", "student_t"),
                        help="observation error family (default: normal)")
    if k_flag:
        parser.add_argument("--K", type=int, help="number of latent factors")
    if iters_flag:
        parser.add_argument("--iters", type=int, help="optimisation iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsvb",
        description="Variational inference for high-dimensional factor "
                    "stochastic volatility models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a returns panel with known truth")
    p.add_argument("--S", type=int, required=True, help="number of series")
    p.add_argument("--K", type=int, required=True, help="number of factors")
    p.add_argument("--T", type=int, required=True, help="number of periods")
    p.add_argument("--out", required=True, help="output panel CSV")
    p.add_argument("--truth-dir", help="directory for true latent-path CSVs")
    p.add_argument("--config", help="TOML config path (overrides FSVB_CONFIG)")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.add_argument("--error-family", dest="error_family",
                   choices=("normal", "student_t"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a variational family to a returns panel")
    p.add_argument("--data", required=True, help="returns panel CSV")
    p.add_argument("--snapshot", required=True, help="output snapshot path")
    p.add_argument("--trace-out", help="ELBO trace CSV (default: <snapshot>.elbo.csv)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("update", help="absorb new rows into an existing fit")
    p.add_argument("--snapshot", required=True, help="input snapshot path")
    p.add_argument("--data", required=True, help="panel CSV the snapshot was fit on")
    p.add_argument("--rows", required=True, help="CSV of new return rows")
    p.add_argument("--out", help="output snapshot (default: overwrite input)")
    p.add_argument("--trace-out", help="ELBO trace CSV (default: <snapshot>.elbo.csv)")
    p.add_argument("--iters", type=int, help="iterations per update (default seq.iters)")
    p.add_argument("--config", help="TOML config path (overrides FSVB_CONFIG)")
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("forecast", help="draw from the posterior predictive")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--horizon", type=int, help="steps ahead (default forecast.H)")
    p.add_argument("--draws", type=int, help="Monte Carlo draws (default forecast.M)")
    p.add_argument("--out-dir", default=".", help="directory for artifact CSVs")
    p.add_argument("--bins", type=int, default=50, help="histogram bins per series")
    p.add_argument("--threads", type=int, default=1, help="forecast chunk workers")
    p.add_argument("--config", help="TOML config path (overrides FSVB_CONFIG)")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("apl", help="log predictive likelihood of the next row")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--rows", required=True,
                   help="holdout CSV; exactly the first row is scored")
    p.add_argument("--draws", type=int, help="Monte Carlo draws (default forecast.M)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", help="TOML config path (overrides FSVB_CONFIG)")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.set_defaults(func=cmd_apl)

    p = sub.add_parser("clapl", help="cumulative log predictive likelihood "
                                     "with sequential updating")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--data", required=True, help="panel CSV the snapshot was fit on")
    p.add_argument("--rows", required=True, help="holdout CSV scored row by row")
    p.add_argument("--draws", type=int)
    p.add_argument("--update-frequency", type=int,
                   help="rows between updates (default seq.update_frequency)")
    p.add_argument("--update-iters", type=int,
                   help="iterations per update (default seq.iters)")
    p.add_argument("--out", default="clapl_terms.csv", help="per-row terms CSV")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", help="TOML config path (overrides FSVB_CONFIG)")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.set_defaults(func=cmd_clapl)

    p = sub.add_parser("select-k", help="compare factor counts by ELBO and CLAPL")
    p.add_argument("--data", required=True)
    p.add_argument("--kmax", type=int, required=True, help="largest K to try")
    p.add_argument("--holdout", type=int, required=True,
                   help="rows held out from the end for CLAPL")
    p.add_argument("--draws", type=int)
    p.add_argument("--out", default="select_k.csv")
    p.add_argument("--threads", type=int, default=1)
    _add_config_flags(p, k_flag=False)
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("count-params",
                       help="number of variational parameters for one setup")
    p.add_argument("--S", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--family", required=True, choices=("mf", "q1", "q2", "q3"))
    p.add_argument("--error-family", dest="error_family", default="normal",
                   choices=("normal", "student_t"))
    p.add_argument("--p-beta", type=int, default=4)
    p.add_argument("--p-fpath", type=int, default=0)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("summary", help="posterior mean/sd tables from a snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--draws", type=int, default=1000, help="posterior draws")
    p.add_argument("--data", help="panel CSV; enables exact q3 factor paths")
    p.add_argument("--out-dir", default=".", help="directory for artifact CSVs")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", help="TOML config path (overrides FSVB_CONFIG)")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.set_defaults(func=cmd_summary)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        payload = args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if payload is not None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
