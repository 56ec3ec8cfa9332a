"""Command-line front door.

Four subcommands, each driven by a JSON config file validated before any
work starts:

* ``simulate``    null-calibration runs and a method x alpha summary table
* ``power``       power sweep over effect sizes with N_hat / N_av curves
* ``robustness``  null rejection rates along a misspecification or
                  estimated-model sweep
* ``stream``      sequential E-CRT over a CSV file, row order preserved

Every command writes delimited records plus a JSON summary and renders the
matching figure next to them.  Exit codes: 0 success, 1 runtime failure,
2 config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from .errors import ConfigError, SeqciError
from .evalue import Observation, TestConfig, run_factored_stream, write_trace
from .logistic import EcrtEngine, FitConfig, LogisticParams
from .modelx import FixedGaussian, model_from_json
from .simharness import (
    METHODS,
    ScenarioSpec,
    calibration_summary,
    power_curve,
    robustness_experiment,
    run_replications,
    summary_to_json,
    write_records,
)

_SCENARIO_FIELDS = {f.name for f in dataclasses.fields(ScenarioSpec)}


def _fail(field: str, message: str):
    raise ConfigError(f"{field}: {message}")


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _parse_scenario(raw, seed_override) -> ScenarioSpec:
    if not isinstance(raw, dict):
        _fail("scenario", "must be an object")
    unknown = set(raw) - _SCENARIO_FIELDS
    if unknown:
        _fail("scenario", f"unknown fields {sorted(unknown)}")
    kwargs = dict(raw)
    if kwargs.get("misspec") is not None:
        ms = kwargs["misspec"]
        if not (isinstance(ms, (list, tuple)) and len(ms) == 2):
            _fail("scenario.misspec", "must be [kind, xi]")
        kwargs["misspec"] = (str(ms[0]), float(ms[1]))
    if kwargs.get("n_grid") is not None:
        kwargs["n_grid"] = tuple(int(n) for n in kwargs["n_grid"])
    if seed_override is not None:
        kwargs["master_seed"] = seed_override
    try:
        return ScenarioSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None


def _parse_methods(raw) -> list[str]:
    if not isinstance(raw, list) or not raw:
        _fail("methods", "must be a non-empty list")
    for i, m in enumerate(raw):
        if m not in METHODS:
            _fail(f"methods[{i}]", f"unknown method {m!r}; known: {list(METHODS)}")
    return list(raw)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _timestamp() -> str:
    return "generated " + time.strftime("%Y-%m-%dT%H:%M:%S")


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    spec = _parse_scenario(cfg.get("scenario", {}), args.seed)
    methods = _parse_methods(cfg.get("methods", []))
    alphas = cfg.get("alphas", [spec.alpha])
    n_jobs = int(cfg.get("n_jobs", 1))
    out = _outdir(args)
    records = run_replications(spec, methods, n_jobs=n_jobs)
    rows = calibration_summary(records, alphas) if records else []
    write_records(out / "records.csv", records, header_comment=_timestamp())
    (out / "summary.json").write_text(
        summary_to_json({"scenario": dataclasses.asdict(spec), "methods": methods, "rows": rows})
    )
    if rows:
        figures.calibration_figure(rows, out / "calibration.png")
    for row in rows:
        _say(args, f"{row['method']:12s} alpha={row['alpha']:<6g} rate={row['rate']:.4f} (se {row['se']:.4f})")
    _say(args, f"wrote {out / 'records.csv'}")
    return 0


def cmd_power(args) -> int:
    cfg = _load_config(args.config)
    spec = _parse_scenario(cfg.get("scenario", {}), args.seed)
    methods = _parse_methods(cfg.get("methods", []))
    betas = cfg.get("betas")
    if not isinstance(betas, list) or not betas:
        _fail("betas", "must be a non-empty list")
    etas = cfg.get("etas", [0.2])
    n_jobs = int(cfg.get("n_jobs", 1))
    out = _outdir(args)
    records = []
    for beta in betas:
        records.extend(run_replications(dataclasses.replace(spec, beta=float(beta)), methods, n_jobs=n_jobs))
    summary = power_curve(records, etas, spec.alpha, spec.resolved_n_grid)
    write_records(out / "records.csv", records, header_comment=_timestamp())
    payload = {
        "scenario": dataclasses.asdict(spec),
        "betas": betas,
        "etas": etas,
        "cells": [
            {
                "method": c.method,
                "beta": c.beta,
                "n_hat": {str(k): v for k, v in c.n_hat.items()},
                "n_av": {str(k): v for k, v in c.n_av.items()},
                "rejection_by_n": {str(n): list(v) for n, v in c.rejection_by_n.items()},
            }
            for c in summary.cells
        ],
    }
    (out / "power.json").write_text(summary_to_json(payload))
    figures.power_figure(summary, out / "power.png")
    for c in summary.cells:
        hats = {eta: (c.n_hat[eta] if c.n_hat[eta] is not None else "not reached") for eta in c.n_hat}
        _say(args, f"{c.method:12s} beta={c.beta:<5g} N_hat={hats} N_av={c.n_av}")
    _say(args, f"wrote {out / 'power.json'}")
    return 0


def cmd_robustness(args) -> int:
    cfg = _load_config(args.config)
    spec = _parse_scenario(cfg.get("scenario", {}), args.seed)
    methods = _parse_methods(cfg.get("methods", []))
    sweep = cfg.get("sweep")
    if not isinstance(sweep, dict):
        _fail("sweep", "must be an object")
    n_jobs = int(cfg.get("n_jobs", 1))
    out = _outdir(args)
    rows, records = robustness_experiment(spec, methods, sweep, n_jobs=n_jobs)
    write_records(out / "records.csv", records, header_comment=_timestamp())
    (out / "robustness.json").write_text(
        summary_to_json({"scenario": dataclasses.asdict(spec), "sweep": sweep, "rows": rows})
    )
    figures.robustness_figure(rows, spec.alpha, out / "robustness.png")
    for row in rows:
        _say(
            args,
            f"{row['method']:12s} sweep={row['sweep']:<8g} rate={row['rate']:.4f} (se {row['se']:.4f})",
        )
    _say(args, f"wrote {out / 'robustness.json'}")
    return 0


def _parse_stream_config(cfg: dict, seed_override):
    csv_path = cfg.get("csv")
    if not isinstance(csv_path, str):
        _fail("csv", "must be a path string")
    columns = cfg.get("columns")
    if not isinstance(columns, dict):
        _fail("columns", "must be an object")
    for key in ("y", "x"):
        if key not in columns:
            _fail(f"columns.{key}", "is required")
    has_musigma = "mu" in columns or "sigma" in columns
    has_zmodel = "z" in columns or "model" in cfg
    if has_musigma == has_zmodel:
        _fail("columns", "exactly one of (mu, sigma) columns or (z columns + model) must be given")
    if has_musigma and not ("mu" in columns and "sigma" in columns):
        _fail("columns", "mu and sigma columns must both be given")
    if has_zmodel:
        if not isinstance(columns.get("z"), list) or not columns["z"]:
            _fail("columns.z", "must be a non-empty list of column names")
        if not isinstance(cfg.get("model"), str):
            _fail("model", "must be a path to a serialized conditional model")
    method = cfg.get("method", "ecrt")
    if method not in ("ecrt", "ecrt-oracle"):
        _fail("method", "must be 'ecrt' or 'ecrt-oracle'")
    theta = None
    if method == "ecrt-oracle":
        raw = cfg.get("theta")
        if not (isinstance(raw, dict) and "beta" in raw and "gamma" in raw):
            _fail("theta", "oracle mode requires {'beta': [...], 'gamma': [...]}")
        theta = LogisticParams(beta=np.asarray(raw["beta"], float), gamma=np.asarray(raw["gamma"], float))
    try:
        fit_cfg = FitConfig(**cfg.get("fit", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fit: {exc}") from None
    test_kwargs = dict(cfg.get("test", {}))
    if seed_override is not None:
        test_kwargs["rng_seed"] = seed_override
    try:
        test_cfg = TestConfig(**test_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"test: {exc}") from None
    return csv_path, columns, cfg.get("model"), method, theta, fit_cfg, test_cfg


def _read_stream_rows(csv_path: str, columns: dict, model_path):
    """Parse and validate the whole CSV before any test step runs."""
    model = model_from_json(Path(model_path).read_text()) if model_path else None
    try:
        fh = open(csv_path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise ConfigError(f"csv: file not found: {csv_path}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [columns["y"], columns["x"]]
        needed += [columns["mu"], columns["sigma"]] if "mu" in columns else list(columns["z"])
        missing = [c for c in needed if c not in header]
        if missing:
            raise ConfigError(f"columns: missing in CSV header: {missing}")
        pairs = []
        for idx, row in enumerate(reader, start=1):
            try:
                y = float(row[columns["y"]])
                x = float(row[columns["x"]])
                if "mu" in columns:
                    mu = float(row[columns["mu"]])
                    sd = float(row[columns["sigma"]])
                else:
                    zvals = [float(row[c]) for c in columns["z"]]
            except (TypeError, ValueError):
                raise SeqciError(f"malformed row {idx} in {csv_path}") from None
            if y not in (0.0, 1.0):
                raise SeqciError(f"malformed row {idx}: y must be 0 or 1, got {row[columns['y']]!r}")
            if "mu" in columns:
                if sd <= 0:
                    raise ConfigError(f"columns.sigma: row {idx} has sigma={sd}; must be positive")
                obs = Observation(x=x, y=y, z=np.array([1.0, mu]))
                q_row = FixedGaussian(mu=mu, sigma2=sd * sd)
            else:
                obs = Observation(x=x, y=y, z=np.array([1.0, *zvals]))
                q_row = model
            pairs.append((obs, q_row))
    return pairs


def cmd_stream(args) -> int:
    cfg = _load_config(args.config)
    csv_path, columns, model_path, method, theta, fit_cfg, test_cfg = _parse_stream_config(cfg, args.seed)
    pairs = _read_stream_rows(csv_path, columns, model_path)
    out = _outdir(args)
    if not pairs:
        _say(args, "empty stream: no observations, no rejection")
        write_trace(out / "trace.csv", [])
        return 0
    q_dim = pairs[0][0].z.size
    engine = EcrtEngine(1, q_dim, fit_cfg, oracle=theta)
    state, trace = run_factored_stream(pairs, engine, test_cfg)
    write_trace(out / "trace.csv", trace)
    figures.trace_figure(trace, test_cfg.alpha, out / "trace.png")
    if state.stopped_at is not None:
        verdict = (
            f"rejected conditional independence at observation {state.stopped_at} "
            f"(log e-value {state.max_log_s:.3f} >= log(1/{test_cfg.alpha:g}))"
        )
    else:
        verdict = f"no rejection at level alpha={test_cfg.alpha:g} after {state.n} observations"
    (out / "stream.json").write_text(
        summary_to_json(
            {
                "verdict": verdict,
                "n": state.n,
                "stopped_at": state.stopped_at,
                "max_log_e": state.max_log_s,
                "alpha": test_cfg.alpha,
            }
        )
    )
    print(verdict)
    _say(args, f"wrote {out / 'trace.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqci",
        description="Anytime-valid sequential tests of conditional independence under model-X.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, doc in (
        ("simulate", cmd_simulate, "null-calibration study from a scenario config"),
        ("power", cmd_power, "power sweep over effect sizes"),
        ("robustness", cmd_robustness, "null rejection rates along a misspecification sweep"),
        ("stream", cmd_stream, "sequential test over a CSV stream"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, exit contract is 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
