import argparse
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from colorama import Fore, init as colorama_init

from . import crve, data, formatting, inference, simlab
from .config import THREADS_ENV, RunConfig, WorkingModelSpec, parse_config, require
from .errors import EXIT_OK, ClusterKeeperError, ConfigError, DataError
from .estimator import FitResult, absorb, fit_wls
from .model_frame import WorkingModel, build_design, estimate_rho, working_covariance

EXIT_INTERRUPTED = 130

FIT_COLUMNS = ["name", "estimate", "std_error", "df", "t", "p_value", "conf_low", "conf_high"]
TEST_COLUMNS = ["name", "method", "Q", "q", "Fstat", "df_num", "df_denom", "eta", "p_value"]


def parse_args(argv: Optional[list] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="cluster-keeper", description="Small-sample cluster-robust inference")
    sub = p.add_subparsers(dest="cmd", required=True)
    helps = {
        "fit": "Estimate focal coefficients with cluster-robust standard errors",
        "test": "Run the configured linear hypothesis tests",
        "simulate": "Run the Monte Carlo rejection-rate experiment",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", help="Write the report here instead of stdout")
        sp.add_argument("--format", choices=("json", "csv", "table"), help="Override the configured output format")
        sp.add_argument("--threads", type=int, help=f"Worker processes (default: ${THREADS_ENV}, then config, then 1)")
        sp.add_argument("--seed", type=int, help="Override the configured seed")
        sp.add_argument("--quiet", action="store_true", help="Suppress progress lines")
    return p.parse_args(argv)


def emit(record: dict) -> None:
    """One structured diagnostic line on stderr."""
    print(formatting.dumps_json(record), file=sys.stderr)


def emit_error(exc: ClusterKeeperError) -> None:
    record = {"level": "error", "error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    record.update(exc.context())
    emit(record)


def resolve_threads(flag: Optional[int], config: RunConfig) -> int:
    if flag is not None:
        threads = flag
    elif os.environ.get(THREADS_ENV):
        raw = os.environ[THREADS_ENV]
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    elif config.threads is not None:
        threads = config.threads
    else:
        threads = 1
    if threads < 1:
        raise ConfigError("thread count must be at least 1")
    return threads


def _data_path(config: RunConfig, base_dir: Optional[Path]) -> Path:
    path = Path(config.data_path)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return path


def _user_blocks(spec: WorkingModelSpec, ids) -> List[np.ndarray]:
    blocks = dict(spec.blocks or ())
    missing = [str(cid) for cid in ids if str(cid) not in blocks]
    if missing:
        raise ConfigError("working_model.blocks has no matrix for cluster(s): " + ", ".join(missing))
    return [np.array(blocks[str(cid)], dtype=float) for cid in ids]


def working_model(config: RunConfig, design) -> WorkingModel:
    spec = config.working_model
    if spec.kind == "identity":
        return WorkingModel.identity(spec.scale)
    if spec.kind == "user":
        return WorkingModel.user(_user_blocks(spec, design.ids), spec.scale)
    rho = spec.rho
    if rho == "estimate":
        ols = fit_wls(absorb(design, weights=[np.eye(n) for n in design.sizes]))
        rho = estimate_rho(ols.residuals)
    return WorkingModel.compound_symmetric(rho, spec.scale)


def prepare(config: RunConfig, base_dir: Optional[Path] = None) -> Tuple[FitResult, WorkingModel, list]:
    """Read the data, build the design, settle the working model and weights, and fit."""
    table = data.read_table(_data_path(config, base_dir))
    design = build_design(table, config.model)
    model = working_model(config, design)
    phi = working_covariance(model, design)
    weights = None
    if config.weighting == "inverse_working":
        weights = [np.linalg.inv(p) for p in phi]
    fit = fit_wls(absorb(design, weights=weights))
    return fit, model, phi


def adjustment_kind(config: RunConfig, model: WorkingModel, name: Optional[str] = None) -> crve.AdjustmentKind:
    return crve.AdjustmentKind(
        name or config.vcov,
        working_model=model,
        use_absorbed_shortcut=config.absorbed_shortcut,
        absorbed_p=config.cr1s_absorbed_p,
    )


def _render(rows: Sequence[dict], columns: Sequence[str], fmt: str, header: dict, color: bool) -> str:
    if fmt == "csv":
        return data.table_to_csv(pd.DataFrame(list(rows), columns=list(columns)))
    if fmt == "table":
        return formatting.render_table(columns, [[row[c] for c in columns] for row in rows], color=color)
    return formatting.dumps_json(header, indent=2) + "\n"


def cmd_fit(config: RunConfig, fmt: str, base_dir: Optional[Path] = None, color: bool = False) -> str:
    fit, model, phi = prepare(config, base_dir)
    V = crve.vcov(fit, adjustment_kind(config, model), phi=phi)
    rows = inference.coefficient_table(fit, V, phi, level=config.level)
    report = {
        "command": "fit",
        "n_obs": fit.absorbed.N,
        "n_clusters": fit.m,
        "vcov": config.vcov,
        "weighting": config.weighting,
        "working_model": model.describe(),
        "level": config.level,
        "dropped": list(fit.absorbed.dropped),
        "coefficients": rows,
    }
    return _render(rows, FIT_COLUMNS, fmt, report, color)


def run_tests(config: RunConfig, fit: FitResult, model: WorkingModel, phi) -> List[dict]:
    """One report row per named constraint, each with the variance its method calls for."""
    method = config.method
    if method == "AHT":
        kind = crve.AdjustmentKind.cr2(model, use_absorbed_shortcut=config.absorbed_shortcut)
    elif method == "Standard":
        kind = adjustment_kind(config, model, "CR1")
    else:
        kind = adjustment_kind(config, model)
    V = crve.vcov(fit, kind, phi=phi)
    gram = inference.projection_gram(fit, V, phi) if method == "AHT" else None
    rows = []
    for named in config.tests:
        res = inference.hypothesis_test(fit, named.to_constraint(fit.names), method, V, phi, gram=gram)
        rows.append({
            "name": res.name,
            "method": res.method,
            "Q": res.Q,
            "q": res.q,
            "Fstat": res.Fstat,
            "df_num": res.df_num,
            "df_denom": res.df_denom,
            "eta": res.eta,
            "p_value": res.p,
        })
    return rows


def cmd_test(config: RunConfig, fmt: str, base_dir: Optional[Path] = None, color: bool = False) -> str:
    fit, model, phi = prepare(config, base_dir)
    rows = run_tests(config, fit, model, phi)
    report = {
        "command": "test",
        "n_obs": fit.absorbed.N,
        "n_clusters": fit.m,
        "method": config.method,
        "working_model": model.describe(),
        "tests": rows,
    }
    return _render(rows, TEST_COLUMNS, fmt, report, color)


def cmd_simulate(config: RunConfig, fmt: str, threads: int = 1, quiet: bool = False, color: bool = False) -> str:
    sim = config.simulate
    if sim is None:
        raise ConfigError("simulate needs a simulate section")
    table = simlab.run_experiment(sim, threads=threads, quiet=quiet)
    if sim.dataset_out:
        design_id, m, n, tau2, rho, sd2 = sim.cells()[0]
        params = simlab.SimParams(tau2, rho, sd2, sim.reps, sim.seed, tuple(sim.alphas))
        data.write_table(simlab.simulate_outcomes(simlab.make_design(design_id, m, n), params, 0), sim.dataset_out)
    if fmt == "json":
        return formatting.dumps_json(table.to_dict(orient="records"), indent=2) + "\n"
    if fmt == "table":
        return formatting.render_table(list(table.columns), table.itertuples(index=False), color=color)
    return data.table_to_csv(table)


def run(
    config: RunConfig,
    command: Optional[str] = None,
    fmt: Optional[str] = None,
    threads: int = 1,
    base_dir: Optional[Path] = None,
    quiet: bool = False,
    color: bool = False,
) -> Tuple[int, str]:
    """Execute one command; returns the exit code and the serialized report.

    Errors and numerical warnings are written to stderr as JSON lines.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            command = command or config.command
            if command is None:
                raise ConfigError("no command given")
            if config.command is not None and config.command != command:
                raise ConfigError(f"config is for {config.command!r}, not {command!r}")
            require(config, command)
            if command == "simulate":
                text = cmd_simulate(config, fmt or "csv", threads, quiet, color)
            elif command == "fit":
                text = cmd_fit(config, fmt or config.output, base_dir, color)
            else:
                text = cmd_test(config, fmt or config.output, base_dir, color)
            code = EXIT_OK
        except ClusterKeeperError as exc:
            emit_error(exc)
            code, text = exc.exit_code, ""
    for w in caught:
        emit({"level": "warning", "warning": w.category.__name__, "message": str(w.message)})
    return code, text


def main(argv: Optional[list] = None) -> int:
    colorama_init(autoreset=True)
    args = parse_args(argv)
    config_path = Path(args.config)
    try:
        config = parse_config(data.read_json(config_path))
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            config = replace(config, seed=args.seed)
            if config.simulate is not None:
                config = replace(config, simulate=replace(config.simulate, seed=args.seed))
        threads = resolve_threads(args.threads, config)
    except ClusterKeeperError as exc:
        emit_error(exc)
        return exc.exit_code

    color = args.out is None and sys.stdout.isatty()
    try:
        code, text = run(config, args.cmd, args.format, threads, config_path.parent, args.quiet, color)
    except KeyboardInterrupt:
        print(Fore.YELLOW + "Interrupted.", file=sys.stderr)
        return EXIT_INTERRUPTED
    if code != EXIT_OK:
        return code
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            err = DataError(f"cannot write {args.out}: {exc}")
            emit_error(err)
            return err.exit_code
        if not args.quiet:
            print(Fore.GREEN + f"Wrote {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return EXIT_OK
