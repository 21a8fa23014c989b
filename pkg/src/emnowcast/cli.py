"""Command-line pipeline: simulate, tune, fit, nowcast, evaluate, aggregate.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error, 3 data
error, 4 numerical failure. Diagnostics go to standard error; ``evaluate``
prints its JSON report to standard output.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .data import CompletedDataset, assign_splits
from .em import nowcast, predict_estimates, run_em
from .exceptions import ConfigError, DataError, NowcastError
from .likelihood import ase_lambda, ase_p, complete_ll, observed_ll
from .simulation import PRESETS, SimulationSpec, get_spec, simulate_dataset
from .tuning import load_grid, random_grid_search


def _sibling(path: str, suffix: str) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + suffix + p.suffix))


def _load_spec(name: str) -> SimulationSpec:
    if name in PRESETS:
        return get_spec(name)
    doc = io.load_json(name)
    try:
        return SimulationSpec.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: invalid simulation spec ({exc})") from None


def _run_config(args) -> io.RunConfig:
    cfg = io.read_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _data_path(args, cfg: io.RunConfig) -> str:
    path = args.data or cfg.paths.get("data")
    if not path:
        raise ConfigError("no dataset given (--data or paths.data)")
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec = _load_spec(args.spec)
    truth_out = args.truth_out or _sibling(args.out, ".truth")
    complete_out = args.complete_out or _sibling(args.out, ".complete")
    io.check_distinct_paths([args.out, truth_out, complete_out])
    sim = simulate_dataset(args.n, spec, args.seed, id_prefix=args.id_prefix)
    io.write_dataset(args.out, sim.dataset)
    io.write_truth(truth_out, sim.dataset.entity_ids, sim.truth)
    io.write_complete_counts(complete_out, sim.dataset.entity_ids, sim.complete_counts)
    print(f"wrote {sim.dataset.n} records to {args.out}", file=sys.stderr)
    return 0


def cmd_tune(args) -> int:
    cfg = _run_config(args)
    data = io.split_dataset(io.read_dataset(_data_path(args, cfg)), cfg)
    kind = cfg.learner["kind"]
    grid = load_grid(args.grid) if args.grid in ("glm", "gbt", "mlp") else io.load_json(args.grid)
    if not isinstance(grid, dict):
        raise ConfigError("grid must be a JSON object of value lists")
    fixed = {k: v for k, v in cfg.learner.items() if k != "kind" and k not in grid}
    result = random_grid_search(data, grid, args.budget, args.search_seed, kind, K=cfg.K,
                                em_patience=cfg.em_patience, fixed=fixed, run_seed=cfg.seed)
    if args.out:
        io.write_score_table(args.out, result.table)
    if args.best_out:
        io.write_json(args.best_out, {**cfg.to_dict(), "learner": dict(result.best_config)})
    print(json.dumps({"best_score": result.best_score, "best_config": result.best_config}))
    return 0


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    out_model = args.out_model or cfg.paths.get("model")
    trace = args.trace or cfg.paths.get("trace")
    data_path = _data_path(args, cfg)
    if not out_model:
        raise ConfigError("no model output path (--out-model or paths.model)")
    io.check_distinct_paths([data_path, out_model, trace, args.config, args.coefficients])
    data = io.split_dataset(io.read_dataset(data_path), cfg)
    result = run_em(data, cfg.learner, K=cfg.K, em_patience=cfg.em_patience, seed=cfg.seed, trace_path=trace)
    io.write_model(out_model, result, data, cfg)
    if args.coefficients:
        io.write_coefficients(args.coefficients, result.learner)
    print(f"best iteration {result.best_iteration} of {result.n_iterations}, "
          f"val2 LL {result.ll_trace[result.best_iteration - 1]!r}", file=sys.stderr)
    return 0


def cmd_nowcast(args) -> int:
    learner, _ = io.read_model(args.model)
    data = io.read_dataset(args.data)
    io.check_distinct_paths([args.model, args.data, args.out, args.totals_out])
    cast = nowcast(learner, data)
    io.write_nowcast(args.out, cast, data, args.totals_out)
    print(f"wrote {len(cast)} nowcast cells to {args.out}", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    learner, doc = io.read_model(args.model)
    data = io.read_dataset(args.data)
    rows = np.arange(data.n)
    if args.split != "all":
        run = doc.get("run_config")
        if run is None:
            raise ConfigError("model carries no split settings; use --split all")
        labelled = assign_splits(data, run["split_fractions"], run["split_seed"])
        rows = labelled.split_index(args.split)
    data = data.subset(rows)
    est = predict_estimates(learner, data)
    report = {"records": data.n, "observed_ll": observed_ll(est, data).value}
    if args.complete:
        ids, counts = io.read_complete_counts(args.complete)
        counts = counts[io.align_to(ids, data.entity_ids, args.complete)]
        if counts.shape[1] != data.d:
            raise DataError(f"{args.complete}: expected {data.d} count columns")
        report["complete_ll"] = complete_ll(est, CompletedDataset(counts, data)).value
    if args.truth:
        ids, truth = io.read_truth(args.truth)
        truth = truth.subset(io.align_to(ids, data.entity_ids, args.truth))
        report["ase_lambda"] = ase_lambda(est, truth)
        report["ase_p"] = ase_p(est, truth)
    text = json.dumps(report)
    if args.out:
        io.atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def cmd_aggregate(args) -> int:
    try:
        epoch = _dt.date.fromisoformat(args.epoch)
    except ValueError:
        raise ConfigError(f"invalid --epoch {args.epoch!r}") from None
    keys = [k for k in (args.entity_keys or "").split(",") if k]
    flags = [f for f in (args.period_flags or "").split(",") if f]
    data, summary = io.aggregate_cases(io.read_cases(args.cases), args.d, args.tau, keys, epoch,
                                       args.onset_column, args.report_column, flags)
    io.write_dataset(args.out, data)
    print(json.dumps({**summary.__dict__, "observed_events": summary.observed_events}), file=sys.stderr)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emnowcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a dataset with known truth")
    p.add_argument("--spec", required=True, help="linear, nonlinear or a spec JSON file")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset CSV")
    p.add_argument("--truth-out", help="true parameters CSV (default: <out>.truth.csv)")
    p.add_argument("--complete-out", help="uncensored counts CSV (default: <out>.complete.csv)")
    p.add_argument("--id-prefix", default="r")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune", help="random grid search scored on val2")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help="glm, gbt, mlp or a grid JSON file")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--data")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--search-seed", type=int, default=0)
    p.add_argument("--out", help="score table CSV")
    p.add_argument("--best-out", help="config JSON with the selected learner")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("fit", help="run EM and save the best model")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out-model")
    p.add_argument("--trace", help="JSON-lines iteration trace")
    p.add_argument("--coefficients", help="GLM coefficient CSV")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("nowcast", help="predict unreported counts")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--totals-out", help="per-record unreported totals CSV")
    p.set_defaults(func=cmd_nowcast)

    p = sub.add_parser("evaluate", help="likelihoods and errors of a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--truth", help="true parameters CSV, enables ASE")
    p.add_argument("--complete", help="uncensored counts CSV, enables the complete LL")
    p.add_argument("--split", choices=["all", "train", "val1", "val2", "test"], default="all")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("aggregate", help="turn case-level rows into a count dataset")
    p.add_argument("--cases", required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--tau", type=int, required=True)
    p.add_argument("--epoch", required=True, help="ISO date of day index 1")
    p.add_argument("--entity-keys", default="", help="comma-separated grouping columns")
    p.add_argument("--period-flags", default="", help="comma-separated, e.g. weekend")
    p.add_argument("--onset-column", default="onset_date")
    p.add_argument("--report-column", default="report_date")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)
    return parser


def cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return args.func(args)
    except NowcastError as exc:
        print(f"emnowcast {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"emnowcast {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


def main() -> None:
    sys.exit(cli())
