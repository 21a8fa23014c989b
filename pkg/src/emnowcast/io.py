"""File formats: dataset/truth/nowcast CSVs, model and config JSON, case-level ingestion.

CSV files are UTF-8 with LF line endings. Reals are written with ``repr`` so
that re-reading reproduces every value bit for bit.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io as _io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .data import DEFAULT_SPLIT_FRACTIONS, Dataset, ParameterEstimates, assign_splits, compute_tau
from .em import FitResult, Nowcast
from .exceptions import ConfigError, DataError, InvalidRecordError, SchemaError
from .glm import coefficient_rows
from .learners import LEARNER_KINDS, Learner, make_learner

MODEL_FORMAT = "emnowcast.model"
MODEL_VERSION = 1
CONFIG_SCHEMA_VERSION = 1
_FIXED_COLUMNS = ("entity_id", "occ_period", "tau_i")


# --------------------------------------------------------------------------
# low-level helpers
# --------------------------------------------------------------------------


def format_real(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename over the target."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
            return header, [row for row in reader if row]
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None


def _parse_real(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: not a number: {text!r}") from None


def _parse_int(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"{where}: not an integer: {text!r}") from None


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def dataset_to_csv(data: Dataset) -> str:
    header = list(_FIXED_COLUMNS) + [f"n_{j}" for j in range(1, data.d + 1)] + list(data.feature_names)
    rows = []
    for i in range(data.n):
        t = int(data.tau_i[i])
        counts = [str(int(c)) for c in data.counts[i, :t]] + [""] * (data.d - t)
        feats = [format_real(v) for v in data.features[i]]
        rows.append([data.entity_ids[i], str(int(data.occ_period[i])), str(t)] + counts + feats)
    return _csv_text(header, rows)


def write_dataset(path, data: Dataset) -> None:
    atomic_write_text(path, dataset_to_csv(data))


def read_dataset(path, tau: int | None = None) -> Dataset:
    """Read a dataset CSV; ``tau`` defaults to the latest observed reporting period."""
    header, rows = _read_csv(path)
    if tuple(header[:3]) != _FIXED_COLUMNS:
        raise SchemaError(f"{path}: header must start with {','.join(_FIXED_COLUMNS)}")
    d = 0
    while 3 + d < len(header) and header[3 + d] == f"n_{d + 1}":
        d += 1
    if d == 0:
        raise SchemaError(f"{path}: no n_1..n_d count columns")
    names = header[3 + d :]
    if not rows:
        raise DataError(f"{path}: no records")
    n = len(rows)
    ids, occ, tau_i = [], np.empty(n, dtype=np.int64), np.empty(n, dtype=np.int64)
    counts = np.zeros((n, d), dtype=np.int64)
    feats = np.empty((n, len(names)))
    for i, row in enumerate(rows):
        line = i + 2
        where = f"{path}:{line}"
        if len(row) != len(header):
            raise DataError(f"{where}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        occ[i] = _parse_int(row[1], where)
        tau_i[i] = _parse_int(row[2], where)
        if not 1 <= tau_i[i] <= d:
            raise InvalidRecordError(f"{where}: tau_i must lie in 1..{d}")
        for j in range(d):
            cell = row[3 + j]
            if j < tau_i[i]:
                if cell == "":
                    raise InvalidRecordError(f"{where}: missing observed count n_{j + 1}")
                counts[i, j] = _parse_int(cell, where)
                if counts[i, j] < 0:
                    raise InvalidRecordError(f"{where}: negative count")
            elif cell != "":
                raise InvalidRecordError(f"{where}: n_{j + 1} lies beyond tau_i and must be empty")
        for k in range(len(names)):
            feats[i, k] = _parse_real(row[3 + d + k], where)
    if tau is None:
        tau = int(np.max(occ + tau_i - 1))
    try:
        expected = compute_tau(occ, tau, d)
    except InvalidRecordError as exc:
        raise InvalidRecordError(f"{path}: {exc}") from None
    bad = np.flatnonzero(expected != tau_i)
    if bad.size:
        raise InvalidRecordError(f"{path}:{bad[0] + 2}: tau_i={tau_i[bad[0]]} inconsistent with tau={tau}")
    return Dataset(ids, occ, counts, feats, names, d, tau)


def write_complete_counts(path, entity_ids: Sequence[str], counts: np.ndarray) -> None:
    d = counts.shape[1]
    rows = ([eid] + [format_real(c) for c in row] for eid, row in zip(entity_ids, counts))
    atomic_write_text(path, _csv_text(["entity_id"] + [f"n_{j}" for j in range(1, d + 1)], rows))


def read_complete_counts(path) -> tuple[list[str], np.ndarray]:
    header, rows = _read_csv(path)
    if header[0] != "entity_id":
        raise SchemaError(f"{path}: first column must be entity_id")
    ids = [r[0] for r in rows]
    counts = np.array([[_parse_real(v, f"{path}:{i + 2}") for v in r[1:]] for i, r in enumerate(rows)])
    return ids, counts


# --------------------------------------------------------------------------
# truth / parameter estimates
# --------------------------------------------------------------------------


def write_truth(path, entity_ids: Sequence[str], est: ParameterEstimates) -> None:
    header = ["entity_id", "lambda"] + [f"p_{j}" for j in range(1, est.d + 1)]
    rows = ([eid, repr(float(lam))] + [repr(float(v)) for v in p] for eid, lam, p in zip(entity_ids, est.lam, est.p))
    atomic_write_text(path, _csv_text(header, rows))


def read_truth(path) -> tuple[list[str], ParameterEstimates]:
    header, rows = _read_csv(path)
    if header[:2] != ["entity_id", "lambda"]:
        raise SchemaError(f"{path}: header must start with entity_id,lambda")
    ids = [r[0] for r in rows]
    lam = np.array([_parse_real(r[1], f"{path}:{i + 2}") for i, r in enumerate(rows)])
    p = np.array([[_parse_real(v, f"{path}:{i + 2}") for v in r[2:]] for i, r in enumerate(rows)])
    return ids, ParameterEstimates(lam, p)


def align_to(ids: Sequence[str], reference: Sequence[str], what: str) -> np.ndarray:
    """Row positions in ``ids`` of every id in ``reference``."""
    pos = {e: k for k, e in enumerate(ids)}
    try:
        return np.array([pos[e] for e in reference], dtype=np.intp)
    except KeyError as exc:
        raise DataError(f"{what} has no row for record {exc.args[0]!r}") from None


# --------------------------------------------------------------------------
# nowcasts and coefficients
# --------------------------------------------------------------------------


def write_nowcast(path, cast: Nowcast, data: Dataset, totals_path=None) -> None:
    rows = (
        [cast.entity_ids[r], str(int(data.occ_period[r])), str(int(j)), repr(float(v))]
        for r, j, v in zip(cast.record, cast.delay, cast.predicted)
    )
    atomic_write_text(path, _csv_text(["entity_id", "occ_period", "delay", "predicted"], rows))
    if totals_path is not None:
        trows = (
            [eid, str(int(o)), str(int(t)), repr(float(v))]
            for eid, o, t, v in zip(cast.entity_ids, data.occ_period, data.tau_i, cast.totals)
        )
        atomic_write_text(totals_path, _csv_text(["entity_id", "occ_period", "tau_i", "unreported"], trows))


def write_coefficients(path, learner: Learner) -> None:
    """GLM coefficients as ``model,column,class_index,value`` rows."""
    if learner.kind != "glm":
        raise ConfigError("coefficient export is only defined for GLM learners")
    rows = [("occurrence", nm, str(j), repr(v)) for nm, j, v in coefficient_rows(learner.occ_design.names, learner.occ_coef)]
    rows += [("reporting", nm, str(j), repr(v)) for nm, j, v in coefficient_rows(learner.rep_design.names, learner.rep_coef)]
    atomic_write_text(path, _csv_text(["model", "column", "class_index", "value"], rows))


def write_score_table(path, table) -> None:
    rows = ([str(s), json.dumps(cfg, sort_keys=True), repr(float(ll)), f"{secs:.3f}"] for s, cfg, ll, secs in table)
    atomic_write_text(path, _csv_text(["sample", "config", "val2_ll", "seconds"], rows))


# --------------------------------------------------------------------------
# configs
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Learner choice, EM settings, split settings, seeds and optional paths."""

    learner: dict
    K: int = 100
    em_patience: int = 10
    split_fractions: tuple = DEFAULT_SPLIT_FRACTIONS
    split_seed: int = 0
    seed: int = 0
    paths: dict = field(default_factory=dict)

    _KEYS = ("schema_version", "learner", "K", "em_patience", "split_fractions", "split_seed", "seed", "paths")
    _PATH_KEYS = ("data", "model", "trace", "out")

    def __post_init__(self):
        if not isinstance(self.learner, Mapping) or self.learner.get("kind") not in LEARNER_KINDS:
            raise ConfigError(f"learner.kind must be one of {LEARNER_KINDS}")
        if int(self.K) < 1:
            raise ConfigError("K must be >= 1")
        self.learner = dict(self.learner)
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        unknown = set(self.paths) - set(self._PATH_KEYS)
        if unknown:
            raise ConfigError(f"unknown path keys {sorted(unknown)}")
        check_distinct_paths(self.paths.values())
        # fail fast on unknown hyperparameters
        make_learner(self.learner, ["x"], 1)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> RunConfig:
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(cls._KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if doc.get("schema_version") != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}")
        if "learner" not in doc:
            raise ConfigError("config needs a learner section")
        kwargs = {k: doc[k] for k in cls._KEYS[1:] if k in doc}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "learner": dict(self.learner),
            "K": int(self.K),
            "em_patience": int(self.em_patience),
            "split_fractions": list(self.split_fractions),
            "split_seed": int(self.split_seed),
            "seed": int(self.seed),
            "paths": dict(self.paths),
        }


def check_distinct_paths(paths: Iterable) -> None:
    resolved = [os.path.realpath(p) for p in paths if p]
    if len(set(resolved)) != len(resolved):
        raise ConfigError("file paths in one run must be distinct")


def load_json(path, error=ConfigError) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise error(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise error(f"{path}: invalid JSON ({exc})") from None


def read_config(path) -> RunConfig:
    return RunConfig.from_dict(load_json(path))


def write_json(path, doc: Any) -> None:
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=False) + "\n")


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


def model_to_dict(result: FitResult, data: Dataset, config: RunConfig | None = None) -> dict:
    learner = result.learner
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "learner": {"kind": learner.kind, **learner.params},
        "seed": learner.seed,
        "feature_names": list(learner.feature_names),
        "d": learner.d,
        "tau": data.tau,
        "best_iteration": result.best_iteration,
        "val2_trace": list(result.ll_trace),
        "train_trace": list(result.train_trace),
        "run_config": None if config is None else config.to_dict(),
        "state": learner.state_dict(),
    }


def learner_from_dict(doc: Mapping) -> Learner:
    if doc.get("format") != MODEL_FORMAT:
        raise DataError("not a model document")
    if doc.get("version") != MODEL_VERSION:
        raise DataError(f"unsupported model version {doc.get('version')}")
    learner = make_learner(doc["learner"], doc["feature_names"], doc["d"], seed=doc.get("seed", 0))
    learner.load_state_dict(doc["state"])
    return learner


def write_model(path, result: FitResult, data: Dataset, config: RunConfig | None = None) -> None:
    write_json(path, model_to_dict(result, data, config))


def read_model(path) -> tuple[Learner, dict]:
    doc = load_json(path, DataError)
    return learner_from_dict(doc), doc


# --------------------------------------------------------------------------
# case-level ingestion
# --------------------------------------------------------------------------


@dataclass
class AggregationSummary:
    rows_in: int = 0
    dropped_delay: int = 0
    dropped_future_onset: int = 0
    censored: int = 0
    records: int = 0

    @property
    def dropped(self) -> int:
        """Rows that contribute no observed count."""
        return self.dropped_delay + self.dropped_future_onset + self.censored

    @property
    def observed_events(self) -> int:
        return self.rows_in - self.dropped


def _day_index(text: str, epoch: _dt.date, where: str) -> int:
    try:
        return (_dt.date.fromisoformat(text.strip()) - epoch).days + 1
    except ValueError:
        raise DataError(f"{where}: invalid ISO date {text!r}") from None


def _encode_covariates(columns: Mapping[str, list[str]], n: int) -> tuple[list[str], np.ndarray]:
    """Numeric columns pass through; anything else is one-hot encoded as ``col=value``."""
    names, blocks = [], []
    for col, values in columns.items():
        try:
            blocks.append(np.array([float(v) for v in values])[:, None])
            names.append(col)
        except ValueError:
            levels = sorted(set(values))
            blocks.append(np.array([[float(v == lv) for lv in levels] for v in values]))
            names += [f"{col}={lv}" for lv in levels]
    return names, (np.hstack(blocks) if blocks else np.zeros((n, 0)))


def aggregate_cases(
    rows: Sequence[Mapping[str, str]],
    d: int,
    tau: int,
    entity_keys: Sequence[str],
    epoch: _dt.date,
    onset_column: str = "onset_date",
    report_column: str = "report_date",
    period_flags: Sequence[str] = (),
    first_line: int = 2,
) -> tuple[Dataset, AggregationSummary]:
    """Turn one-row-per-case data into a count dataset.

    The delay class is ``report - onset + 1``; cases beyond ``d`` are dropped.
    With no ``entity_keys`` every case is its own record carrying all other
    columns as covariates; otherwise cases are grouped by key values and onset
    day, and the key columns become the covariates. Reports after ``tau`` are
    censored. ``period_flags`` may contain ``"weekend"`` to add day-of-week
    indicators for each reporting day of the window.
    """
    summary = AggregationSummary(rows_in=len(rows))
    unknown_flags = set(period_flags) - {"weekend"}
    if unknown_flags:
        raise ConfigError(f"unsupported period flags {sorted(unknown_flags)}")
    kept = []
    for k, row in enumerate(rows):
        where = f"line {first_line + k}"
        try:
            onset = _day_index(row[onset_column], epoch, where)
            report = _day_index(row[report_column], epoch, where)
        except KeyError as exc:
            raise SchemaError(f"{where}: missing column {exc.args[0]!r}") from None
        if report < onset:
            raise InvalidRecordError(f"{where}: report date precedes onset date")
        delay = report - onset + 1
        if delay > d:
            summary.dropped_delay += 1
            continue
        if onset > tau:
            summary.dropped_future_onset += 1
            continue
        if report > tau:
            summary.censored += 1
        kept.append((onset, delay, report <= tau, row))
    if not kept:
        raise DataError("no cases left after dropping long delays")

    covariate_cols = (
        [c for c in kept[0][3] if c not in (onset_column, report_column)]
        if not entity_keys
        else list(entity_keys)
    )
    groups: dict[tuple, int] = {}
    keys, occ, counts = [], [], []
    for onset, delay, observed, row in kept:
        if entity_keys:
            try:
                key = tuple(row[c] for c in entity_keys) + (onset,)
            except KeyError as exc:
                raise SchemaError(f"missing entity key column {exc.args[0]!r}") from None
            idx = groups.get(key)
            if idx is None:
                idx = groups[key] = len(keys)
                keys.append(row)
                occ.append(onset)
                counts.append(np.zeros(d, dtype=np.int64))
        else:
            idx = len(keys)
            keys.append(row)
            occ.append(onset)
            counts.append(np.zeros(d, dtype=np.int64))
        if observed:
            counts[idx][delay - 1] += 1

    cov = {c: [str(r.get(c, "")) for r in keys] for c in covariate_cols}
    names, X = _encode_covariates(cov, len(keys))
    occ_arr = np.array(occ, dtype=np.int64)
    if "weekend" in period_flags:
        days = occ_arr[:, None] + np.arange(d)[None, :] - 1
        weekday = np.vectorize(lambda t: (epoch + _dt.timedelta(days=int(t) - 1)).weekday())(days)
        X = np.hstack([X, (weekday >= 5).astype(np.float64)])
        names += [f"ps{j}_weekend" for j in range(1, d + 1)]
    if entity_keys:
        ids = ["|".join(str(r[c]) for c in entity_keys) + f"@{o}" for r, o in zip(keys, occ)]
    else:
        ids = [f"case{first_line + k}" for k in range(len(keys))]
        ids = [str(r.get("case_id", i)) for r, i in zip(keys, ids)]
    summary.records = len(keys)
    return Dataset(ids, occ_arr, np.vstack(counts), X, names, d, tau), summary


def read_cases(path) -> list[dict]:
    header, rows = _read_csv(path)
    return [dict(zip(header, r)) for r in rows]


def split_dataset(data: Dataset, config: RunConfig) -> Dataset:
    return assign_splits(data, config.split_fractions, config.split_seed)
