"""Core data containers shared by every module.

A dataset is held column-wise in numpy arrays; :class:`ObservationRecord` and
:class:`FeatureVector` are lightweight per-record views built on demand.

Feature naming conventions
--------------------------
* ``"var=level"`` marks a one-hot indicator of categorical variable ``var``.
  All levels are stored; learners that need a reference class drop the first.
* ``"ps{j}_{flag}"`` is a period covariate of reporting day ``occ + j - 1``.
  The occurrence model only sees the ``j = 1`` block.
* Anything else is an entity-level numeric covariate.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, ContractError, InvalidRecordError, SchemaError

SPLIT_LABELS = ("train", "val1", "val2", "test")
DEFAULT_SPLIT_FRACTIONS = (0.64, 0.16, 0.20)

_PERIOD_RE = re.compile(r"^ps(\d+)_(.+)$")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# schema helpers
# --------------------------------------------------------------------------


def period_delay(name: str) -> int | None:
    """Delay index ``j`` of a period covariate name, or None for entity columns."""
    m = _PERIOD_RE.match(name)
    return int(m.group(1)) if m else None


def occurrence_feature_names(names: Sequence[str]) -> list[str]:
    """Entity covariates plus the occurrence-day (``j = 1``) period block."""
    return [nm for nm in names if period_delay(nm) in (None, 1)]


def categorical_groups(names: Sequence[str]) -> dict[str, list[str]]:
    """Map each categorical variable to its indicator columns, in column order."""
    groups: dict[str, list[str]] = {}
    for nm in names:
        if "=" in nm:
            var = nm.split("=", 1)[0]
            groups.setdefault(var, []).append(nm)
    return groups


def period_feature_names(flags: Sequence[str], d: int) -> list[str]:
    return [f"ps{j}_{flag}" for j in range(1, d + 1) for flag in flags]


# --------------------------------------------------------------------------
# record-level types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != len(self.names):
            raise SchemaError("feature names and values differ in length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", _frozen(values))

    def __getitem__(self, name: str) -> float:
        try:
            return float(self.values[self.names.index(name)])
        except ValueError:
            raise SchemaError(f"unknown feature {name!r}") from None

    def __len__(self):
        return len(self.names)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


@dataclass(frozen=True)
class ObservationRecord:
    entity_id: str
    occ_period: int
    covariates: FeatureVector
    observed_counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.observed_counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise InvalidRecordError("observed_counts must be a non-empty vector")
        if (counts < 0).any():
            raise InvalidRecordError(f"negative count in record {self.entity_id!r}")
        object.__setattr__(self, "observed_counts", _frozen(counts))

    @property
    def tau_i(self) -> int:
        return int(self.observed_counts.shape[0])


def compute_tau(occ_period, tau: int, d: int):
    """Number of observable delay cells, ``min(d, tau - occ_period + 1)``.

    Works element-wise on arrays.
    """
    if d < 1:
        raise ConfigError("d must be >= 1")
    occ = np.asarray(occ_period)
    if (occ > tau).any():
        raise InvalidRecordError(f"occurrence period after present time tau={tau}")
    out = np.minimum(d, tau - occ + 1)
    return int(out) if out.ndim == 0 else out.astype(np.int64)


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------


class Dataset:
    """Observed (censored) dataset.

    Parameters
    ----------
    entity_ids : sequence of str, length n
    occ_period : int array, length n
    counts : int array (n, d)
        Observed counts; cells beyond each record's horizon are ignored and
        stored as zero.
    features : float array (n, p)
    feature_names : sequence of str, length p
    d : int
        Number of delay classes.
    tau : int
        Present-time period index.
    split : sequence of str, optional
        Per-record label in ``{"train", "val1", "val2", "test"}``.
    """

    def __init__(self, entity_ids, occ_period, counts, features, feature_names, d, tau, split=None):
        d, tau = int(d), int(tau)
        if d < 1:
            raise ConfigError("d must be >= 1")
        if d > tau:
            raise ConfigError(f"maximum delay d={d} exceeds observation window tau={tau}")
        occ = np.asarray(occ_period, dtype=np.int64).reshape(-1)
        n = occ.shape[0]
        counts = np.asarray(counts)
        if counts.shape != (n, d):
            raise ContractError(f"counts must have shape ({n}, {d}), got {counts.shape}")
        if not np.all(np.isfinite(counts)) or (counts != np.round(counts)).any():
            raise InvalidRecordError("observed counts must be integers")
        counts = counts.astype(np.int64)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1 and n == 0:
            features = features.reshape(0, len(feature_names))
        names = tuple(feature_names)
        if features.shape != (n, len(names)):
            raise SchemaError(f"features must have shape ({n}, {len(names)}), got {features.shape}")
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        ids = tuple(str(e) for e in entity_ids)
        if len(ids) != n:
            raise ContractError("entity_ids length differs from number of records")

        tau_i = compute_tau(occ, tau, d) if n else np.zeros(0, dtype=np.int64)
        if n and (tau_i < 1).any():
            raise InvalidRecordError("every record needs at least one observable cell")
        mask = np.arange(d)[None, :] < tau_i[:, None]
        if (counts[mask] < 0).any():
            raise InvalidRecordError("counts must be non-negative")
        counts = np.where(mask, counts, 0)

        if split is not None:
            split = np.asarray(split, dtype=object).reshape(-1)
            if split.shape[0] != n:
                raise ContractError("split labels length differs from number of records")
            bad = set(split.tolist()) - set(SPLIT_LABELS)
            if bad:
                raise ContractError(f"unknown split labels {sorted(bad)}")
            split = _frozen(split)

        self.entity_ids = ids
        self.occ_period = _frozen(occ)
        self.counts = _frozen(counts)
        self.features = _frozen(features)
        self.feature_names = names
        self.d = d
        self.tau = tau
        self.tau_i = _frozen(tau_i)
        self.observed_mask = _frozen(mask)
        self.split = split

    @classmethod
    def from_records(cls, records: Sequence[ObservationRecord], d, tau, split=None):
        if not records:
            raise ContractError("at least one record is required")
        names = records[0].covariates.names
        counts = np.zeros((len(records), d), dtype=np.int64)
        for i, rec in enumerate(records):
            if rec.covariates.names != names:
                raise SchemaError("all records must share the same feature names")
            expected = compute_tau(rec.occ_period, tau, d)
            if rec.tau_i != expected:
                raise InvalidRecordError(
                    f"record {rec.entity_id!r}: {rec.tau_i} observed cells, expected {expected}"
                )
            counts[i, : rec.tau_i] = rec.observed_counts
        return cls(
            [r.entity_id for r in records],
            [r.occ_period for r in records],
            counts,
            np.vstack([r.covariates.values for r in records]),
            names,
            d,
            tau,
            split,
        )

    def __len__(self):
        return len(self.entity_ids)

    @property
    def n(self) -> int:
        return len(self.entity_ids)

    def record(self, i: int) -> ObservationRecord:
        t = int(self.tau_i[i])
        return ObservationRecord(
            self.entity_ids[i],
            int(self.occ_period[i]),
            FeatureVector(self.feature_names, self.features[i]),
            self.counts[i, :t],
        )

    def records(self) -> Iterator[ObservationRecord]:
        for i in range(self.n):
            yield self.record(i)

    def columns(self, names: Sequence[str]) -> np.ndarray:
        """Feature sub-matrix for the given column names, in that order."""
        index = {nm: k for k, nm in enumerate(self.feature_names)}
        try:
            idx = [index[nm] for nm in names]
        except KeyError as exc:
            raise SchemaError(f"unknown feature {exc.args[0]!r}") from None
        return self.features[:, idx]

    @property
    def observed_total(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(
            [self.entity_ids[i] for i in index],
            self.occ_period[index],
            self.counts[index],
            self.features[index],
            self.feature_names,
            self.d,
            self.tau,
            None if self.split is None else self.split[index],
        )

    def with_split(self, split) -> Dataset:
        return Dataset(
            self.entity_ids, self.occ_period, self.counts, self.features,
            self.feature_names, self.d, self.tau, split,
        )

    def split_index(self, label: str) -> np.ndarray:
        if self.split is None:
            raise ContractError("dataset has no split labels")
        return np.flatnonzero(self.split == label)

    def equals(self, other: Dataset) -> bool:
        """Field-wise equality of all records (floats compared exactly)."""
        same_split = (self.split is None and other.split is None) or (
            self.split is not None
            and other.split is not None
            and np.array_equal(self.split, other.split)
        )
        return (
            self.entity_ids == other.entity_ids
            and self.feature_names == other.feature_names
            and self.d == other.d
            and np.array_equal(self.occ_period, other.occ_period)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.features, other.features)
            and same_split
        )

    def __repr__(self):
        return f"Dataset(n={self.n}, d={self.d}, tau={self.tau}, p={len(self.feature_names)})"


@dataclass(frozen=True)
class CompletedDataset:
    """E-step output: observed prefixes plus expected counts in unobserved cells."""

    counts: np.ndarray
    dataset: Dataset = field(repr=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        data = self.dataset
        if counts.shape != (data.n, data.d):
            raise ContractError(f"completed counts must have shape ({data.n}, {data.d})")
        if not np.all(np.isfinite(counts)) or (counts < 0).any():
            raise ContractError("completed counts must be finite and non-negative")
        if not np.array_equal(counts[data.observed_mask], data.counts[data.observed_mask]):
            raise ContractError("completed counts must preserve observed cells exactly")
        object.__setattr__(self, "counts", _frozen(counts))

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def subset(self, index) -> CompletedDataset:
        return CompletedDataset(self.counts[index], self.dataset.subset(index))


@dataclass(frozen=True)
class ParameterEstimates:
    """Per-record occurrence intensity ``lam`` and reporting probabilities ``p``."""

    lam: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != lam.shape[0]:
            raise ContractError("p must be an (n, d) matrix matching lam")
        if not np.all(np.isfinite(lam)) or (lam <= 0).any():
            raise ContractError("occurrence intensities must be finite and positive")
        if not np.all(np.isfinite(p)) or (p < 0).any() or (p > 1).any():
            raise ContractError("reporting probabilities must lie in [0, 1]")
        if p.size and np.abs(p.sum(axis=1) - 1.0).max() > 1e-12:
            raise ContractError("reporting probabilities must sum to 1 within 1e-12")
        object.__setattr__(self, "lam", _frozen(lam))
        object.__setattr__(self, "p", _frozen(p))

    def __len__(self):
        return self.lam.shape[0]

    @property
    def d(self) -> int:
        return self.p.shape[1]

    def subset(self, index) -> ParameterEstimates:
        return ParameterEstimates(self.lam[index], self.p[index])

    @classmethod
    def from_scores(cls, occ_score, rep_score) -> ParameterEstimates:
        """Apply the exponential link and row-wise softmax to raw scores."""
        from .validation import softmax

        return cls(np.exp(np.asarray(occ_score, dtype=np.float64)), softmax(rep_score))


def assign_splits(dataset: Dataset, fractions=DEFAULT_SPLIT_FRACTIONS, seed: int = 0) -> Dataset:
    """Label non-test records train/val1/val2 in the given proportions.

    Group sizes use largest-remainder rounding, so each is within one record
    of its target. Records already labelled ``"test"`` keep their label.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0:
        raise ConfigError("split fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)!r}")

    labels = (
        np.full(dataset.n, "train", dtype=object)
        if dataset.split is None
        else np.array(dataset.split, dtype=object)
    )
    pool = np.flatnonzero(labels != "test")
    m = pool.shape[0]
    raw = np.array(fractions) * m
    sizes = np.floor(raw).astype(int)
    short = m - sizes.sum()
    # ties in the remainder go to the earlier group
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:short]] += 1

    rng = np.random.default_rng(seed)
    perm = pool[rng.permutation(m)]
    bounds = np.cumsum(sizes)
    labels[perm[: bounds[0]]] = "train"
    labels[perm[bounds[0] : bounds[1]]] = "val1"
    labels[perm[bounds[1] :]] = "val2"
    return dataset.with_split(labels)
