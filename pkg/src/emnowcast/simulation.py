"""Synthetic nowcasting data: calendar, entity covariates, coefficient presets, sampling.

Counts are drawn in two stages (Poisson totals, then a multinomial split over
delay classes) and afterwards censored at the present time ``tau``.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .data import Dataset, FeatureVector, ParameterEstimates, period_feature_names
from .exceptions import ConfigError, SchemaError
from .validation import softmax

INTERCEPT = "(intercept)"
PERIOD_FLAGS = ("weekend", "holiday", "monthedge")
ENTITY_FEATURES = ("x1=1", "x1=2", "x2", "x3=1", "x3=2", "x3=3", "x4=1", "x4=2", "x4=3")
SPEC_FORMAT = "emnowcast.simulation-spec"
SPEC_VERSION = 1

CALENDAR_START = _dt.date(2022, 4, 11)
CALENDAR_DAYS = 31
_WEEKEND_DAYS = frozenset({6, 7, 13, 14, 20, 21, 27, 28})
# Good Friday, Easter Sunday, Easter Monday, King's Day
_HOLIDAY_DAYS = frozenset({5, 7, 8, 17})
# 30 April and 1 May
_MONTH_EDGE_DAYS = frozenset({20, 21})


# --------------------------------------------------------------------------
# calendar
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CalendarDay:
    index: int
    weekend: bool
    holiday: bool
    monthedge: bool

    @property
    def date(self) -> _dt.date:
        return CALENDAR_START + _dt.timedelta(days=self.index - 1)

    def flags(self) -> tuple[float, ...]:
        return tuple(float(getattr(self, f)) for f in PERIOD_FLAGS)


def build_calendar(preset: str = "nl-2022-04") -> list[CalendarDay]:
    """The 31-day window starting Monday 11 April 2022 with its day flags."""
    if preset != "nl-2022-04":
        raise ConfigError(f"unknown calendar preset {preset!r}")
    return [
        CalendarDay(k, k in _WEEKEND_DAYS, k in _HOLIDAY_DAYS, k in _MONTH_EDGE_DAYS)
        for k in range(1, CALENDAR_DAYS + 1)
    ]


# --------------------------------------------------------------------------
# derived terms
# --------------------------------------------------------------------------

_FACTOR_KINDS = ("value", "log1p", "gt", "lt")


@dataclass(frozen=True)
class Term:
    """Product of factors built from named features.

    Factor forms: ``("value", name)``, ``("log1p", name)`` for ``log(x + 1)``,
    ``("gt", name, c)`` for ``1(x > c)`` and ``("lt", name, c)`` for ``1(x < c)``.
    """

    name: str
    factors: tuple

    def __post_init__(self):
        factors = tuple(tuple(f) for f in self.factors)
        for f in factors:
            if not f or f[0] not in _FACTOR_KINDS or len(f) != (3 if f[0] in ("gt", "lt") else 2):
                raise ConfigError(f"malformed factor {f!r} in term {self.name!r}")
        object.__setattr__(self, "factors", factors)

    def inputs(self) -> set[str]:
        return {f[1] for f in self.factors}

    def evaluate(self, X: np.ndarray, index: Mapping[str, int]) -> np.ndarray:
        out = np.ones(X.shape[0])
        for f in self.factors:
            try:
                col = X[:, index[f[1]]]
            except KeyError:
                raise SchemaError(f"term {self.name!r} needs unknown feature {f[1]!r}") from None
            if f[0] == "value":
                out = out * col
            elif f[0] == "log1p":
                out = out * np.log1p(col)
            elif f[0] == "gt":
                out = out * (col > f[2])
            else:
                out = out * (col < f[2])
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "factors": [list(f) for f in self.factors]}


# --------------------------------------------------------------------------
# simulation settings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulationSpec:
    """Coefficient maps for the occurrence and each reporting predictor.

    Keys of ``beta_lambda`` and ``beta_p[j]`` are feature names, term names or
    the intercept name; absent keys have coefficient zero.
    """

    d: int
    tau: int
    n_occurrence_days: int
    beta_lambda: Mapping[str, float]
    beta_p: tuple
    terms: tuple = ()
    calendar: tuple = field(default_factory=lambda: tuple(build_calendar()))
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "beta_lambda", dict(self.beta_lambda))
        object.__setattr__(self, "beta_p", tuple(dict(b) for b in self.beta_p))
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "calendar", tuple(self.calendar))
        if len(self.beta_p) != self.d:
            raise ConfigError(f"need {self.d} reporting coefficient maps, got {len(self.beta_p)}")
        if self.n_occurrence_days > self.tau:
            raise ConfigError("occurrence days extend past tau")
        if len(self.calendar) < self.n_occurrence_days + self.d - 1:
            raise ConfigError("calendar must cover occurrence days plus d - 1 reporting days")
        known = set(self.feature_names) | {t.name for t in self.terms} | {INTERCEPT}
        for t in self.terms:
            missing = t.inputs() - set(self.feature_names)
            if missing:
                raise SchemaError(f"term {t.name!r} uses unknown features {sorted(missing)}")
        for coefs in (self.beta_lambda, *self.beta_p):
            unknown = set(coefs) - known
            if unknown:
                raise SchemaError(f"coefficients for unknown names {sorted(unknown)}")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return ENTITY_FEATURES + tuple(period_feature_names(PERIOD_FLAGS, self.d))

    def _columns(self) -> list[str]:
        names = set(self.beta_lambda)
        for b in self.beta_p:
            names |= set(b)
        return sorted(names)

    def linear_predictors(self, X, feature_names: Sequence[str] | None = None):
        """Occurrence predictor ``(n,)`` and reporting predictors ``(n, d)``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        names = tuple(feature_names) if feature_names is not None else self.feature_names
        index = {nm: k for k, nm in enumerate(names)}
        terms = {t.name: t for t in self.terms}
        cols = self._columns()
        Z = np.empty((X.shape[0], len(cols)))
        for c, nm in enumerate(cols):
            if nm == INTERCEPT:
                Z[:, c] = 1.0
            elif nm in terms:
                Z[:, c] = terms[nm].evaluate(X, index)
            elif nm in index:
                Z[:, c] = X[:, index[nm]]
            else:
                raise SchemaError(f"coefficient name {nm!r} does not resolve against the features")
        b_lam = np.array([self.beta_lambda.get(nm, 0.0) for nm in cols])
        b_p = np.array([[b.get(nm, 0.0) for nm in cols] for b in self.beta_p])
        return Z @ b_lam, Z @ b_p.T

    def to_dict(self) -> dict:
        return {
            "format": SPEC_FORMAT,
            "version": SPEC_VERSION,
            "name": self.name,
            "d": self.d,
            "tau": self.tau,
            "n_occurrence_days": self.n_occurrence_days,
            "beta_lambda": dict(self.beta_lambda),
            "beta_p": [dict(b) for b in self.beta_p],
            "terms": [t.to_dict() for t in self.terms],
            "calendar": [
                {"index": c.index, "weekend": c.weekend, "holiday": c.holiday, "monthedge": c.monthedge}
                for c in self.calendar
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> SimulationSpec:
        if doc.get("format") != SPEC_FORMAT or doc.get("version") != SPEC_VERSION:
            raise ConfigError("not a supported simulation-spec document")
        calendar = doc.get("calendar")
        cal = (
            tuple(CalendarDay(int(c["index"]), bool(c["weekend"]), bool(c["holiday"]), bool(c["monthedge"])) for c in calendar)
            if calendar is not None
            else tuple(build_calendar())
        )
        return cls(
            int(doc["d"]),
            int(doc["tau"]),
            int(doc["n_occurrence_days"]),
            doc["beta_lambda"],
            tuple(doc["beta_p"]),
            tuple(Term(t["name"], tuple(t["factors"])) for t in doc.get("terms", [])),
            cal,
            doc.get("name", "custom"),
        )


def _round(x: float) -> float:
    return round(x, 10)


def _linear_coefficients(d: int = 11) -> tuple[dict, list[dict]]:
    beta_lambda = {
        "x1=2": 0.5,
        "x2": 0.01,
        "x3=2": 0.2,
        "x3=3": 0.4,
        "x4=1": 0.3,
        "x4=3": -0.3,
        "ps1_weekend": 0.75,
        "ps1_holiday": 0.4,
    }
    beta_p = []
    for j in range(1, d + 1):
        b = {
            INTERCEPT: _round(2.0 - 0.2 * (j - 1)),
            "x2": _round(0.001 * j),
            "x3=2": _round(-0.02 - 0.005 * (j - 1)),
            "x3=3": _round(-0.05 - 0.005 * (j - 1)),
            f"ps{j}_weekend": -0.2,
            f"ps{j}_holiday": -0.3,
            f"ps{j}_monthedge": 0.05,
        }
        if j <= 5:
            b["x4=1"] = -0.1
            b["x4=3"] = 0.2
        beta_p.append(b)
    return beta_lambda, beta_p


def linear_spec() -> SimulationSpec:
    """Coefficients with only linear effects."""
    beta_lambda, beta_p = _linear_coefficients()
    return SimulationSpec(11, 21, 21, beta_lambda, tuple(beta_p), (), tuple(build_calendar()), "linear")


def nonlinear_spec(high_age_term: str = "indicator") -> SimulationSpec:
    """Linear coefficients plus a log transform, thresholds and interactions.

    ``high_age_term="indicator"`` uses ``1(x2 > 80)`` with coefficient 0.5;
    ``"product"`` uses ``1(x2 > 80) * x2``, which pushes intensities to
    around ``exp(45)``.
    """
    beta_lambda, beta_p = _linear_coefficients()
    log_age = "log(x2+1)"
    beta_lambda[log_age] = beta_lambda.pop("x2")
    for b in beta_p:
        b[log_age] = b.pop("x2")
    if high_age_term == "indicator":
        high = Term("1(x2>80)", (("gt", "x2", 80),))
    elif high_age_term == "product":
        high = Term("1(x2>80)*x2", (("gt", "x2", 80), ("value", "x2")))
    else:
        raise ConfigError(f"unknown high_age_term {high_age_term!r}")
    terms = [
        Term(log_age, (("log1p", "x2"),)),
        high,
        Term("1(x2<40)*x1=1", (("lt", "x2", 40), ("value", "x1=1"))),
        Term("x3=1*x4=3", (("value", "x3=1"), ("value", "x4=3"))),
        Term("x3=3*x4=1", (("value", "x3=3"), ("value", "x4=1"))),
        Term("x1=1*x4=3", (("value", "x1=1"), ("value", "x4=3"))),
    ]
    beta_lambda.update({high.name: 0.5, "1(x2<40)*x1=1": -0.25, "x3=1*x4=3": -0.5, "x3=3*x4=1": 0.5, "x1=1*x4=3": -0.3})
    for j in range(1, 4):
        beta_p[j - 1]["x1=1*x4=3"] = 0.03
    for j in range(1, 6):
        name = f"ps{j}_weekend*ps{j}_holiday"
        terms.append(Term(name, (("value", f"ps{j}_weekend"), ("value", f"ps{j}_holiday"))))
        beta_p[j - 1][name] = 0.06
    return SimulationSpec(11, 21, 21, beta_lambda, tuple(beta_p), tuple(terms), tuple(build_calendar()), "nonlinear")


PRESETS = {"linear": linear_spec, "nonlinear": nonlinear_spec}


def get_spec(name: str) -> SimulationSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown simulation preset {name!r}; choose from {sorted(PRESETS)}") from None


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def simulate_entities(n: int, seed, n_occurrence_days: int = 21):
    """Entity covariate matrix (columns ``ENTITY_FEATURES``) and occurrence days."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = _rng(seed)
    x1 = rng.integers(1, 3, size=n)
    x2 = rng.integers(18, 91, size=n)
    x3 = rng.integers(1, 4, size=n)
    x4 = rng.integers(1, 4, size=n)
    occ = rng.integers(1, n_occurrence_days + 1, size=n)
    X = np.column_stack(
        [x1 == 1, x1 == 2, x2, x3 == 1, x3 == 2, x3 == 3, x4 == 1, x4 == 2, x4 == 3]
    ).astype(np.float64)
    return X, occ


def period_features(occ_period, spec: SimulationSpec) -> np.ndarray:
    """Flags of reporting days ``occ .. occ + d - 1``, flattened by delay."""
    table = np.array([c.flags() for c in spec.calendar])
    occ = np.asarray(occ_period, dtype=np.int64)
    days = occ[:, None] + np.arange(spec.d)[None, :] - 1
    return table[days].reshape(occ.shape[0], -1)


def true_parameters(x: FeatureVector, spec: SimulationSpec):
    """Intensity and reporting probabilities of a single covariate vector."""
    eta_lam, eta_p = spec.linear_predictors(x.values[None, :], x.names)
    return float(np.exp(eta_lam[0])), softmax(eta_p)[0]


def parameter_matrix(features, spec: SimulationSpec, feature_names=None) -> ParameterEstimates:
    eta_lam, eta_p = spec.linear_predictors(features, feature_names)
    return ParameterEstimates(np.exp(eta_lam), softmax(eta_p))


class SimulatedData(NamedTuple):
    complete_counts: np.ndarray
    dataset: Dataset
    truth: ParameterEstimates


def sample_counts(truth: ParameterEstimates, seed) -> np.ndarray:
    """Poisson totals split multinomially over delay classes."""
    rng = _rng(seed)
    totals = rng.poisson(truth.lam)
    return rng.multinomial(totals, truth.p)


def simulate_dataset(n: int, spec: SimulationSpec, seed, id_prefix: str = "r") -> SimulatedData:
    """Complete counts, the censored dataset and the true parameters, row-aligned."""
    rng = _rng(seed)
    X_ent, occ = simulate_entities(n, rng, spec.n_occurrence_days)
    X = np.hstack([X_ent, period_features(occ, spec)])
    truth = parameter_matrix(X, spec)
    counts = sample_counts(truth, rng)
    width = len(str(n - 1))
    ids = [f"{id_prefix}{i:0{width}d}" for i in range(n)]
    data = Dataset(ids, occ, counts, X, spec.feature_names, spec.d, spec.tau)
    return SimulatedData(counts, data, truth)


def replicate_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    """Independent stream for replicate ``index``."""
    return np.random.SeedSequence(base_seed, spawn_key=(index,))


def simulate_replicates(n: int, spec: SimulationSpec, base_seed: int, n_replicates: int):
    for r in range(n_replicates):
        yield simulate_dataset(n, spec, np.random.default_rng(replicate_seed(base_seed, r)))
