"""EM loop for delayed-reporting counts with a pluggable M-step learner.

Each iteration completes the unobserved cells with their current expectation,
refits the occurrence and reporting models on the training split (with val1
available for learner-internal early stopping), and scores the observed
log-likelihood on val2. The loop stops after ``K`` iterations or once val2 has
not improved for ``em_patience`` iterations, and returns the best iteration.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from sklearn.base import BaseEstimator

from .data import (
    DEFAULT_SPLIT_FRACTIONS,
    CompletedDataset,
    Dataset,
    ParameterEstimates,
    assign_splits,
)
from .exceptions import ConfigError, ContractError, DataError, DivergenceError, SchemaError
from .learners import Learner, make_learner
from .likelihood import observed_ll
from .validation import SCORE_CLAMP, softmax

LAMBDA_FLOOR = 1e-8
FIT_SPLITS = ("train", "val1", "val2")


# --------------------------------------------------------------------------
# initialization and E-step
# --------------------------------------------------------------------------


def initialize_estimates(data: Dataset) -> ParameterEstimates:
    """Observed totals as intensities and pooled observed delay shares as probabilities."""
    if data.n == 0:
        raise DataError("cannot initialize from an empty dataset")
    column_totals = data.counts.sum(axis=0).astype(np.float64)
    total = column_totals.sum()
    if total <= 0:
        raise DataError("cannot initialize: no observed events")
    p0 = column_totals / total
    lam0 = np.maximum(data.observed_total.astype(np.float64), LAMBDA_FLOOR)
    return ParameterEstimates(lam0, np.tile(p0, (data.n, 1)))


def expectation_step(data: Dataset, est: ParameterEstimates) -> CompletedDataset:
    """Observed cells kept, unobserved cells replaced by ``lam * p``."""
    if len(est) != data.n or est.d != data.d:
        raise ContractError("estimates do not cover the dataset")
    expected = est.lam[:, None] * est.p
    return CompletedDataset(np.where(data.observed_mask, data.counts, expected), data)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    """Fitted learner restored to its best iteration plus the iteration traces."""

    learner: Learner
    estimates: ParameterEstimates
    ll_trace: list
    train_trace: list
    best_iteration: int
    config_echo: dict = field(default_factory=dict)
    stopped_early: bool = False
    fit_index: np.ndarray | None = None

    @property
    def n_iterations(self) -> int:
        return len(self.ll_trace)

    def predict_estimates(self, data: Dataset) -> ParameterEstimates:
        return predict_estimates(self.learner, data)


def predict_estimates(learner: Learner, data: Dataset) -> ParameterEstimates:
    if tuple(data.feature_names) != learner.feature_names:
        raise SchemaError("dataset features differ from those the model was fitted on")
    if data.d != learner.d:
        raise SchemaError(f"dataset has d={data.d}, model has d={learner.d}")
    return _estimates(learner, data.features)


def _estimates(learner: Learner, X: np.ndarray, iteration: int | None = None) -> ParameterEstimates:
    occ = learner.occurrence_scores(X)
    rep = learner.reporting_scores(X)
    where = "" if iteration is None else f" at EM iteration {iteration}"
    if not np.all(np.isfinite(occ)):
        raise DivergenceError(f"{learner.kind} occurrence model produced non-finite scores{where}")
    if not np.all(np.isfinite(rep)):
        raise DivergenceError(f"{learner.kind} reporting model produced non-finite scores{where}")
    lam = np.exp(np.clip(occ, -SCORE_CLAMP, SCORE_CLAMP))
    p = softmax(np.clip(rep, -SCORE_CLAMP, SCORE_CLAMP))
    return ParameterEstimates(lam, p)


# --------------------------------------------------------------------------
# EM loop
# --------------------------------------------------------------------------


def _learner_seed(seed) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def run_em(
    data: Dataset,
    learner_cfg: Mapping[str, Any],
    K: int = 100,
    em_patience: int = 10,
    seed: int = 0,
    trace_path: str | Path | None = None,
    callback: Callable[[dict], None] | None = None,
    learner: Learner | None = None,
) -> FitResult:
    """Run EM on the train/val1/val2 records of ``data`` (test records are ignored).

    ``em_patience <= 0`` disables early stopping. Each iteration's trace entry
    (iteration, train and val2 observed log-likelihood, learner counters) goes
    to ``trace_path`` as one JSON line and to ``callback``.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    if data.split is None:
        raise ContractError("run_em needs split labels; call assign_splits first")
    fit_index = np.flatnonzero(np.isin(data.split, FIT_SPLITS))
    fit_data = data.subset(fit_index)
    parts = {label: fit_data.split_index(label) for label in FIT_SPLITS}
    for label, idx in parts.items():
        if idx.shape[0] == 0:
            raise DataError(f"split {label!r} is empty")
    X = {label: np.ascontiguousarray(fit_data.features[idx]) for label, idx in parts.items()}
    subsets = {label: fit_data.subset(idx) for label, idx in parts.items()}

    if learner is None:
        learner = make_learner(learner_cfg, data.feature_names, data.d, seed=_learner_seed(seed))
    est = initialize_estimates(fit_data)
    completed = expectation_step(fit_data, est)
    learner.prepare(float(completed.totals[parts["train"]].mean()), est.p[0])

    trace_file = open(trace_path, "w", encoding="utf-8", newline="\n") if trace_path else None
    ll_trace, train_trace = [], []
    best_iteration, best_state, best_ll = 0, None, -np.inf
    stopped = False
    try:
        for k in range(1, K + 1):
            started = time.perf_counter()
            totals = completed.totals
            tr, v1 = parts["train"], parts["val1"]
            learner.fit_occurrence(X["train"], totals[tr], X["val1"], totals[v1], k)
            learner.fit_reporting(X["train"], completed.counts[tr], X["val1"], completed.counts[v1], k)

            pieces = {label: _estimates(learner, X[label], k) for label in FIT_SPLITS}
            train_ll = observed_ll(pieces["train"], subsets["train"]).value
            val2_ll = observed_ll(pieces["val2"], subsets["val2"]).value
            ll_trace.append(val2_ll)
            train_trace.append(train_ll)
            if val2_ll > best_ll:
                best_iteration, best_state, best_ll = k, learner.snapshot(), val2_ll

            entry = {"iteration": k, "train_ll": train_ll, "val2_ll": val2_ll,
                     "seconds": round(time.perf_counter() - started, 6), **learner.counters()}
            if trace_file:
                trace_file.write(json.dumps(entry) + "\n")
                trace_file.flush()
            if callback:
                callback(entry)

            if em_patience > 0 and k - best_iteration >= em_patience:
                stopped = k < K
                break
            lam = np.empty(fit_data.n)
            p = np.empty((fit_data.n, fit_data.d))
            for label, idx in parts.items():
                lam[idx], p[idx] = pieces[label].lam, pieces[label].p
            completed = expectation_step(fit_data, ParameterEstimates(lam, p))
    finally:
        if trace_file:
            trace_file.close()

    learner.restore(best_state)
    estimates = _estimates(learner, fit_data.features)
    echo = {"learner": dict(learner_cfg), "K": K, "em_patience": em_patience, "seed": seed}
    return FitResult(learner, estimates, ll_trace, train_trace, best_iteration, echo, stopped, fit_index)


# --------------------------------------------------------------------------
# nowcasts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Nowcast:
    """Expected counts of unreported cells, plus per-record totals."""

    record: np.ndarray
    delay: np.ndarray
    predicted: np.ndarray
    totals: np.ndarray
    entity_ids: tuple

    def __len__(self):
        return self.record.shape[0]


def nowcast_from_estimates(est: ParameterEstimates, data: Dataset) -> Nowcast:
    if len(est) != data.n or est.d != data.d:
        raise ContractError("estimates do not cover the dataset")
    missing = ~data.observed_mask
    rec, col = np.nonzero(missing)
    expected = est.lam[:, None] * est.p
    totals = np.where(missing, expected, 0.0).sum(axis=1)
    return Nowcast(rec, col + 1, expected[rec, col], totals, data.entity_ids)


def nowcast(result: FitResult | Learner, data: Dataset) -> Nowcast:
    """Predicted counts ``lam * p_j`` for every unobserved cell ``j > tau_i``."""
    learner = result.learner if isinstance(result, FitResult) else result
    return nowcast_from_estimates(predict_estimates(learner, data), data)


# --------------------------------------------------------------------------
# estimator wrapper
# --------------------------------------------------------------------------


class EMNowcaster(BaseEstimator):
    """Estimator-style wrapper around :func:`run_em`.

    Parameters
    ----------
    learner : {"glm", "gbt", "mlp"}
    learner_params : dict, optional
        Hyperparameters of the chosen learner; defaults fill the rest.
    K : int
        Maximum number of EM iterations.
    em_patience : int
        Iterations without val2 improvement before stopping.
    split_fractions : tuple
        Train/val1/val2 proportions, used only when the dataset has no split.
    seed : int
        Controls the split assignment and every learner random draw.
    """

    def __init__(self, learner="glm", learner_params=None, K=100, em_patience=10,
                 split_fractions=DEFAULT_SPLIT_FRACTIONS, seed=0):
        self.learner = learner
        self.learner_params = learner_params
        self.K = K
        self.em_patience = em_patience
        self.split_fractions = split_fractions
        self.seed = seed

    def fit(self, data: Dataset, y=None, trace_path=None):
        if not isinstance(data, Dataset):
            raise ContractError("EMNowcaster.fit expects a Dataset")
        if data.split is None:
            data = assign_splits(data, self.split_fractions, self.seed)
        cfg = {"kind": self.learner, **(self.learner_params or {})}
        self.result_ = run_em(data, cfg, self.K, self.em_patience, self.seed, trace_path=trace_path)
        self.learner_ = self.result_.learner
        self.best_iteration_ = self.result_.best_iteration
        self.ll_trace_ = self.result_.ll_trace
        return self

    def _check_fitted(self):
        if not hasattr(self, "learner_"):
            raise ContractError("EMNowcaster is not fitted yet")

    def predict(self, data: Dataset) -> ParameterEstimates:
        self._check_fitted()
        return predict_estimates(self.learner_, data)

    def nowcast(self, data: Dataset) -> Nowcast:
        self._check_fitted()
        return nowcast(self.learner_, data)

    def score(self, data: Dataset, y=None) -> float:
        """Observed log-likelihood of ``data`` under the fitted model."""
        return observed_ll(self.predict(data), data).value
