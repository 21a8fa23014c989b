"""Additive gradient boosting with Poisson and softmax second-order objectives.

Ensembles are immutable: each boosting call returns a new ensemble whose
round list extends the incoming one, so earlier trees are shared, never
modified. Predictions accumulate ``score += eta * tree(x)`` round by round,
which makes dropping the newest rounds restore earlier predictions exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import ContractError, DomainError
from .trees import DEFAULT_MIN_CHILD_WEIGHT, FeatureBins, RegressionTree, fit_regression_tree
from .validation import SCORE_CLAMP, check_counts, check_features, log_softmax, softmax

ENSEMBLE_FORMAT = "emnowcast.boosted-ensemble"
ENSEMBLE_VERSION = 1
REPORTING_PATHS = ("expanded", "weighted")


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------


def _finite(scores: np.ndarray, what: str) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DomainError(f"non-finite {what} scores")
    return scores


def occurrence_grad_hess(scores, completed_totals):
    """Gradient and Hessian of ``exp(f) - N f`` with respect to ``f``."""
    f = _finite(scores, "occurrence")
    N = np.asarray(completed_totals, dtype=np.float64)
    if f.shape != N.shape:
        raise ContractError("scores and totals differ in length")
    mu = np.exp(np.minimum(f, SCORE_CLAMP))
    return mu - N, mu


def reporting_grad_hess(score_matrix, labels, weights=None):
    """Per-class gradient and Hessian of the softmax cross-entropy.

    ``labels`` holds one-hot rows (or any non-negative rows summing to one).
    ``weights`` multiplies both outputs row-wise when given.
    """
    S = _finite(score_matrix, "reporting")
    Y = np.asarray(labels, dtype=np.float64)
    if S.shape != Y.shape:
        raise ContractError("score matrix and labels differ in shape")
    P = softmax(S)
    G = P - Y
    H = P * (1.0 - P)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)[:, None]
        G, H = G * w, H * w
    return G, H


# --------------------------------------------------------------------------
# expanded reporting rows
# --------------------------------------------------------------------------


class ExpandedRows(NamedTuple):
    """Per-event rows: source record, delay class (1-based) and weight."""

    record: np.ndarray
    label: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return self.record.shape[0]


def expand_reporting_dataset(completed) -> ExpandedRows:
    """Split every cell count ``N`` into ``floor(N)`` unit rows plus one fractional row."""
    counts = completed.counts if hasattr(completed, "counts") else completed
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2:
        raise ContractError("completed counts must be an n x d matrix")
    if not np.all(np.isfinite(counts)) or (counts < 0).any():
        raise ContractError("completed counts must be finite and non-negative")
    flat = counts.reshape(-1)
    whole = np.floor(flat)
    frac = flat - whole
    n_rows = whole.astype(np.int64) + (frac > 0)
    cell = np.repeat(np.arange(flat.shape[0]), n_rows)
    first = np.repeat(np.cumsum(n_rows) - n_rows, n_rows)
    pos = np.arange(cell.shape[0]) - first
    weight = np.where(pos < whole[cell], 1.0, frac[cell])
    d = counts.shape[1]
    return ExpandedRows(cell // d, cell % d + 1, weight)


def expanded_q_rep(p, rows: ExpandedRows) -> float:
    """Weighted log-likelihood of the expanded rows under record probabilities ``p``."""
    p = np.asarray(p, dtype=np.float64)
    probs = p[rows.record, rows.label - 1]
    if ((rows.weight > 0) & (probs <= 0)).any():
        raise DomainError("zero probability assigned to a reported event")
    return float(np.sum(rows.weight * np.log(probs)))


# --------------------------------------------------------------------------
# ensemble
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoostedEnsemble:
    """Base score plus ``eta``-scaled trees; every round holds one tree per output."""

    base_score: np.ndarray
    eta: float
    rounds: tuple[tuple[RegressionTree, ...], ...] = ()
    feature_names: tuple[str, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        base = np.atleast_1d(np.asarray(self.base_score, dtype=np.float64)).copy()
        base.setflags(write=False)
        object.__setattr__(self, "base_score", base)
        object.__setattr__(self, "rounds", tuple(tuple(r) for r in self.rounds))
        if not np.all(np.isfinite(base)):
            raise DomainError("base score must be finite")
        if self.eta < 0 or not np.isfinite(self.eta):
            raise ContractError("learning rate must be finite and non-negative")
        for r in self.rounds:
            if len(r) != self.n_outputs:
                raise ContractError("every round needs one tree per output")

    @property
    def n_outputs(self) -> int:
        return self.base_score.shape[0]

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def n_trees(self) -> int:
        return self.n_rounds * self.n_outputs

    def initial_scores(self, n: int) -> np.ndarray:
        return np.tile(self.base_score, (n, 1))

    def decision_function(self, X, n_rounds: int | None = None) -> np.ndarray:
        """Raw scores, shape ``(n, n_outputs)``."""
        X = check_features(X)
        scores = self.initial_scores(X.shape[0])
        for trees in self.rounds[: self.n_rounds if n_rounds is None else n_rounds]:
            for j, tree in enumerate(trees):
                scores[:, j] = scores[:, j] + self.eta * tree.predict(X)
        return scores

    def append(self, new_rounds: Sequence[Sequence[RegressionTree]]) -> BoostedEnsemble:
        return BoostedEnsemble(self.base_score, self.eta, self.rounds + tuple(map(tuple, new_rounds)), self.feature_names)

    def truncate(self, n_rounds: int) -> BoostedEnsemble:
        return BoostedEnsemble(self.base_score, self.eta, self.rounds[:n_rounds], self.feature_names)

    def to_dict(self) -> dict:
        return {
            "format": ENSEMBLE_FORMAT,
            "version": ENSEMBLE_VERSION,
            "base_score": [float(v) for v in self.base_score],
            "eta": float(self.eta),
            "feature_names": None if self.feature_names is None else list(self.feature_names),
            "rounds": [[tree.to_dict() for tree in trees] for trees in self.rounds],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> BoostedEnsemble:
        if doc.get("format") != ENSEMBLE_FORMAT:
            raise ContractError("not a boosted-ensemble document")
        if doc.get("version") != ENSEMBLE_VERSION:
            raise ContractError(f"unsupported ensemble version {doc.get('version')}")
        names = doc.get("feature_names")
        rounds = tuple(tuple(RegressionTree.from_dict(t, names) for t in trees) for trees in doc["rounds"])
        return cls(np.array(doc["base_score"], dtype=np.float64), float(doc["eta"]), rounds, None if names is None else tuple(names))

    def equals(self, other: BoostedEnsemble) -> bool:
        if self.n_rounds != other.n_rounds or self.eta != other.eta:
            return False
        if not np.array_equal(self.base_score, other.base_score):
            return False
        for a_round, b_round in zip(self.rounds, other.rounds):
            for a, b in zip(a_round, b_round):
                if a.to_dict() != b.to_dict():
                    return False
        return True


class BoostTrace(NamedTuple):
    """Per-round validation objective, index 0 being the incoming ensemble."""

    val_objective: list
    best_round: int
    stopped_early: bool


def _stop(history: list, best: int, patience: int) -> bool:
    return patience > 0 and len(history) - 1 - best >= patience


# --------------------------------------------------------------------------
# occurrence boosting
# --------------------------------------------------------------------------


def _q_occ_from_scores(scores: np.ndarray, totals: np.ndarray) -> float:
    f = np.clip(scores, -SCORE_CLAMP, SCORE_CLAMP)
    return float(np.sum(-np.exp(f) + totals * f))


def boost_occurrence(
    ensemble: BoostedEnsemble,
    X_train,
    totals_train,
    X_val,
    totals_val,
    n_rounds: int,
    depth: int,
    patience: int = 0,
    min_child_weight: float = DEFAULT_MIN_CHILD_WEIGHT,
    bins: FeatureBins | None = None,
    train_scores=None,
    val_scores=None,
):
    """Append up to ``n_rounds`` Poisson trees, stopping when validation ``q_occ`` stalls.

    ``patience = 0`` disables early stopping. ``train_scores``/``val_scores``
    may pass the incoming ensemble's scores to skip recomputing them.
    Returns ``(ensemble, trace)``.
    """
    if ensemble.n_outputs != 1:
        raise ContractError("occurrence ensembles have a single output")
    X_train = check_features(X_train)
    y_train = check_counts(totals_train, X_train.shape[0])
    X_val = check_features(X_val, X_train.shape[1])
    y_val = check_counts(totals_val, X_val.shape[0])
    if bins is None:
        bins = FeatureBins(X_train)

    f_train = ensemble.decision_function(X_train)[:, 0] if train_scores is None else np.array(train_scores, dtype=np.float64)
    f_val = ensemble.decision_function(X_val)[:, 0] if val_scores is None else np.array(val_scores, dtype=np.float64)
    history = [_q_occ_from_scores(f_val, y_val)]
    best = 0
    new_rounds = []
    stopped = False
    for _ in range(n_rounds):
        g, h = occurrence_grad_hess(f_train, y_train)
        tree, leaves = fit_regression_tree(
            None, g, h, depth, min_child_weight=min_child_weight, bins=bins,
            feature_names=ensemble.feature_names, return_leaves=True,
        )
        new_rounds.append((tree,))
        f_train = f_train + ensemble.eta * tree.value[leaves]
        f_val = f_val + ensemble.eta * tree.predict(X_val)
        history.append(_q_occ_from_scores(f_val, y_val))
        if history[-1] > history[best]:
            best = len(history) - 1
        if _stop(history, best, patience):
            stopped = True
            break
    return ensemble.append(new_rounds), BoostTrace(history, best, stopped)


# --------------------------------------------------------------------------
# reporting boosting
# --------------------------------------------------------------------------


def _q_rep_from_scores(scores: np.ndarray, counts: np.ndarray) -> float:
    return float(np.sum(counts * log_softmax(np.clip(scores, -SCORE_CLAMP, SCORE_CLAMP))))


def boost_reporting(
    ensemble: BoostedEnsemble,
    X_train,
    counts_train,
    X_val,
    counts_val,
    n_rounds: int,
    depth: int,
    patience: int = 0,
    min_child_weight: float = DEFAULT_MIN_CHILD_WEIGHT,
    path: str = "expanded",
    train_scores=None,
    val_scores=None,
):
    """Append up to ``n_rounds`` rounds of one softmax tree per delay class.

    ``path="expanded"`` grows trees on per-event rows with fractional
    weights; ``path="weighted"`` aggregates the same statistics per record
    (weights equal to the completed counts) and yields the same splits.
    Gradients are computed once per round from the scores at its start.
    """
    if path not in REPORTING_PATHS:
        raise ContractError(f"unknown reporting path {path!r}")
    X_train = check_features(X_train)
    N_train = check_counts(counts_train, X_train.shape[0], ndim=2)
    X_val = check_features(X_val, X_train.shape[1])
    N_val = check_counts(counts_val, X_val.shape[0], ndim=2)
    d = N_train.shape[1]
    if ensemble.n_outputs != d:
        raise ContractError(f"ensemble has {ensemble.n_outputs} outputs, data has {d} delay classes")

    if path == "expanded":
        rows = expand_reporting_dataset(N_train)
        fit_records = rows.record
        labels = np.zeros((len(rows), d))
        labels[np.arange(len(rows)), rows.label - 1] = 1.0
        row_weight = rows.weight
    else:
        fit_records = np.flatnonzero(N_train.sum(axis=1) > 0)
        totals = N_train[fit_records].sum(axis=1)
        labels = N_train[fit_records] / totals[:, None]
        row_weight = totals
    if fit_records.shape[0] == 0:
        raise ContractError("no reported events to fit")
    # distinct values come from the rows that carry weight so both paths share split candidates
    used = np.unique(fit_records)
    pos = np.searchsorted(used, fit_records)
    bins = FeatureBins(X_train[used]).take(pos)

    F_train = ensemble.decision_function(X_train) if train_scores is None else np.array(train_scores, dtype=np.float64)
    F_val = ensemble.decision_function(X_val) if val_scores is None else np.array(val_scores, dtype=np.float64)
    history = [_q_rep_from_scores(F_val, N_val)]
    best = 0
    new_rounds = []
    stopped = False
    for _ in range(n_rounds):
        G, H = reporting_grad_hess(F_train[fit_records], labels, row_weight)
        trees = []
        for j in range(d):
            tree = fit_regression_tree(
                None, G[:, j], H[:, j], depth, min_child_weight=min_child_weight,
                bins=bins, feature_names=ensemble.feature_names,
            )
            trees.append(tree)
            F_train[:, j] = F_train[:, j] + ensemble.eta * tree.predict(X_train)
            F_val[:, j] = F_val[:, j] + ensemble.eta * tree.predict(X_val)
        new_rounds.append(tuple(trees))
        history.append(_q_rep_from_scores(F_val, N_val))
        if history[-1] > history[best]:
            best = len(history) - 1
        if _stop(history, best, patience):
            stopped = True
            break
    return ensemble.append(new_rounds), BoostTrace(history, best, stopped)
