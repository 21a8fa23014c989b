"""M-step learners behind a common interface.

Every learner exposes occurrence scores ``f_occ(x)`` (log intensity) and
reporting scores ``f_rep(x)`` (softmax logits over delay classes), is refitted
once per EM iteration, and can snapshot/restore its state so the EM engine
can go back to its best iteration.
"""

from __future__ import annotations

import abc
import warnings
from typing import Any, Mapping, Sequence

import numpy as np

from .boosting import REPORTING_PATHS, BoostedEnsemble, boost_occurrence, boost_reporting
from .data import occurrence_feature_names
from .exceptions import ConfigError, ContractError, SchemaError
from .glm import AliasedColumnsWarning, DesignBuilder, fit_multinomial_glm, fit_poisson_glm
from .mlp import NetworkWeights, Standardizer, forward, train_network, transfer_weights
from .trees import DEFAULT_MIN_CHILD_WEIGHT, FeatureBins

LEARNER_KINDS = ("glm", "gbt", "mlp")
_P0_FLOOR = 1e-8


def _positions(all_names: Sequence[str], subset: Sequence[str]) -> np.ndarray:
    pos = {nm: k for k, nm in enumerate(all_names)}
    return np.array([pos[nm] for nm in subset], dtype=np.intp)


class Learner(abc.ABC):
    """Occurrence and reporting models fitted on completed counts."""

    kind: str = ""
    defaults: dict[str, Any] = {}

    def __init__(self, feature_names: Sequence[str], d: int, params: Mapping[str, Any] | None = None, seed=0):
        self.feature_names = tuple(feature_names)
        self.d = int(d)
        self.params = self.resolve_params(params or {})
        self.seed = seed
        self.occ_names = occurrence_feature_names(self.feature_names)
        self._occ_index = _positions(self.feature_names, self.occ_names)

    @classmethod
    def resolve_params(cls, params: Mapping[str, Any]) -> dict[str, Any]:
        unknown = set(params) - set(cls.defaults)
        if unknown:
            raise ConfigError(f"unknown {cls.kind} hyperparameters {sorted(unknown)}")
        merged = dict(cls.defaults)
        merged.update(params)
        return merged

    def check_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise SchemaError(f"expected {len(self.feature_names)} feature columns")
        return X

    def occurrence_features(self, X) -> np.ndarray:
        return X[:, self._occ_index]

    def prepare(self, mean_total: float, p0: np.ndarray) -> None:
        """Starting values taken from the EM initializer; called before iteration 1."""
        self.mean_total = float(mean_total)
        self.p0 = np.asarray(p0, dtype=np.float64)

    @abc.abstractmethod
    def fit_occurrence(self, X_train, totals_train, X_val, totals_val, iteration: int) -> None: ...

    @abc.abstractmethod
    def fit_reporting(self, X_train, counts_train, X_val, counts_val, iteration: int) -> None: ...

    @abc.abstractmethod
    def occurrence_scores(self, X) -> np.ndarray: ...

    @abc.abstractmethod
    def reporting_scores(self, X) -> np.ndarray: ...

    @abc.abstractmethod
    def snapshot(self) -> Any: ...

    @abc.abstractmethod
    def restore(self, state: Any) -> None: ...

    def counters(self) -> dict[str, Any]:
        return {}

    @abc.abstractmethod
    def state_dict(self) -> dict: ...

    @abc.abstractmethod
    def load_state_dict(self, doc: dict) -> None: ...


# --------------------------------------------------------------------------
# GLM
# --------------------------------------------------------------------------


class GLMLearner(Learner):
    """Poisson and reference-coded multinomial GLMs, warm-started each iteration."""

    kind = "glm"
    defaults = {"max_newton": 100}

    def __init__(self, feature_names, d, params=None, seed=0):
        super().__init__(feature_names, d, params, seed)
        self.occ_design = DesignBuilder(self.feature_names, "occurrence")
        self.rep_design = DesignBuilder(self.feature_names, "reporting")
        self.occ_coef = None
        self.rep_coef = None
        self.occ_fit = None
        self.rep_fit = None
        self._newton_steps = {}

    def fit_occurrence(self, X_train, totals_train, X_val, totals_val, iteration):
        D = self.occ_design.transform(self.check_features(X_train))
        with warnings.catch_warnings():
            if iteration > 1:
                warnings.simplefilter("ignore", AliasedColumnsWarning)
            fit = fit_poisson_glm(D, totals_train, init=self.occ_coef, names=self.occ_design.names,
                                  max_iter=self.params["max_newton"])
        self.occ_fit, self.occ_coef = fit, fit.coef
        self._newton_steps["newton_occ"] = fit.n_iter

    def fit_reporting(self, X_train, counts_train, X_val, counts_val, iteration):
        D = self.rep_design.transform(self.check_features(X_train))
        with warnings.catch_warnings():
            if iteration > 1:
                warnings.simplefilter("ignore", AliasedColumnsWarning)
            fit = fit_multinomial_glm(D, counts_train, init=self.rep_coef, names=self.rep_design.names,
                                      max_iter=self.params["max_newton"])
        self.rep_fit, self.rep_coef = fit, fit.coef
        self._newton_steps["newton_rep"] = fit.n_iter

    def occurrence_scores(self, X):
        return self.occ_design.transform(self.check_features(X)) @ self.occ_coef

    def reporting_scores(self, X):
        return self.rep_design.transform(self.check_features(X)) @ self.rep_coef.T

    def snapshot(self):
        return (self.occ_coef, self.rep_coef, self.occ_fit, self.rep_fit)

    def restore(self, state):
        self.occ_coef, self.rep_coef, self.occ_fit, self.rep_fit = state

    def counters(self):
        return dict(self._newton_steps)

    def state_dict(self):
        return {
            "occurrence": {"columns": self.occ_design.names, "coef": self.occ_coef.tolist()},
            "reporting": {"columns": self.rep_design.names, "coef": self.rep_coef.tolist()},
        }

    def load_state_dict(self, doc):
        if doc["occurrence"]["columns"] != self.occ_design.names or doc["reporting"]["columns"] != self.rep_design.names:
            raise SchemaError("stored GLM columns do not match the feature schema")
        self.occ_coef = np.array(doc["occurrence"]["coef"], dtype=np.float64)
        self.rep_coef = np.array(doc["reporting"]["coef"], dtype=np.float64)


# --------------------------------------------------------------------------
# gradient-boosted trees
# --------------------------------------------------------------------------


class _ScoreCache:
    """Scores of fixed feature matrices, extended incrementally as rounds are appended."""

    def __init__(self):
        self._entries = {}

    def scores(self, ensemble: BoostedEnsemble, X: np.ndarray) -> np.ndarray:
        entry = self._entries.get(id(X))
        done = 0
        if entry is not None and entry[0] is X and np.array_equal(entry[3], ensemble.base_score):
            cached_rounds = entry[1]
            if len(cached_rounds) <= ensemble.n_rounds and all(
                a is b for a, b in zip(cached_rounds, ensemble.rounds)
            ):
                done = len(cached_rounds)
        scores = entry[2].copy() if done else ensemble.initial_scores(X.shape[0])
        for trees in ensemble.rounds[done:]:
            for j, tree in enumerate(trees):
                scores[:, j] = scores[:, j] + ensemble.eta * tree.predict(X)
        self._entries[id(X)] = (X, ensemble.rounds, scores, ensemble.base_score)
        return scores.copy()

    def clear(self):
        self._entries.clear()


class GBTLearner(Learner):
    """Additive boosted trees: each EM iteration appends rounds to the previous ensembles."""

    kind = "gbt"
    defaults = {
        "eta_occ": 0.1,
        "rounds_first_occ": 20,
        "rounds_occ": 10,
        "tree_depth_occ": 3,
        "patience_occ": 15,
        "eta_rep": 0.01,
        "rounds_first_rep": 20,
        "rounds_rep": 20,
        "tree_depth_rep": 3,
        "patience_rep": 30,
        "min_child_weight": DEFAULT_MIN_CHILD_WEIGHT,
        "reporting_path": "expanded",
    }

    def __init__(self, feature_names, d, params=None, seed=0):
        super().__init__(feature_names, d, params, seed)
        if self.params["reporting_path"] not in REPORTING_PATHS:
            raise ConfigError(f"reporting_path must be one of {REPORTING_PATHS}")
        self.occ_ensemble: BoostedEnsemble | None = None
        self.rep_ensemble: BoostedEnsemble | None = None
        self._cache = _ScoreCache()
        self._occ_views = {}
        self._bins = None
        self._last = {}

    def _occ_view(self, X):
        """Occurrence columns of ``X``, memoised so the score cache sees a stable array."""
        entry = self._occ_views.get(id(X))
        if entry is None or entry[0] is not X:
            entry = (X, np.ascontiguousarray(self.occurrence_features(X)))
            self._occ_views[id(X)] = entry
        return entry[1]

    def prepare(self, mean_total, p0):
        super().prepare(mean_total, p0)
        base_occ = np.log(max(self.mean_total, _P0_FLOOR))
        base_rep = np.log(np.maximum(self.p0, _P0_FLOOR))
        self.occ_ensemble = BoostedEnsemble(np.array([base_occ]), self.params["eta_occ"], (), tuple(self.occ_names))
        self.rep_ensemble = BoostedEnsemble(base_rep, self.params["eta_rep"], (), self.feature_names)
        self._cache.clear()

    def fit_occurrence(self, X_train, totals_train, X_val, totals_val, iteration):
        Xt = self._occ_view(self.check_features(X_train))
        Xv = self._occ_view(self.check_features(X_val))
        if self._bins is None or self._bins[0] is not Xt:
            self._bins = (Xt, FeatureBins(Xt))
        rounds = self.params["rounds_first_occ"] if iteration == 1 else self.params["rounds_occ"]
        before = self.occ_ensemble.n_rounds
        self.occ_ensemble, trace = boost_occurrence(
            self.occ_ensemble, Xt, totals_train, Xv, totals_val, rounds,
            self.params["tree_depth_occ"], self.params["patience_occ"],
            self.params["min_child_weight"], bins=self._bins[1],
            train_scores=self._cache.scores(self.occ_ensemble, Xt)[:, 0],
            val_scores=self._cache.scores(self.occ_ensemble, Xv)[:, 0],
        )
        self._last["trees_occ"] = self.occ_ensemble.n_rounds - before

    def fit_reporting(self, X_train, counts_train, X_val, counts_val, iteration):
        X_train = self.check_features(X_train)
        X_val = self.check_features(X_val)
        rounds = self.params["rounds_first_rep"] if iteration == 1 else self.params["rounds_rep"]
        before = self.rep_ensemble.n_rounds
        self.rep_ensemble, trace = boost_reporting(
            self.rep_ensemble, X_train, counts_train, X_val, counts_val, rounds,
            self.params["tree_depth_rep"], self.params["patience_rep"],
            self.params["min_child_weight"], path=self.params["reporting_path"],
            train_scores=self._cache.scores(self.rep_ensemble, X_train),
            val_scores=self._cache.scores(self.rep_ensemble, X_val),
        )
        self._last["rounds_rep"] = self.rep_ensemble.n_rounds - before

    def occurrence_scores(self, X):
        X = self.check_features(X)
        return self._cache.scores(self.occ_ensemble, self._occ_view(X))[:, 0]

    def reporting_scores(self, X):
        return self._cache.scores(self.rep_ensemble, self.check_features(X))

    def snapshot(self):
        return (self.occ_ensemble, self.rep_ensemble)

    def restore(self, state):
        self.occ_ensemble, self.rep_ensemble = state

    def counters(self):
        out = dict(self._last)
        out["total_trees_occ"] = self.occ_ensemble.n_trees
        out["total_trees_rep"] = self.rep_ensemble.n_trees
        return out

    def state_dict(self):
        return {"occurrence": self.occ_ensemble.to_dict(), "reporting": self.rep_ensemble.to_dict()}

    def load_state_dict(self, doc):
        occ = BoostedEnsemble.from_dict(doc["occurrence"])
        rep = BoostedEnsemble.from_dict(doc["reporting"])
        if occ.feature_names != tuple(self.occ_names) or rep.feature_names != self.feature_names:
            raise SchemaError("stored ensembles were fitted on a different feature schema")
        self.occ_ensemble, self.rep_ensemble = occ, rep
        self._cache.clear()


# --------------------------------------------------------------------------
# feed-forward networks
# --------------------------------------------------------------------------


class MLPLearner(Learner):
    """Two-hidden-layer networks whose weights carry over between EM iterations."""

    kind = "mlp"
    defaults = {
        "hidden_occ": [10, 10],
        "hidden_rep": [5, 15],
        "learning_rate_occ": 5e-5,
        "learning_rate_rep": 1e-4,
        "batch_size_occ": 32,
        "batch_size_rep": 32,
        "patience_occ": 10,
        "patience_rep": 10,
        "n_epoch": 50,
        "activation": "tanh",
    }

    def __init__(self, feature_names, d, params=None, seed=0):
        super().__init__(feature_names, d, params, seed)
        for key in ("hidden_occ", "hidden_rep"):
            h = list(self.params[key])
            if len(h) != 2 or min(h) < 1:
                raise ConfigError(f"{key} must list two positive layer widths")
            self.params[key] = [int(v) for v in h]
        self.occ_net: NetworkWeights | None = None
        self.rep_net: NetworkWeights | None = None
        self.occ_scaler: Standardizer | None = None
        self.rep_scaler: Standardizer | None = None
        self._seeds = np.random.SeedSequence(seed if isinstance(seed, int) else None)
        self._last = {}

    def _seed(self, head: str, iteration: int, purpose: int):
        base = self._seeds.entropy
        return np.random.SeedSequence(base, spawn_key=(0 if head == "occurrence" else 1, iteration, purpose))

    def fit_occurrence(self, X_train, totals_train, X_val, totals_val, iteration):
        Xt = self.occurrence_features(self.check_features(X_train))
        Xv = self.occurrence_features(self.check_features(X_val))
        if self.occ_scaler is None:
            self.occ_scaler = Standardizer.fit(Xt)
        sizes = (Xt.shape[1], *self.params["hidden_occ"], 1)
        init = transfer_weights(
            self.occ_net, sizes, np.log(max(self.mean_total, _P0_FLOOR)),
            self._seed("occurrence", iteration, 0), self.params["activation"],
        )
        self.occ_net, trace = train_network(
            init, self.occ_scaler.transform(Xt), totals_train, self.occ_scaler.transform(Xv), totals_val,
            "occurrence", self.params["n_epoch"], self.params["batch_size_occ"],
            self.params["learning_rate_occ"], self.params["patience_occ"], self._seed("occurrence", iteration, 1),
        )
        self._last["epochs_occ"] = trace.epochs_run
        self._last["best_epoch_occ"] = trace.best_epoch

    def fit_reporting(self, X_train, counts_train, X_val, counts_val, iteration):
        Xt = self.check_features(X_train)
        Xv = self.check_features(X_val)
        if self.rep_scaler is None:
            self.rep_scaler = Standardizer.fit(Xt)
        sizes = (Xt.shape[1], *self.params["hidden_rep"], self.d)
        init = transfer_weights(
            self.rep_net, sizes, np.log(np.maximum(self.p0, _P0_FLOOR)),
            self._seed("reporting", iteration, 0), self.params["activation"],
        )
        self.rep_net, trace = train_network(
            init, self.rep_scaler.transform(Xt), counts_train, self.rep_scaler.transform(Xv), counts_val,
            "reporting", self.params["n_epoch"], self.params["batch_size_rep"],
            self.params["learning_rate_rep"], self.params["patience_rep"], self._seed("reporting", iteration, 1),
        )
        self._last["epochs_rep"] = trace.epochs_run
        self._last["best_epoch_rep"] = trace.best_epoch

    def occurrence_scores(self, X):
        Xo = self.occurrence_features(self.check_features(X))
        return forward(self.occ_net, self.occ_scaler.transform(Xo))[:, 0]

    def reporting_scores(self, X):
        return forward(self.rep_net, self.rep_scaler.transform(self.check_features(X)))

    def snapshot(self):
        return (self.occ_net, self.rep_net)

    def restore(self, state):
        self.occ_net, self.rep_net = state

    def counters(self):
        return dict(self._last)

    def state_dict(self):
        return {
            "occurrence": {"scaler": self.occ_scaler.to_dict(), "weights": self.occ_net.to_dict()},
            "reporting": {"scaler": self.rep_scaler.to_dict(), "weights": self.rep_net.to_dict()},
        }

    def load_state_dict(self, doc):
        self.occ_scaler = Standardizer.from_dict(doc["occurrence"]["scaler"])
        self.rep_scaler = Standardizer.from_dict(doc["reporting"]["scaler"])
        self.occ_net = NetworkWeights.from_dict(doc["occurrence"]["weights"])
        self.rep_net = NetworkWeights.from_dict(doc["reporting"]["weights"])
        if self.occ_net.n_inputs != len(self.occ_names) or self.rep_net.n_inputs != len(self.feature_names):
            raise SchemaError("stored networks were fitted on a different feature schema")


_REGISTRY = {"glm": GLMLearner, "gbt": GBTLearner, "mlp": MLPLearner}


def make_learner(config: Mapping[str, Any], feature_names, d, seed=0) -> Learner:
    """Build a learner from ``{"kind": ..., **hyperparameters}``."""
    config = dict(config)
    kind = config.pop("kind", None)
    if kind not in _REGISTRY:
        raise ConfigError(f"learner kind must be one of {LEARNER_KINDS}, got {kind!r}")
    return _REGISTRY[kind](feature_names, d, config, seed)


def learner_defaults(kind: str) -> dict:
    if kind not in _REGISTRY:
        raise ConfigError(f"learner kind must be one of {LEARNER_KINDS}, got {kind!r}")
    return dict(_REGISTRY[kind].defaults)
