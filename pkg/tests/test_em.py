import json

import numpy as np
import pytest
from sklearn.base import clone

from conftest import random_dataset, random_estimates
from emnowcast.data import Dataset, ParameterEstimates, assign_splits
from emnowcast.em import (
    EMNowcaster,
    expectation_step,
    initialize_estimates,
    nowcast_from_estimates,
    run_em,
)
from emnowcast.exceptions import ConfigError, ContractError, DivergenceError
from emnowcast.learners import Learner
from emnowcast.simulation import linear_spec, simulate_dataset


def _dataset(counts, occ, d, tau):
    n = len(occ)
    return Dataset([str(i) for i in range(n)], occ, counts, np.zeros((n, 0)), [], d, tau)


# -- initialization and E-step ----------------------------------------------


def test_initialize_single_record():
    est = initialize_estimates(_dataset([[3, 1]], [1], 2, 2))
    assert est.lam.tolist() == [4.0]
    assert est.p.tolist() == [[0.75, 0.25]]


def test_initialize_pools_observed_cells_only():
    est = initialize_estimates(_dataset([[1, 1], [2, 0]], [1, 2], 2, 2))
    oracle = np.array([1 + 2, 1]) / 4
    assert np.array_equal(est.p, np.tile(oracle, (2, 1)))
    assert est.p[0].tolist() == [0.75, 0.25]


def test_initialize_floors_zero_totals():
    est = initialize_estimates(_dataset([[0, 0], [2, 1]], [1, 1], 2, 2))
    assert est.lam[0] == 1e-8


def test_estep_complete_record_unchanged():
    data = _dataset([[3, 1]], [1], 2, 2)
    completed = expectation_step(data, ParameterEstimates([7.0], [[0.5, 0.5]]))
    assert completed.counts.tolist() == [[3.0, 1.0]]


def test_estep_fills_last_cell():
    d = 10
    data = _dataset([[1] * d], [2], d, d)  # tau_i = d - 1
    completed = expectation_step(data, ParameterEstimates([10.0], np.full((1, d), 0.1)))
    assert completed.counts[0, -1] == pytest.approx(1.0, abs=1e-15)
    assert completed.counts[0, :-1].tolist() == [1.0] * (d - 1)


def test_estep_missing_mass_identity(rng):
    data = random_dataset(rng, n=40, d=6)
    est = random_estimates(rng, data.n, data.d)
    completed = expectation_step(data, est)
    missing = ~data.observed_mask
    lhs = np.where(missing, completed.counts, 0).sum(axis=1)
    rhs = est.lam * np.where(missing, est.p, 0).sum(axis=1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-13, atol=1e-15)
    assert np.array_equal(completed.counts[data.observed_mask], data.counts[data.observed_mask])


# -- nowcasts -----------------------------------------------------------------


def test_nowcast_complete_record_has_no_rows():
    data = _dataset([[1, 2, 3]], [1], 3, 5)
    cast = nowcast_from_estimates(ParameterEstimates([2.0], [[0.2, 0.3, 0.5]]), data)
    assert len(cast) == 0
    assert cast.totals.tolist() == [0.0]


def test_nowcast_single_missing_cell():
    d = 11
    data = _dataset([[0] * d], [2], d, d)
    cast = nowcast_from_estimates(ParameterEstimates([5.0], np.full((1, d), 1 / d)), data)
    assert len(cast) == 1
    assert cast.delay.tolist() == [11]
    assert cast.predicted[0] == pytest.approx(5 / 11, rel=1e-15)


def test_nowcast_totals_identity(rng):
    data = random_dataset(rng, n=30, d=5)
    est = random_estimates(rng, data.n, data.d)
    cast = nowcast_from_estimates(est, data)
    assert len(cast) == int((data.d - data.tau_i).sum())
    observed_share = np.where(data.observed_mask, est.p, 0).sum(axis=1)
    np.testing.assert_allclose(cast.totals, est.lam * (1 - observed_share), rtol=1e-12, atol=1e-12)


# -- EM loop ------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_linear():
    data = simulate_dataset(400, linear_spec(), 11).dataset
    return assign_splits(data, seed=11)


def test_single_iteration(small_linear):
    res = run_em(small_linear, {"kind": "glm"}, K=1)
    assert len(res.ll_trace) == 1 and res.best_iteration == 1


def test_glm_deterministic(small_linear):
    a = run_em(small_linear, {"kind": "glm"}, K=4, seed=3)
    b = run_em(small_linear, {"kind": "glm"}, K=4, seed=3)
    assert a.ll_trace == b.ll_trace and a.train_trace == b.train_trace


def test_glm_training_ll_non_decreasing(small_linear):
    res = run_em(small_linear, {"kind": "glm"}, K=12, em_patience=0)
    tr = np.array(res.train_trace)
    assert len(tr) == 12
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[:-1]))


def test_patience_equal_to_k_runs_all_iterations(small_linear):
    res = run_em(small_linear, {"kind": "glm"}, K=6, em_patience=6)
    assert res.n_iterations == 6 and not res.stopped_early


def test_needs_splits(small_linear):
    with pytest.raises(ContractError):
        run_em(small_linear.with_split(None), {"kind": "glm"}, K=1)
    with pytest.raises(ConfigError):
        run_em(small_linear, {"kind": "glm"}, K=0)


def test_trace_file(small_linear, tmp_path):
    path = tmp_path / "trace.jsonl"
    seen = []
    res = run_em(small_linear, {"kind": "glm"}, K=3, em_patience=0, trace_path=path, callback=seen.append)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert [e["iteration"] for e in lines] == [1, 2, 3]
    assert [e["val2_ll"] for e in lines] == res.ll_trace
    assert lines == seen


def test_test_records_are_ignored(small_linear):
    labels = np.array(small_linear.split, dtype=object)
    labels[:50] = "test"
    held = small_linear.with_split(labels)
    res = run_em(held, {"kind": "glm"}, K=2)
    assert res.fit_index.shape[0] == small_linear.n - 50
    assert len(res.estimates) == small_linear.n - 50


@pytest.mark.parametrize("cfg", [
    {"kind": "glm"},
    {"kind": "gbt", "rounds_first_occ": 3, "rounds_occ": 2, "rounds_first_rep": 3, "rounds_rep": 2,
     "reporting_path": "weighted"},
    {"kind": "mlp", "n_epoch": 3},
])
def test_estimates_valid_for_all_learners(small_linear, cfg):
    res = run_em(small_linear, cfg, K=3, em_patience=0)
    est = res.estimates
    assert np.all(est.lam > 0)
    np.testing.assert_allclose(est.p.sum(axis=1), 1.0, atol=1e-12)
    assert res.ll_trace[res.best_iteration - 1] >= res.ll_trace[0]


# -- early stopping with a scripted learner -------------------------------


class ScriptedLearner(Learner):
    """Constant scores from a schedule; larger offsets mean worse val2 fit."""

    kind = "scripted"
    defaults = {"offsets": []}

    def fit_occurrence(self, X_train, totals_train, X_val, totals_val, iteration):
        self.current = self.params["offsets"][iteration - 1]

    def fit_reporting(self, *args):
        pass

    def occurrence_scores(self, X):
        return np.full(X.shape[0], 5.0 + self.current)

    def reporting_scores(self, X):
        return np.zeros((X.shape[0], self.d))

    def snapshot(self):
        return self.current

    def restore(self, state):
        self.current = state

    def state_dict(self):
        return {}

    def load_state_dict(self, doc):
        pass


def _scripted(data, offsets):
    return ScriptedLearner(data.feature_names, data.d, {"offsets": offsets})


def test_early_stopping_counts_iterations_since_best(small_linear):
    offsets = [3, 2, 1, 2, 3, 4, 5, 6]
    res = run_em(small_linear, {}, K=8, em_patience=2, learner=_scripted(small_linear, offsets))
    assert res.best_iteration == 3
    assert res.n_iterations == 5 and res.stopped_early
    assert res.learner.current == 1


def test_zero_patience_disables_stopping(small_linear):
    offsets = [0, 1, 2, 3, 4]
    res = run_em(small_linear, {}, K=5, em_patience=0, learner=_scripted(small_linear, offsets))
    assert res.n_iterations == 5 and res.best_iteration == 1


def test_divergence_names_iteration_and_model(small_linear):
    offsets = [1.0, float("nan"), 1.0]
    with pytest.raises(DivergenceError, match="occurrence.*iteration 2"):
        run_em(small_linear, {}, K=3, learner=_scripted(small_linear, offsets))


# -- estimator wrapper --------------------------------------------------------


def test_estimator_params_and_clone():
    est = EMNowcaster(learner="glm", K=3, seed=4)
    assert est.get_params()["K"] == 3
    assert clone(est).get_params() == est.get_params()


def test_estimator_fit_predict(small_linear):
    est = EMNowcaster(learner="glm", K=3, em_patience=0, seed=2).fit(small_linear.with_split(None))
    pred = est.predict(small_linear)
    assert len(pred) == small_linear.n
    assert est.score(small_linear) < 0
    assert len(est.nowcast(small_linear)) == int((small_linear.d - small_linear.tau_i).sum())
    with pytest.raises(ContractError):
        EMNowcaster().predict(small_linear)
