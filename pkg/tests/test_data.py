import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_dataset
from emnowcast.data import (
    CompletedDataset,
    Dataset,
    FeatureVector,
    ObservationRecord,
    ParameterEstimates,
    assign_splits,
    compute_tau,
    period_feature_names,
)
from emnowcast.exceptions import ConfigError, ContractError, InvalidRecordError, SchemaError


@pytest.mark.parametrize("occ, expected", [(21, 1), (1, 11), (15, 7)])
def test_compute_tau_examples(occ, expected):
    assert compute_tau(occ, 21, 11) == expected


def test_compute_tau_rejects_future_occurrence():
    with pytest.raises(InvalidRecordError):
        compute_tau(22, 21, 11)


def test_compute_tau_vectorised():
    assert compute_tau(np.array([21, 1, 15]), 21, 11).tolist() == [1, 11, 7]


@given(st.integers(1, 30), st.integers(1, 15), st.integers(0, 40))
def test_tau_matches_observed_prefix_length(d, occ, extra):
    tau = max(d, occ) + extra
    data = Dataset(["a"], [occ], np.ones((1, d), dtype=int), np.zeros((1, 0)), [], d, tau)
    assert data.record(0).tau_i == compute_tau(occ, tau, d) == data.tau_i[0]


def test_dataset_ignores_cells_beyond_horizon():
    data = Dataset(["a"], [5], [[1, 2, 3]], [[0.0]], ["x"], 3, 6)
    assert data.tau_i[0] == 2
    assert data.counts.tolist() == [[1, 2, 0]]


def test_dataset_rejects_bad_inputs():
    with pytest.raises(ContractError):
        Dataset(["a"], [1], [[1, 2]], [[0.0]], ["x"], 3, 5)
    with pytest.raises(InvalidRecordError):
        Dataset(["a"], [1], [[1, -2, 0]], [[0.0]], ["x"], 3, 5)
    with pytest.raises(InvalidRecordError):
        Dataset(["a"], [1], [[1.5, 0, 0]], [[0.0]], ["x"], 3, 5)
    with pytest.raises(SchemaError):
        Dataset(["a"], [1], [[1, 0, 0]], [[0.0, 1.0]], ["x", "x"], 3, 5)
    with pytest.raises(ConfigError):
        Dataset(["a"], [1], [[1, 0, 0]], [[0.0]], ["x"], 3, 2)


def test_arrays_are_read_only(rng):
    data = random_dataset(rng)
    with pytest.raises(ValueError):
        data.counts[0, 0] = 5


def test_from_records_round_trip(rng):
    data = random_dataset(rng)
    again = Dataset.from_records(list(data.records()), data.d, data.tau)
    assert again.equals(data)


def test_from_records_checks_horizon():
    fv = FeatureVector(("x",), [1.0])
    rec = ObservationRecord("a", 3, fv, [1, 1])
    with pytest.raises(InvalidRecordError):
        Dataset.from_records([rec], 4, 10)


def test_feature_vector_lookup():
    fv = FeatureVector(("a", "b"), [1.0, 2.5])
    assert fv["b"] == 2.5
    with pytest.raises(SchemaError):
        fv["c"]


def test_period_feature_names_order():
    assert period_feature_names(["w", "h"], 2) == ["ps1_w", "ps1_h", "ps2_w", "ps2_h"]


def _split_sizes(data):
    return tuple(int((data.split == s).sum()) for s in ("train", "val1", "val2"))


def test_split_sizes_n100():
    data = random_dataset(np.random.default_rng(0), n=100)
    assert _split_sizes(assign_splits(data, (0.64, 0.16, 0.20), seed=1)) == (64, 16, 20)


def test_split_sizes_n5():
    data = random_dataset(np.random.default_rng(0), n=5)
    sizes = _split_sizes(assign_splits(data, (0.64, 0.16, 0.20), seed=1))
    assert sum(sizes) == 5
    assert sizes in {(4, 1, 0), (3, 1, 1)}


def test_split_determinism():
    data = random_dataset(np.random.default_rng(0), n=50)
    a = assign_splits(data, seed=3).split
    b = assign_splits(data, seed=3).split
    assert np.array_equal(a, b)
    assert not np.array_equal(a, assign_splits(data, seed=4).split)


@given(st.integers(1, 200), st.integers(0, 2**31))
def test_split_sizes_within_one_of_target(n, seed):
    data = Dataset([str(i) for i in range(n)], np.ones(n, int), np.zeros((n, 1), int),
                   np.zeros((n, 0)), [], 1, 1)
    sizes = _split_sizes(assign_splits(data, seed=seed))
    assert sum(sizes) == n
    assert all(abs(s - f * n) < 1 for s, f in zip(sizes, (0.64, 0.16, 0.20)))


def test_split_keeps_test_records():
    data = random_dataset(np.random.default_rng(0), n=20)
    labels = ["test"] * 5 + ["train"] * 15
    out = assign_splits(data.with_split(labels), seed=0)
    assert list(out.split[:5]) == ["test"] * 5
    assert "test" not in set(out.split[5:])


def test_split_fraction_validation(rng):
    data = random_dataset(rng)
    with pytest.raises(ConfigError):
        assign_splits(data, (0.5, 0.5, 0.5))


def test_completed_dataset_preserves_observed_cells(rng):
    data = random_dataset(rng)
    filled = np.where(data.observed_mask, data.counts, 0.25)
    CompletedDataset(filled, data)
    tampered = filled.copy()
    i, j = np.argwhere(data.observed_mask)[0]
    tampered[i, j] += 1
    with pytest.raises(ContractError):
        CompletedDataset(tampered, data)


def test_parameter_estimates_validation():
    with pytest.raises(ContractError):
        ParameterEstimates([0.0], [[1.0]])
    with pytest.raises(ContractError):
        ParameterEstimates([1.0], [[0.5, 0.49]])
    est = ParameterEstimates([1.0, 2.0], [[0.5, 0.5], [0.25, 0.75]])
    assert est.d == 2 and len(est) == 2
