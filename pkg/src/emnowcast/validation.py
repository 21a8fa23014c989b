"""Input validation and small numerical helpers shared by the learners."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ContractError, DomainError

# bound on linear predictors before exponentiation
SCORE_CLAMP = 30.0


def softmax(scores) -> np.ndarray:
    """Row-wise softmax evaluated with the log-sum-exp shift."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    m = s.max(axis=1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=1, keepdims=True))


def check_features(X, n_features: int | None = None) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=0)
    if n_features is not None and X.shape[1] != n_features:
        raise ContractError(f"expected {n_features} feature columns, got {X.shape[1]}")
    return X


def check_counts(y, n: int | None = None, ndim: int = 1) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != ndim:
        raise ContractError(f"expected a {ndim}-d count array, got shape {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ContractError(f"expected {n} rows of counts, got {y.shape[0]}")
    if not np.all(np.isfinite(y)) or (y < 0).any():
        raise ContractError("counts must be finite and non-negative")
    return y


def check_finite_scores(scores, what: str = "scores") -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DomainError(f"non-finite {what}")
    return scores


def check_probability_rows(p, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ContractError("probability matrix must be 2-d")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max(initial=0.0) > tol:
        raise ContractError(f"probability rows must be non-negative and sum to 1 within {tol}")
    return p
