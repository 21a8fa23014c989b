"""Exact GLM fits for the M-step: Poisson log-link and reference-coded softmax.

Both fits are damped Newton iterations on the full likelihood; responses may
be fractional (E-step output). Aliased design columns are pruned before the
first Newton step and reported with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from sklearn.base import BaseEstimator

from .data import FeatureVector, categorical_groups, occurrence_feature_names, period_delay
from .exceptions import ConvergenceError, SchemaError
from .validation import SCORE_CLAMP, check_counts, check_features, log_softmax, softmax

INTERCEPT = "(intercept)"
SCORE_TOL = 1e-8
REL_LL_TOL = 1e-10
MAX_NEWTON = 100


class AliasedColumnsWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# design matrices
# --------------------------------------------------------------------------


def design_columns(feature_names: Sequence[str], target: str) -> list[str]:
    """Covariate columns entering the GLM for ``target``.

    The first indicator of every categorical group is dropped (reference
    level). Occurrence designs keep only the occurrence-day period block.
    """
    if target == "occurrence":
        names = occurrence_feature_names(feature_names)
    elif target == "reporting":
        names = list(feature_names)
    else:
        raise ValueError(f"unknown target {target!r}")
    dropped = {group[0] for group in categorical_groups(names).values()}
    entity = [nm for nm in names if period_delay(nm) is None and nm not in dropped]
    period = [nm for nm in names if period_delay(nm) is not None and nm not in dropped]
    return entity + period


class DesignBuilder:
    """Maps full feature matrices onto GLM design matrices with an intercept."""

    def __init__(self, feature_names: Sequence[str], target: str):
        self.feature_names = tuple(feature_names)
        self.target = target
        self.columns = design_columns(self.feature_names, target)
        pos = {nm: k for k, nm in enumerate(self.feature_names)}
        self._index = np.array([pos[nm] for nm in self.columns], dtype=np.intp)

    @property
    def names(self) -> list[str]:
        return [INTERCEPT] + self.columns

    def transform(self, X) -> np.ndarray:
        X = check_features(X, len(self.feature_names))
        return np.hstack([np.ones((X.shape[0], 1)), X[:, self._index]])


def build_design(record_covariates: FeatureVector, target: str) -> np.ndarray:
    """Design row of a single record."""
    builder = DesignBuilder(record_covariates.names, target)
    return builder.transform(record_covariates.values[None, :])[0]


def independent_columns(X: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Indices of columns not spanned by the columns before them."""
    if X.shape[1] == 0:
        return np.zeros(0, dtype=np.intp)
    r = np.linalg.qr(X, mode="r")
    diag = np.abs(np.diag(r))
    norms = np.linalg.norm(X, axis=0)
    keep = diag > rtol * np.maximum(norms, 1.0)
    return np.flatnonzero(keep)


def _prune(X: np.ndarray, names: Sequence[str] | None):
    kept = independent_columns(X)
    if kept.shape[0] < X.shape[1]:
        dropped = sorted(set(range(X.shape[1])) - set(kept.tolist()))
        label = [names[k] for k in dropped] if names is not None else dropped
        warnings.warn(f"pruned aliased design columns {label}", AliasedColumnsWarning, stacklevel=3)
    return kept


def _solve_spd(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(H, check_finite=False), g, check_finite=False)
    except LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


def _converged(score: np.ndarray) -> bool:
    return float(np.max(np.abs(score), initial=0.0)) < SCORE_TOL


# --------------------------------------------------------------------------
# Poisson
# --------------------------------------------------------------------------


@dataclass
class GLMFit:
    """Result of a Newton fit; pruned coefficients are zero with NaN variance."""

    coef: np.ndarray
    cov: np.ndarray
    kept: np.ndarray
    n_iter: int
    loglik: float

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def _poisson_ll(X, y, beta):
    eta = np.clip(X @ beta, -SCORE_CLAMP, SCORE_CLAMP)
    return float(np.sum(y * eta - np.exp(eta)))


def fit_poisson_glm(designs, responses, init=None, names=None, max_iter: int = MAX_NEWTON) -> GLMFit:
    """Maximise ``sum(-exp(x'b) + y x'b)`` by damped Newton steps."""
    X = check_features(designs)
    y = check_counts(responses, X.shape[0])
    p = X.shape[1]
    kept = _prune(X, names)
    Xk = X[:, kept]

    if init is not None:
        beta = np.asarray(init, dtype=np.float64)[kept].copy()
    else:
        beta = np.zeros(kept.shape[0])
    ll = _poisson_ll(Xk, y, beta)

    for it in range(1, max_iter + 1):
        mu = np.exp(np.clip(Xk @ beta, -SCORE_CLAMP, SCORE_CLAMP))
        score = Xk.T @ (y - mu)
        H = Xk.T @ (Xk * mu[:, None])
        if _converged(score):
            break
        step = _solve_spd(H, score)
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_new = _poisson_ll(Xk, y, cand)
            if ll_new >= ll:
                break
            t *= 0.5
        else:
            cand, ll_new = beta, ll
        beta, ll_old, ll = cand, ll, ll_new
        if abs(ll - ll_old) <= REL_LL_TOL * max(abs(ll), 1.0):
            mu = np.exp(np.clip(Xk @ beta, -SCORE_CLAMP, SCORE_CLAMP))
            H = Xk.T @ (Xk * mu[:, None])
            break
    else:
        raise ConvergenceError(f"Poisson GLM did not converge in {max_iter} Newton steps")

    coef = np.zeros(p)
    coef[kept] = beta
    cov = np.full((p, p), np.nan)
    cov[np.ix_(kept, kept)] = np.linalg.pinv(H)
    return GLMFit(coef, cov, kept, it, ll)


# --------------------------------------------------------------------------
# multinomial (softmax, last class as reference)
# --------------------------------------------------------------------------


def _multinomial_ll(X, W, B):
    scores = np.clip(X @ B.T, -SCORE_CLAMP, SCORE_CLAMP)
    return float(np.sum(W * log_softmax(scores)))


def _multinomial_hessian(X, P, tot):
    K = P.shape[1] - 1
    q = X.shape[1]
    H = np.empty((K, q, K, q))
    for a in range(K):
        for b in range(a, K):
            c = tot * ((a == b) * P[:, a] - P[:, a] * P[:, b])
            block = X.T @ (X * c[:, None])
            H[a, :, b, :] = block
            H[b, :, a, :] = block.T
    return H.reshape(K * q, K * q)


def fit_multinomial_glm(designs, weight_matrix, init=None, names=None, max_iter: int = MAX_NEWTON) -> GLMFit:
    """Maximise ``sum_ij w_ij log softmax_j(x_i' B)`` with the last row of B fixed at 0.

    ``coef`` has shape ``(d, p)``; ``cov`` covers the free rows stacked
    class-major, shape ``(d-1)*p`` square.
    """
    X = check_features(designs)
    W = check_counts(weight_matrix, X.shape[0], ndim=2)
    if not (W.sum(axis=1) > 0).any():
        raise ConvergenceError("all reporting weights are zero")
    d = W.shape[1]
    p = X.shape[1]
    K = d - 1
    kept = _prune(X, names)
    Xk = X[:, kept]
    q = kept.shape[0]
    tot = W.sum(axis=1)

    B = np.zeros((d, q))
    if init is not None:
        B[:K] = np.asarray(init, dtype=np.float64)[:K][:, kept]
    ll = _multinomial_ll(Xk, W, B)
    H = np.zeros((K * q, K * q))

    it = 0
    for it in range(1, max_iter + 1):
        if K == 0:
            break
        P = softmax(np.clip(Xk @ B.T, -SCORE_CLAMP, SCORE_CLAMP))
        score = (Xk.T @ (W[:, :K] - tot[:, None] * P[:, :K])).T.reshape(-1)
        H = _multinomial_hessian(Xk, P, tot)
        if _converged(score):
            break
        step = _solve_spd(H, score).reshape(K, q)
        t = 1.0
        for _ in range(40):
            cand = B.copy()
            cand[:K] += t * step
            ll_new = _multinomial_ll(Xk, W, cand)
            if ll_new >= ll:
                break
            t *= 0.5
        else:
            cand, ll_new = B, ll
        B, ll_old, ll = cand, ll, ll_new
        if abs(ll - ll_old) <= REL_LL_TOL * max(abs(ll), 1.0):
            P = softmax(np.clip(Xk @ B.T, -SCORE_CLAMP, SCORE_CLAMP))
            H = _multinomial_hessian(Xk, P, tot)
            break
    else:
        raise ConvergenceError(f"multinomial GLM did not converge in {max_iter} Newton steps")

    coef = np.zeros((d, p))
    coef[:, kept] = B
    free = (np.arange(K)[:, None] * p + kept[None, :]).reshape(-1)
    cov = np.full((K * p, K * p), np.nan)
    if K:
        cov[np.ix_(free, free)] = np.linalg.pinv(H)
    return GLMFit(coef, cov, kept, it, ll)


# --------------------------------------------------------------------------
# estimator wrappers
# --------------------------------------------------------------------------


class PoissonGLM(BaseEstimator):
    """Poisson regression with log link on a prepared design matrix.

    Parameters
    ----------
    max_iter : int
        Newton step budget.

    Attributes
    ----------
    coef_ : ndarray (n_columns,)
    fit_ : GLMFit
    """

    def __init__(self, max_iter: int = MAX_NEWTON):
        self.max_iter = max_iter

    def fit(self, X, y, coef_init=None, column_names=None):
        self.fit_ = fit_poisson_glm(X, y, init=coef_init, names=column_names, max_iter=self.max_iter)
        self.coef_ = self.fit_.coef
        return self

    def decision_function(self, X) -> np.ndarray:
        X = check_features(X, self.coef_.shape[0])
        return np.clip(X @ self.coef_, -SCORE_CLAMP, SCORE_CLAMP)

    def predict(self, X) -> np.ndarray:
        return np.exp(self.decision_function(X))


class MultinomialGLM(BaseEstimator):
    """Softmax regression on weighted class counts, last class as reference."""

    def __init__(self, max_iter: int = MAX_NEWTON):
        self.max_iter = max_iter

    def fit(self, X, W, coef_init=None, column_names=None):
        self.fit_ = fit_multinomial_glm(X, W, init=coef_init, names=column_names, max_iter=self.max_iter)
        self.coef_ = self.fit_.coef
        return self

    def decision_function(self, X) -> np.ndarray:
        X = check_features(X, self.coef_.shape[1])
        return np.clip(X @ self.coef_.T, -SCORE_CLAMP, SCORE_CLAMP)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))


def coefficient_rows(names: Sequence[str], coef: np.ndarray, class_index: int | None = None):
    """Flatten coefficients to ``(column name, class index, value)`` rows.

    A vector is written with ``class_index`` (0 for occurrence); a ``(d, p)``
    matrix is written with class indices 1..d.
    """
    coef = np.asarray(coef)
    if coef.ndim == 1:
        return [(nm, class_index or 0, float(v)) for nm, v in zip(names, coef)]
    return [(nm, j, float(v)) for j, row in enumerate(coef, start=1) for nm, v in zip(names, row)]


def check_schema(builder: DesignBuilder, feature_names: Sequence[str]):
    if tuple(feature_names) != builder.feature_names:
        raise SchemaError("feature names differ from those the model was fitted on")
