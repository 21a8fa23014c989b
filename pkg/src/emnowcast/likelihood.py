"""Likelihood functionals and parameter-recovery errors.

All sums go through ``np.sum`` on contiguous arrays, which uses pairwise
summation; constant ``log N!`` terms are kept and evaluated with
``gammaln(N + 1)`` so that fractional E-step counts are handled too.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import gammaln, xlogy

from .data import CompletedDataset, Dataset, ParameterEstimates
from .exceptions import ContractError, DomainError
from .validation import check_probability_rows


class LikelihoodValue(NamedTuple):
    value: float
    n_terms: int


def _xlogy(n: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``n * log(p)`` with ``0 * log(0) = 0``; raises when ``n > 0`` and ``p <= 0``."""
    if ((n > 0) & (p <= 0)).any():
        raise DomainError("log of a non-positive probability or intensity with a positive count")
    return xlogy(n, p)


def _check_cover(est: ParameterEstimates, n: int, d: int):
    if len(est) != n or est.d != d:
        raise ContractError(f"estimates cover {len(est)}x{est.d} cells, data has {n}x{d}")


def observed_ll(est: ParameterEstimates, data: Dataset) -> LikelihoodValue:
    """Poisson log-likelihood of the observed cells only."""
    _check_cover(est, data.n, data.d)
    mask = data.observed_mask
    n = data.counts.astype(np.float64)
    mean = est.lam[:, None] * est.p
    terms = -mean + _xlogy(n, mean) - gammaln(n + 1.0)
    return LikelihoodValue(float(np.sum(terms[mask])), int(mask.sum()))


def complete_ll(est: ParameterEstimates, completed: CompletedDataset) -> LikelihoodValue:
    """Complete-data log-likelihood over all ``d`` cells."""
    counts = completed.counts
    _check_cover(est, *counts.shape)
    totals = counts.sum(axis=1)
    occ = -est.lam + _xlogy(totals, est.lam)
    rep = _xlogy(counts, est.p) - gammaln(counts + 1.0)
    value = np.sum(occ) + np.sum(rep)
    return LikelihoodValue(float(value), int(counts.size))


def q_occ(lam, completed: CompletedDataset | np.ndarray) -> float:
    """Expected complete occurrence log-likelihood ``sum(-lam + N log lam)``."""
    lam = np.asarray(lam, dtype=np.float64)
    totals = _totals(completed)
    if lam.shape != totals.shape:
        raise ContractError("intensity vector length differs from number of records")
    if not np.all(np.isfinite(lam)) or (lam <= 0).any():
        raise DomainError("occurrence intensities must be positive")
    return float(np.sum(-lam + totals * np.log(lam)))


def q_rep(p, completed: CompletedDataset | np.ndarray) -> float:
    """Expected complete reporting log-likelihood ``sum(N_ij log p_ij)``."""
    p = check_probability_rows(p)
    counts = completed.counts if isinstance(completed, CompletedDataset) else np.asarray(completed, dtype=np.float64)
    if p.shape != counts.shape:
        raise ContractError("probability matrix shape differs from completed counts")
    return float(np.sum(_xlogy(counts, p)))


def _totals(completed) -> np.ndarray:
    if isinstance(completed, CompletedDataset):
        return completed.totals
    c = np.asarray(completed, dtype=np.float64)
    return c.sum(axis=1) if c.ndim == 2 else c


def ase_lambda(est: ParameterEstimates, truth: ParameterEstimates) -> float:
    if len(est) != len(truth):
        raise ContractError("estimate and truth cover different numbers of records")
    return float(np.mean((truth.lam - est.lam) ** 2))


def ase_p(est: ParameterEstimates, truth: ParameterEstimates) -> float:
    if est.p.shape != truth.p.shape:
        raise ContractError("estimate and truth probability matrices differ in shape")
    return float(np.mean(np.sum((truth.p - est.p) ** 2, axis=1)))
