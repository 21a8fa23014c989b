"""Random grid search over learner hyperparameters, scored by val2 observed log-likelihood."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from importlib import resources
from typing import Any, Mapping

import numpy as np

from .data import Dataset
from .em import run_em
from .exceptions import ConfigError
from .learners import LEARNER_KINDS, learner_defaults


def _load_preset(filename: str) -> dict:
    text = resources.files("emnowcast").joinpath("presets").joinpath(filename).read_text(encoding="utf-8")
    return json.loads(text)


def load_grid(kind: str) -> dict[str, list]:
    """Tuning grid of a learner kind from the bundled presets."""
    grids = _load_preset("grids.json")
    if kind not in LEARNER_KINDS:
        raise ConfigError(f"unknown learner kind {kind!r}")
    return grids[kind]


def load_config(setting: str, kind: str) -> dict[str, Any]:
    """Selected learner configuration for a bundled setting (linear, nonlinear, covid)."""
    configs = _load_preset("configs.json")
    try:
        return dict(configs[setting][kind])
    except KeyError:
        raise ConfigError(f"no preset configuration for setting {setting!r}, learner {kind!r}") from None


def grid_size(grid: Mapping[str, list]) -> int:
    return math.prod(len(v) for v in grid.values())


def grid_point(grid: Mapping[str, list], index: int) -> dict[str, Any]:
    """Configuration at position ``index`` of the grid product (last key varies fastest)."""
    keys = list(grid)
    out = {}
    for key in reversed(keys):
        values = grid[key]
        index, r = divmod(index, len(values))
        out[key] = values[r]
    return {k: out[k] for k in keys}


@dataclass
class SearchResult:
    best_config: dict
    best_score: float
    table: list  # rows: (sample index, config, val2 log-likelihood, seconds)


def random_grid_search(
    data: Dataset,
    grid: Mapping[str, list],
    budget: int,
    seed: int,
    learner_kind: str,
    K: int = 100,
    em_patience: int = 10,
    fixed: Mapping[str, Any] | None = None,
    run_seed: int = 0,
) -> SearchResult:
    """Evaluate ``budget`` distinct grid points drawn uniformly without replacement.

    Each point runs EM with the learner hyperparameters from the grid (on top
    of ``fixed``) and is scored by the best val2 observed log-likelihood.
    Ties go to the earliest sampled configuration.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if learner_kind not in LEARNER_KINDS:
        raise ConfigError(f"unknown learner kind {learner_kind!r}")
    grid = {k: list(v) for k, v in grid.items()}
    if not grid:
        raise ConfigError("empty grid")
    if any(len(v) == 0 for v in grid.values()):
        raise ConfigError("every grid entry needs at least one value")
    known = set(learner_defaults(learner_kind))
    unknown = (set(grid) | set(fixed or {})) - known - {"kind"}
    if unknown:
        raise ConfigError(f"grid names unknown {learner_kind} hyperparameters {sorted(unknown)}")
    total = grid_size(grid)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(budget, total), replace=False)

    table = []
    for sample, index in enumerate(picks):
        config = {"kind": learner_kind, **(fixed or {}), **grid_point(grid, int(index))}
        started = time.perf_counter()
        result = run_em(data, config, K=K, em_patience=em_patience, seed=run_seed)
        score = max(result.ll_trace)
        table.append((sample, config, score, time.perf_counter() - started))
    best = max(table, key=lambda row: (row[2], -row[0]))
    return SearchResult(best[1], best[2], table)
