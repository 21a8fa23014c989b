"""Second-order regression trees with exact greedy splits.

Every distinct value of every feature is a split candidate. Rows are coded
by the rank of their value among the feature's distinct values, so gradient
sums per candidate reduce to a ``bincount`` followed by a cumulative sum;
this is the exact greedy search, not an approximate histogram.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ContractError

DEFAULT_MIN_CHILD_WEIGHT = 1e-3
_GAIN_RTOL = 1e-12


class FeatureBins:
    """Distinct-value coding of a feature matrix, reused across boosting rounds."""

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ContractError("tree induction needs a non-empty 2-d feature matrix")
        n, F = X.shape
        self.n_features = F
        codes = np.empty((n, F), dtype=np.int64)
        sizes = np.empty(F, dtype=np.int64)
        cand_feature, cand_bin, cand_threshold = [], [], []
        offset = 0
        for f in range(F):
            uniq, inv = np.unique(X[:, f], return_inverse=True)
            codes[:, f] = inv + offset
            sizes[f] = uniq.shape[0]
            if uniq.shape[0] > 1:
                mids = 0.5 * (uniq[:-1] + uniq[1:])
                cand_feature.append(np.full(mids.shape[0], f))
                cand_bin.append(np.arange(offset, offset + mids.shape[0]))
                cand_threshold.append(mids)
            offset += uniq.shape[0]
        self.codes = codes
        self.n_bins = int(offset)
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        if cand_feature:
            self.cand_feature = np.concatenate(cand_feature)
            self.cand_bin = np.concatenate(cand_bin)
            self.cand_threshold = np.concatenate(cand_threshold)
        else:
            self.cand_feature = np.zeros(0, dtype=np.int64)
            self.cand_bin = np.zeros(0, dtype=np.int64)
            self.cand_threshold = np.zeros(0)

    def take(self, rows: np.ndarray) -> FeatureBins:
        """Bins restricted to (or repeated along) the given row indices."""
        out = object.__new__(FeatureBins)
        out.__dict__.update(self.__dict__)
        out.codes = self.codes[rows]
        return out


@dataclass
class RegressionTree:
    """Binary tree stored in flat arrays; ``feature == -1`` marks a leaf.

    Rows with ``x[feature] < threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int
    feature_names: tuple[str, ...] | None = field(default=None, compare=False)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        depth = np.zeros(self.feature.shape[0], dtype=int)
        for k in range(self.feature.shape[0]):
            if self.feature[k] >= 0:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        node = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        for _ in range(self.max_depth):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            x = X[rows, np.where(internal, f, 0)]
            go_left = x < self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        nodes = []
        for k in range(self.feature.shape[0]):
            if self.feature[k] < 0:
                nodes.append({"leaf": float(self.value[k])})
            else:
                f = int(self.feature[k])
                nodes.append(
                    {
                        "feature": f,
                        "name": None if self.feature_names is None else self.feature_names[f],
                        "threshold": float(self.threshold[k]),
                        "left": int(self.left[k]),
                        "right": int(self.right[k]),
                        "value": float(self.value[k]),
                    }
                )
        return {"max_depth": int(self.max_depth), "nodes": nodes}

    @classmethod
    def from_dict(cls, doc: dict, feature_names=None) -> RegressionTree:
        nodes = doc["nodes"]
        m = len(nodes)
        feature = np.full(m, -1, dtype=np.int64)
        threshold = np.zeros(m)
        left = np.full(m, -1, dtype=np.int64)
        right = np.full(m, -1, dtype=np.int64)
        value = np.zeros(m)
        for k, node in enumerate(nodes):
            if "leaf" in node:
                value[k] = node["leaf"]
            else:
                feature[k] = node["feature"]
                threshold[k] = node["threshold"]
                left[k] = node["left"]
                right[k] = node["right"]
                value[k] = node["value"]
        names = None if feature_names is None else tuple(feature_names)
        return cls(feature, threshold, left, right, value, int(doc["max_depth"]), names)


def split_gain(GL, HL, GR, HR):
    """Second-order gain ``GL^2/HL + GR^2/HR - (GL+GR)^2/(HL+HR)``."""
    G, H = GL + GR, HL + HR
    return GL * GL / HL + GR * GR / HR - G * G / H


def _leaf_value(G: float, H: float) -> float:
    return -G / H if H > 0 else 0.0


def fit_regression_tree(
    X,
    g,
    h,
    max_depth: int,
    sample_weight=None,
    min_child_weight: float = DEFAULT_MIN_CHILD_WEIGHT,
    bins: FeatureBins | None = None,
    feature_names: Sequence[str] | None = None,
    return_leaves: bool = False,
):
    """Grow a depth-limited tree on gradient ``g`` and Hessian ``h``.

    Splits maximise the second-order gain; leaves take ``-G/H``. Ties go to
    the lowest feature index, then the lowest threshold. A node is not split
    when its Hessian mass, or that of either child, is below
    ``min_child_weight``.

    With ``return_leaves=True`` the leaf index of each training row is
    returned as well.
    """
    if max_depth < 1:
        raise ContractError("max_depth must be >= 1")
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if bins is None:
        bins = FeatureBins(X)
    n = bins.codes.shape[0]
    if g.shape != (n,) or h.shape != (n,):
        raise ContractError("g and h must be vectors matching the number of rows")
    if n == 0:
        raise ContractError("cannot fit a tree on zero rows")
    if sample_weight is not None:
        w = np.asarray(sample_weight, dtype=np.float64)
        g, h = g * w, h * w

    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    value = [_leaf_value(g.sum(), h.sum())]
    Gs = [g.sum()]
    Hs = [h.sum()]
    node_of = np.zeros(n, dtype=np.int64)
    frontier = [0]
    B = bins.n_bins
    F = bins.n_features

    for _ in range(max_depth):
        splittable = [k for k in frontier if Hs[k] >= min_child_weight]
        if not splittable or bins.cand_bin.shape[0] == 0:
            break
        slot = np.full(len(feature), -1, dtype=np.int64)
        slot[splittable] = np.arange(len(splittable))
        row_slot = slot[node_of]
        active = np.flatnonzero(row_slot >= 0)
        S = len(splittable)
        key = (row_slot[active, None] * B + bins.codes[active]).reshape(-1)
        hg = np.bincount(key, weights=np.repeat(g[active], F), minlength=S * B).reshape(S, B)
        hh = np.bincount(key, weights=np.repeat(h[active], F), minlength=S * B).reshape(S, B)
        cg = np.cumsum(hg, axis=1)
        ch = np.cumsum(hh, axis=1)
        start = bins.starts[bins.cand_feature]
        base_g = np.where(start > 0, cg[:, np.maximum(start - 1, 0)], 0.0)
        base_h = np.where(start > 0, ch[:, np.maximum(start - 1, 0)], 0.0)
        GL = cg[:, bins.cand_bin] - base_g
        HL = ch[:, bins.cand_bin] - base_h
        Gp = np.array([Gs[k] for k in splittable])[:, None]
        Hp = np.array([Hs[k] for k in splittable])[:, None]
        GR = Gp - GL
        HR = Hp - HL
        ok = (HL >= min_child_weight) & (HR >= min_child_weight)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(ok, split_gain(GL, HL, GR, HR), -np.inf)

        new_frontier = []
        for s, k in enumerate(splittable):
            c = int(np.argmax(gain[s]))
            best = gain[s, c]
            if not np.isfinite(best) or best <= _GAIN_RTOL * (Gs[k] ** 2 / Hs[k] if Hs[k] > 0 else 0.0):
                continue
            f = int(bins.cand_feature[c])
            thr = float(bins.cand_threshold[c])
            gl, hl = float(GL[s, c]), float(HL[s, c])
            gr, hr = float(GR[s, c]), float(HR[s, c])
            li, ri = len(feature), len(feature) + 1
            feature[k], threshold[k], left[k], right[k] = f, thr, li, ri
            for gg, hh_ in ((gl, hl), (gr, hr)):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(_leaf_value(gg, hh_))
                Gs.append(gg)
                Hs.append(hh_)
            in_node = np.flatnonzero(node_of == k)
            goes_left = bins.codes[in_node, f] <= bins.cand_bin[c]
            node_of[in_node] = np.where(goes_left, li, ri)
            new_frontier += [li, ri]
        frontier = new_frontier
        if not frontier:
            break

    tree = RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value),
        int(max_depth),
        None if feature_names is None else tuple(feature_names),
    )
    return (tree, node_of) if return_leaves else tree
