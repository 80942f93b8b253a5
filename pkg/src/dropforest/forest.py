"""Regression random forests with out-of-bag error.

Trees are exact CART: at each node the best variance-reducing threshold is
searched over the midpoints of consecutive sorted values of ``mtry``
candidate features.  Split scoring is batched across the candidate set in
a handful of numpy calls per node, which is what keeps pipeline-scale runs
(thousands of forests) tractable without compiled code.

Determinism: every tree owns a generator derived from
(seed key..., tree index), so output is independent of scheduling and
thread count.  Ties in split scoring resolve to the earliest candidate
feature, then the lowest split position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import child_rng
from .errors import InsufficientDataError, ShapeMismatchError


@dataclass
class ForestConfig:
    """Forest hyperparameters; defaults favor compact, fast ensembles."""

    ntree: int = 10
    mtry: int | str = "sqrt_p"
    min_node_size: int = 5
    max_iterations: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ntree < 1:
            raise ValueError("ntree must be >= 1")
        if isinstance(self.mtry, str):
            if self.mtry != "sqrt_p":
                raise ValueError(f"unknown mtry rule {self.mtry!r}")
        elif self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def resolve_mtry(self, n_candidates: int) -> int:
        if isinstance(self.mtry, str):
            return max(1, int(np.sqrt(n_candidates)))
        if self.mtry > n_candidates:
            raise ValueError(f"mtry={self.mtry} exceeds {n_candidates} candidate features")
        return self.mtry


@dataclass
class Tree:
    """Flat array representation; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, rows: np.ndarray) -> np.ndarray:
        node = np.zeros(rows.shape[0], dtype=np.int32)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            cur = node[idx]
            go_left = rows[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active[idx] = self.feature[node[idx]] >= 0
        return self.value[node]


@dataclass
class RegressionForest:
    trees: list[Tree]
    oob_error: float
    n_features: int
    trained_response: object = None
    oob_prediction_count: int = 0
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.ntree = len(self.trees)


def _grow_tree(
    x: np.ndarray,
    y: np.ndarray,
    rows: np.ndarray,
    candidates: np.ndarray,
    mtry: int,
    min_node_size: int,
    rng: np.random.Generator,
) -> Tree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack: list[tuple[int, np.ndarray]] = [(root, rows)]
    sample_all = mtry >= candidates.size
    cols = np.arange(mtry)

    while stack:
        node, idx = stack.pop()
        y_node = y[idx]
        n = idx.size
        if y_node.min() == y_node.max():
            # exact value for pure nodes so constant responses round-trip
            value[node] = float(y_node[0])
            continue
        if n <= min_node_size:
            value[node] = float(y_node.mean())
            continue

        feats = candidates if sample_all else rng.choice(candidates, size=mtry, replace=False)
        a = x[idx[:, None], feats]
        order = np.argsort(a, axis=0)
        a_sorted = a[order, cols]
        y_sorted = y_node[order]
        csum = np.cumsum(y_sorted, axis=0)
        total = csum[-1]
        n_left = np.arange(1, n, dtype=np.float64)[:, None]
        left_sum = csum[:-1]
        score = left_sum * left_sum / n_left + (total - left_sum) ** 2 / (n - n_left)
        score[a_sorted[1:] <= a_sorted[:-1]] = -np.inf

        # feature-major flat argmax: earliest candidate feature wins ties,
        # then the lowest split position (mirrored by the test oracle)
        j, pos = divmod(int(np.argmax(score.T)), n - 1)
        if not np.isfinite(score[pos, j]):
            value[node] = float(y_node.mean())
            continue
        lo, hi = a_sorted[pos, j], a_sorted[pos + 1, j]
        thr = (lo + hi) / 2.0
        if not thr < hi:  # midpoint rounded up to hi; fall back so routing stays consistent
            thr = lo

        feature[node] = int(feats[j])
        threshold[node] = float(thr)
        left_child = new_node()
        right_child = new_node()
        left[node] = left_child
        right[node] = right_child
        stack.append((right_child, idx[order[pos + 1:, j]]))
        stack.append((left_child, idx[order[: pos + 1, j]]))

    return Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=np.float64),
    )


def train_forest(
    predictors,
    response,
    config: ForestConfig,
    rng_stream: int | tuple[int, ...] = 0,
    *,
    bootstrap: bool = True,
    feature_subset: np.ndarray | None = None,
    response_id: object = None,
) -> RegressionForest:
    """Train ``config.ntree`` trees on bootstrap resamples.

    ``rng_stream`` is the structural key appended to ``config.seed``; pass a
    distinct key per forest to keep parallel training deterministic.
    ``feature_subset`` restricts split candidates to those column indices
    (the full predictor width is still expected at prediction time).
    ``bootstrap=False`` is a test hook: trees train on the full sample and
    no out-of-bag rows exist.
    """
    x = np.asarray(predictors, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("predictors must be a 2-D matrix")
    if y.shape != (x.shape[0],):
        raise ShapeMismatchError(f"response of length {y.shape} for {x.shape[0]} rows")
    n = x.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {n}")
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")

    candidates = (
        np.arange(x.shape[1], dtype=np.int64)
        if feature_subset is None
        else np.asarray(feature_subset, dtype=np.int64)
    )
    if candidates.size == 0:
        raise ValueError("no candidate features")
    mtry = config.resolve_mtry(candidates.size)

    key = rng_stream if isinstance(rng_stream, tuple) else (int(rng_stream),)
    notes: list[str] = []
    constant_response = y.min() == y.max()
    if constant_response:
        notes.append("constant_response")

    trees: list[Tree] = []
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n, dtype=np.int64)
    all_rows = np.arange(n, dtype=np.int64)
    for t in range(config.ntree):
        rng = child_rng(config.seed, *key, t)
        if bootstrap:
            sample = rng.integers(0, n, size=n)
            inbag = np.zeros(n, dtype=bool)
            inbag[sample] = True
        else:
            sample = all_rows
            inbag = np.ones(n, dtype=bool)
        tree = _grow_tree(x, y, sample, candidates, mtry, config.min_node_size, rng)
        trees.append(tree)
        oob_rows = np.flatnonzero(~inbag)
        if oob_rows.size:
            oob_sum[oob_rows] += tree.predict(x[oob_rows])
            oob_cnt[oob_rows] += 1

    covered = oob_cnt > 0
    if constant_response or not covered.any():
        # single-leaf trees reproduce the constant exactly
        oob_error = 0.0
    else:
        y_oob = y[covered]
        pred = oob_sum[covered] / oob_cnt[covered]
        resid = y_oob - pred
        ssr = float(resid @ resid)
        if y_oob.min() == y_oob.max():  # degenerate denominator: plain MSE
            oob_error = ssr / covered.sum()
        else:
            centered = y_oob - y_oob.mean()
            oob_error = ssr / float(centered @ centered)

    return RegressionForest(
        trees=trees,
        oob_error=float(oob_error),
        n_features=x.shape[1],
        trained_response=response_id,
        oob_prediction_count=int(covered.sum()),
        notes=notes,
    )


def predict(forest: RegressionForest, rows) -> np.ndarray:
    """Ensemble mean of routed leaf values."""
    r = np.asarray(rows, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != forest.n_features:
        raise ShapeMismatchError(
            f"rows of width {r.shape[1] if r.ndim == 2 else '?'} for a forest trained on {forest.n_features}"
        )
    out = np.zeros(r.shape[0])
    for tree in forest.trees:
        out += tree.predict(r)
    return out / len(forest.trees)
