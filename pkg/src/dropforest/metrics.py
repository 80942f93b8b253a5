"""Clustering and statistical evaluation: ARI, NMI, k-means, PCA, elbow
curves, and the group-summary statistics reported alongside them.

ARI defaults to the chance-corrected pair-counting form built from
binomial coefficients; a squared-count variant is available behind a flag
for comparison with sources that normalize by n^2 instead of C(n,2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from ._rng import DOMAIN_KMEANS, child_rng
from .errors import (
    ComponentCountError,
    EmptyGroupError,
    InsufficientDataError,
    KTooLargeError,
    LengthMismatchError,
)


@dataclass
class Partition:
    labels: np.ndarray
    n_clusters: int

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        arr = np.asarray(labels, dtype=np.int64)
        if arr.size == 0:
            raise ValueError("empty partition")
        if arr.min() < 0:
            raise ValueError("cluster labels must be nonnegative")
        return cls(arr, int(arr.max()) + 1)


@dataclass
class ContingencyTable:
    counts: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray
    total: int

    @classmethod
    def from_partitions(cls, u: Partition, v: Partition) -> "ContingencyTable":
        if u.labels.shape[0] != v.labels.shape[0]:
            raise LengthMismatchError(
                f"partitions of length {u.labels.shape[0]} and {v.labels.shape[0]}"
            )
        counts = np.zeros((u.n_clusters, v.n_clusters), dtype=np.int64)
        np.add.at(counts, (u.labels, v.labels), 1)
        return cls(counts, counts.sum(axis=1), counts.sum(axis=0), int(counts.sum()))


def _as_partition(x) -> Partition:
    return x if isinstance(x, Partition) else Partition.from_labels(x)


def _comb2(n: np.ndarray) -> np.ndarray:
    n = n.astype(np.float64)
    return n * (n - 1.0) / 2.0


def ari(u, v, *, squared: bool = False) -> float:
    """Adjusted Rand index; 0 by convention when the chance-corrected
    denominator vanishes (both partitions trivial).

    ``squared=True`` replaces every C(n,2) term by n^2 (and C(n,2) by n^2 in
    the expectation), a variant some sources print; it is not the default.
    """
    table = ContingencyTable.from_partitions(_as_partition(u), _as_partition(v))
    if squared:
        sum_ij = float((table.counts.astype(np.float64) ** 2).sum())
        sum_i = float((table.row_sums.astype(np.float64) ** 2).sum())
        sum_j = float((table.col_sums.astype(np.float64) ** 2).sum())
        expected = sum_i * sum_j / float(table.total) ** 2
    else:
        sum_ij = float(_comb2(table.counts).sum())
        sum_i = float(_comb2(table.row_sums).sum())
        sum_j = float(_comb2(table.col_sums).sum())
        total_pairs = float(_comb2(np.asarray([table.total]))[0])
        if total_pairs == 0:
            return 0.0
        expected = sum_i * sum_j / total_pairs
    denom = 0.5 * (sum_i + sum_j) - expected
    if denom == 0.0:
        return 0.0
    return (sum_ij - expected) / denom


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(u, v) -> float:
    """Entropy-normalized mutual information, natural log, in [0, 1]."""
    table = ContingencyTable.from_partitions(_as_partition(u), _as_partition(v))
    n = table.total
    p_ij = table.counts / n
    p_i = table.row_sums / n
    p_j = table.col_sums / n
    h_u = _entropy(p_i)
    h_v = _entropy(p_j)
    if h_u + h_v == 0.0:
        # both single-cluster, hence identical
        return 1.0
    nz = p_ij > 0
    info = float((p_ij[nz] * np.log(p_ij[nz] / np.outer(p_i, p_j)[nz])).sum())
    return 2.0 * info / (h_u + h_v)


# ---------------------------------------------------------------------------
# k-means and PCA
# ---------------------------------------------------------------------------


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[i] = points[idx]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def _lloyd(
    points: np.ndarray, centers: np.ndarray, max_iter: int = 300
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    labels = np.full(points.shape[0], -1, dtype=np.int64)
    wcss_trace: list[float] = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        wcss_trace.append(float(d2[np.arange(points.shape[0]), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(centers.shape[0]):
            members = labels == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-fit point
                worst = int(np.argmax(d2[np.arange(points.shape[0]), labels]))
                centers[j] = points[worst]
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    wcss = float(d2[np.arange(points.shape[0]), labels].sum())
    return labels, centers, wcss, wcss_trace


def kmeans(
    points,
    k: int,
    seed: int = 0,
    n_restarts: int = 10,
    *,
    warm_centers: np.ndarray | None = None,
) -> tuple[Partition, float]:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_restarts``.

    ``warm_centers`` adds one extra restart initialized from the given
    centers (used by the elbow sweep to keep WCSS monotone in k).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D matrix")
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise KTooLargeError(f"k={k} exceeds {n} items")

    best: tuple[float, np.ndarray] | None = None
    for restart in range(n_restarts):
        rng = child_rng(seed, DOMAIN_KMEANS, restart)
        centers = _plus_plus_init(pts, k, rng)
        labels, _, wcss, _ = _lloyd(pts, centers)
        if best is None or wcss < best[0]:
            best = (wcss, labels)
    if warm_centers is not None and warm_centers.shape == (k, pts.shape[1]):
        labels, _, wcss, _ = _lloyd(pts, warm_centers.copy())
        if wcss < best[0]:
            best = (wcss, labels)

    wcss, labels = best[0], best[1]
    return Partition(labels, k), wcss


def pca_decompose(m, n_components: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centered SVD; returns (embedding, components, column means).

    Component signs are fixed so each component's largest-magnitude loading
    is positive.
    """
    x = np.asarray(m, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not 1 <= n_components <= min(x.shape):
        raise ComponentCountError(
            f"n_components={n_components} outside [1, {min(x.shape)}]"
        )
    mean = x.mean(axis=0)
    u, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    u, s, vt = u[:, :n_components], s[:n_components], vt[:n_components]
    for i in range(n_components):
        pivot = int(np.argmax(np.abs(vt[i])))
        if vt[i, pivot] < 0:
            vt[i] = -vt[i]
            u[:, i] = -u[:, i]
    return u * s, vt, mean


def pca(m, n_components: int) -> np.ndarray:
    """Project rows of ``m`` onto the top principal components."""
    embedding, _, _ = pca_decompose(m, n_components)
    return embedding


def elbow_curve(points, k_range, seed: int = 0, n_restarts: int = 10) -> list[tuple[int, float]]:
    """(k, WCSS) over ``k_range``; the previous solution seeds one restart
    of the next k so the curve is non-increasing."""
    pts = np.asarray(points, dtype=np.float64)
    ks = sorted(int(k) for k in k_range)
    out: list[tuple[int, float]] = []
    prev_centers: np.ndarray | None = None
    for k in ks:
        warm = None
        if prev_centers is not None and prev_centers.shape[0] < k:
            # extend the previous centers with farthest points; starting from
            # the k-1 solution keeps the curve non-increasing
            warm = prev_centers
            while warm.shape[0] < k:
                d2 = ((pts[:, None, :] - warm[None, :, :]) ** 2).sum(axis=2).min(axis=1)
                warm = np.vstack([warm, pts[int(np.argmax(d2))]])
        part, wcss = kmeans(pts, k, seed=seed, n_restarts=n_restarts, warm_centers=warm)
        out.append((k, wcss))
        prev_centers = np.vstack(
            [pts[part.labels == j].mean(axis=0) for j in range(k) if (part.labels == j).any()]
        )
    return out


# ---------------------------------------------------------------------------
# summary statistics
# ---------------------------------------------------------------------------


@dataclass
class GroupStats:
    mean: float
    sd: float
    n: int
    ci_low: float
    ci_high: float
    degenerate: bool = False


def group_summary(values, groups) -> dict[int, GroupStats]:
    """Per-group mean, sd, and Student-t 95% CI of the mean."""
    vals = np.asarray(values, dtype=np.float64)
    part = _as_partition(groups)
    if vals.shape[0] != part.labels.shape[0]:
        raise LengthMismatchError(
            f"{vals.shape[0]} values for {part.labels.shape[0]} group labels"
        )
    out: dict[int, GroupStats] = {}
    for g in range(part.n_clusters):
        members = vals[part.labels == g]
        n = members.size
        if n == 0:
            raise EmptyGroupError(f"group {g} has no members")
        mean = float(members.mean())
        if n == 1:
            out[g] = GroupStats(mean, 0.0, 1, mean, mean, degenerate=True)
            continue
        sd = float(members.std(ddof=1))
        if sd == 0.0:
            out[g] = GroupStats(mean, 0.0, n, mean, mean, degenerate=True)
            continue
        half = float(student_t.ppf(0.975, n - 1)) * sd / np.sqrt(n)
        out[g] = GroupStats(mean, sd, n, mean - half, mean + half)
    return out


@dataclass
class WelchResult:
    t: float
    df: float
    degenerate: bool = False


def welch_t(a, b) -> WelchResult:
    """Welch's unequal-variance t statistic with Satterthwaite df."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise InsufficientDataError("welch_t needs at least 2 observations per sample")
    vx = x.var(ddof=1) / x.size
    vy = y.var(ddof=1) / y.size
    se2 = vx + vy
    diff = float(x.mean() - y.mean())
    if se2 == 0.0:
        if diff == 0.0:
            return WelchResult(0.0, float("nan"), degenerate=True)
        return WelchResult(float(np.sign(diff)) * float("inf"), float("nan"), degenerate=True)
    df = se2**2 / (vx**2 / (x.size - 1) + vy**2 / (y.size - 1))
    return WelchResult(diff / float(np.sqrt(se2)), float(df))
