"""Zero-inflated negative binomial fits and dropout-mask construction.

Each gene (optionally within a stratum of cells) gets a two-component
model: a point mass at zero with weight ``theta`` and a negative binomial
with size ``r`` and success probability ``p`` whose zero mass is
``(1-p)**r``.  Fitting is EM: zeros carry a latent indicator for the
structural component; the M-step re-estimates ``theta`` in closed form and
``(r, p)`` by damped Newton steps on the weighted NB log-likelihood.
Updates are only accepted when they do not decrease the weighted
likelihood, so the observed log-likelihood is non-decreasing.

The posterior that an observed zero is recoverable (a dropout) is

    d = (1-theta) * (1-p)**r / (theta + (1-theta) * (1-p)**r)

Per-cell budgets for how many zeros to recover come from a Chao1-style
richness gap on singleton/doubleton counts, and the final mask flags the
top-d zeros of each cell up to that budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.special import gammaln, digamma, polygamma

from .errors import InsufficientDataError, MissingFitError
from .matrix_io import CountMatrix

R_MIN = 1e-3
R_MAX = 1e6
_P_EPS = 1e-12

DEGENERATE_ALL_ZERO = "all_zero"
DEGENERATE_NO_ZERO = "no_zero"


@dataclass
class EmConfig:
    """EM controls; defaults follow standard ZINB practice."""

    tol: float = 1e-6
    max_iter: int = 100
    newton_steps: int = 8


@dataclass
class ZinbFit:
    theta: float
    r: float
    p: float
    log_likelihood: float
    n_iterations: int
    converged: bool
    degenerate: str | None = None
    ll_trace: list[float] = field(default_factory=list)


@dataclass
class StratumLabels:
    """Per-cell stratum indices; every stratum in [0, n_strata) is nonempty."""

    labels: np.ndarray
    n_strata: int

    @classmethod
    def from_labels(cls, labels) -> "StratumLabels":
        arr = np.asarray(labels, dtype=np.int64)
        if arr.size == 0:
            raise ValueError("empty stratum labels")
        if arr.min() < 0:
            raise ValueError("stratum labels must be nonnegative")
        n = int(arr.max()) + 1
        present = np.bincount(arr, minlength=n)
        if np.any(present == 0):
            missing = int(np.flatnonzero(present == 0)[0])
            raise ValueError(f"stratum {missing} has no cells")
        return cls(arr, n)


@dataclass
class DropoutMask:
    """Binary flag matrix plus the evidence it came from.

    ``mask[i, c]`` is True only where the input matrix is zero.  The
    posterior for every observed zero is kept in coordinate form
    (``zero_rows``, ``zero_cols``, ``zero_posteriors``).
    """

    mask: np.ndarray
    zero_rows: np.ndarray
    zero_cols: np.ndarray
    zero_posteriors: np.ndarray
    targets: np.ndarray

    @property
    def n_flagged(self) -> int:
        return int(self.mask.sum())


def _nb_zero_mass(r: float, p: float) -> float:
    # (1-p)**r in log space to dodge underflow warnings
    return float(np.exp(r * np.log1p(-min(p, 1 - _P_EPS))))


def dropout_posterior(fit: ZinbFit) -> float:
    """Probability that an observed zero came from the NB component."""
    if fit.theta <= 0.0:
        return 1.0
    if fit.theta >= 1.0:
        return 0.0
    p0 = _nb_zero_mass(fit.r, fit.p)
    return (1.0 - fit.theta) * p0 / (fit.theta + (1.0 - fit.theta) * p0)


def _moment_init(counts: np.ndarray) -> tuple[float, float]:
    m = counts.mean()
    v = counts.var(ddof=0)
    if v > m > 0:
        r = m * m / (v - m)
    else:
        r = R_MAX
    r = float(np.clip(r, R_MIN, R_MAX))
    p = m / (m + r) if m > 0 else _P_EPS
    return r, float(np.clip(p, _P_EPS, 1 - _P_EPS))


def _weighted_nb_ll(values: np.ndarray, mults: np.ndarray, r: float, p: float) -> float:
    # values/mults: unique nonzero counts and their (weighted) multiplicities,
    # with the zero class folded in as value 0.
    lp = np.log(p)
    l1p = np.log1p(-p)
    terms = mults * (gammaln(values + r) - gammaln(r) - gammaln(values + 1.0) + values * lp + r * l1p)
    return float(terms.sum())


def _newton_nb(values: np.ndarray, mults: np.ndarray, r0: float, steps: int) -> tuple[float, float]:
    """Maximize the weighted NB log-likelihood over (r, p).

    p is profiled out in closed form (p = Sx / (Sx + r * Sw)); r gets damped
    Newton steps clamped to [R_MIN, R_MAX].
    """
    sw = float(mults.sum())
    sx = float((mults * values).sum())
    if sw <= 0 or sx <= 0:
        return r0, _P_EPS

    def p_of(r: float) -> float:
        return float(np.clip(sx / (sx + r * sw), _P_EPS, 1 - _P_EPS))

    r = float(np.clip(r0, R_MIN, R_MAX))
    best_r, best_p = r, p_of(r)
    best_ll = _weighted_nb_ll(values, mults, best_r, best_p)
    for _ in range(steps):
        p = p_of(r)
        grad = float((mults * (digamma(values + r) - digamma(r))).sum() + sw * np.log1p(-p))
        hess = float((mults * (polygamma(1, values + r) - polygamma(1, r))).sum())
        if hess >= 0 or not np.isfinite(grad) or not np.isfinite(hess):
            break
        step = -grad / hess
        # halve until the profile likelihood does not drop
        for _ in range(30):
            cand = float(np.clip(r + step, R_MIN, R_MAX))
            ll = _weighted_nb_ll(values, mults, cand, p_of(cand))
            if ll >= best_ll - 1e-12:
                break
            step *= 0.5
        else:
            break
        if ll > best_ll:
            best_ll, best_r, best_p = ll, cand, p_of(cand)
        if abs(cand - r) <= 1e-10 * max(1.0, r):
            r = cand
            break
        r = cand
    return best_r, best_p


def _zinb_ll(n_zero: int, values: np.ndarray, mults: np.ndarray, theta: float, r: float, p: float) -> float:
    th = float(np.clip(theta, _P_EPS, 1 - _P_EPS))
    p0 = _nb_zero_mass(r, p)
    ll = n_zero * np.log(th + (1.0 - th) * p0) if n_zero else 0.0
    if values.size:
        lp = np.log(p)
        l1p = np.log1p(-p)
        nb = gammaln(values + r) - gammaln(r) - gammaln(values + 1.0) + values * lp + r * l1p
        ll += float((mults * (np.log1p(-th) + nb)).sum())
    return float(ll)


def fit_zinb(counts, config: EmConfig | None = None) -> ZinbFit:
    """Fit the zero-inflated NB to one gene's per-cell counts.

    Counts must be raw integers (fractional input is rejected).  All-zero
    and no-zero inputs return degenerate fits rather than raising.
    """
    config = config or EmConfig()
    x = np.asarray(counts, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("counts must be one-dimensional")
    if x.size < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {x.size}")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("counts must be finite and nonnegative")
    if np.max(np.abs(x - np.rint(x))) > 1e-6:
        raise ValueError("detection runs on raw integer counts; got fractional values")
    x = np.rint(x)

    n = x.size
    n_zero = int((x == 0).sum())
    nz = x[x > 0]

    if n_zero == n:
        return ZinbFit(1.0, R_MIN, 0.5, 0.0, 0, True, DEGENERATE_ALL_ZERO, [0.0])

    uniq, mult = np.unique(nz, return_counts=True)
    mult = mult.astype(np.float64)

    if n_zero == 0:
        r, p = _newton_nb(uniq, mult, _moment_init(x)[0], config.newton_steps * 4)
        ll = _zinb_ll(0, uniq, mult, 0.0, r, p)
        return ZinbFit(0.0, r, p, ll, 0, True, DEGENERATE_NO_ZERO, [ll])

    r, p = _moment_init(x)
    theta = max(0.01, n_zero / n - _nb_zero_mass(r, p))
    theta = float(np.clip(theta, 0.01, 1 - 1e-6))

    trace: list[float] = []
    ll_prev = -np.inf
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        # E-step: responsibility of the point mass for each zero
        p0 = _nb_zero_mass(r, p)
        gamma = theta / (theta + (1.0 - theta) * p0)
        # M-step
        theta_new = float(np.clip(gamma * n_zero / n, 0.0, 1.0))
        w0 = 1.0 - gamma
        vals = np.concatenate(([0.0], uniq))
        mults = np.concatenate(([n_zero * w0], mult))
        r_new, p_new = _newton_nb(vals, mults, r, config.newton_steps)
        if _weighted_nb_ll(vals, mults, r_new, p_new) >= _weighted_nb_ll(vals, mults, r, p):
            r, p = r_new, p_new
        theta = theta_new

        ll = _zinb_ll(n_zero, uniq, mult, theta, r, p)
        trace.append(ll)
        if np.isfinite(ll_prev) and abs(ll - ll_prev) <= config.tol * (abs(ll_prev) + 1e-12):
            converged = True
            break
        ll_prev = ll

    return ZinbFit(theta, r, p, trace[-1], it, converged, None, trace)


@dataclass
class ZinbFitTable:
    """Fits indexed by (gene, stratum); only slices with zeros are fitted."""

    fits: dict[tuple[int, int], ZinbFit]
    n_genes: int
    n_strata: int

    def posterior_array(self) -> np.ndarray:
        """d per (gene, stratum); NaN where no fit exists."""
        d = np.full((self.n_genes, self.n_strata), np.nan)
        for (g, k), fit in self.fits.items():
            d[g, k] = dropout_posterior(fit)
        return d


def fit_matrix(
    m: CountMatrix,
    strata: StratumLabels | None = None,
    config: EmConfig | None = None,
    n_jobs: int = 1,
) -> ZinbFitTable:
    """Fit every gene x stratum slice that contains at least one zero.

    Fits are pure functions of their slice, so results are identical for
    any ``n_jobs``; outputs are merged in (gene, stratum) order.
    """
    config = config or EmConfig()
    dense = m.to_dense()
    if strata is None:
        groups = [np.arange(m.n_cells)]
        n_strata = 1
    else:
        if strata.labels.shape[0] != m.n_cells:
            raise ValueError(
                f"{strata.labels.shape[0]} stratum labels for {m.n_cells} cells"
            )
        groups = [np.flatnonzero(strata.labels == k) for k in range(strata.n_strata)]
        n_strata = strata.n_strata

    jobs = []
    for g in range(m.n_genes):
        row = dense[g]
        for k, idx in enumerate(groups):
            slice_ = row[idx]
            if slice_.size and (slice_ == 0).any():
                jobs.append((g, k, slice_))

    if n_jobs == 1 or len(jobs) < 32:
        results = [fit_zinb(slice_, config) for _, _, slice_ in jobs]
    else:
        results = Parallel(n_jobs=n_jobs, backend="loky")(
            delayed(fit_zinb)(slice_, config) for _, _, slice_ in jobs
        )
    fits = {(g, k): fit for (g, k, _), fit in zip(jobs, results)}
    return ZinbFitTable(fits, m.n_genes, n_strata)


def estimate_dropout_targets(m: CountMatrix) -> np.ndarray:
    """Chao1-style per-cell budget of recoverable zeros.

    L_c = round(f1^2 / (2 f2)) with the bias-corrected f1(f1-1)/2 fallback
    when f2 = 0, clamped to the number of zeros in the cell; f1/f2 count
    genes observed exactly once/twice.
    """
    csc = m.values.tocsc()
    g = m.n_genes
    targets = np.zeros(m.n_cells, dtype=np.int64)
    for c in range(m.n_cells):
        data = csc.data[csc.indptr[c]:csc.indptr[c + 1]]
        f1 = int((data == 1.0).sum())
        f2 = int((data == 2.0).sum())
        if f2 > 0:
            est = f1 * f1 / (2.0 * f2)
        else:
            est = f1 * (f1 - 1) / 2.0
        zeros_in_cell = g - data.size
        targets[c] = int(np.clip(round(est), 0, zeros_in_cell))
    return targets


def build_mask(
    m: CountMatrix,
    fits: ZinbFitTable,
    strata: StratumLabels | None,
    targets: np.ndarray,
) -> DropoutMask:
    """Flag the top-posterior zeros of each cell, up to its budget.

    Exactly ``min(L_c, zeros_in_cell)`` positions are flagged per cell;
    ties break toward the lower gene index.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape[0] != m.n_cells:
        raise ValueError(f"{targets.shape[0]} targets for {m.n_cells} cells")
    stratum_of = strata.labels if strata is not None else np.zeros(m.n_cells, dtype=np.int64)

    d_table = fits.posterior_array()
    dense = m.to_dense()
    mask = np.zeros(dense.shape, dtype=bool)
    zero_rows: list[np.ndarray] = []
    zero_cols: list[np.ndarray] = []
    zero_post: list[np.ndarray] = []

    for c in range(m.n_cells):
        zg = np.flatnonzero(dense[:, c] == 0)
        if zg.size == 0:
            continue
        d = d_table[zg, stratum_of[c]]
        if np.any(np.isnan(d)):
            g_missing = int(zg[np.flatnonzero(np.isnan(d))[0]])
            raise MissingFitError(
                f"no fit for gene {g_missing}, stratum {int(stratum_of[c])} (has zeros)"
            )
        zero_rows.append(zg)
        zero_cols.append(np.full(zg.size, c, dtype=np.int64))
        zero_post.append(d)
        take = int(min(targets[c], zg.size))
        if take > 0:
            order = np.lexsort((zg, -d))[:take]
            mask[zg[order], c] = True

    return DropoutMask(
        mask=mask,
        zero_rows=np.concatenate(zero_rows) if zero_rows else np.empty(0, dtype=np.int64),
        zero_cols=np.concatenate(zero_cols) if zero_cols else np.empty(0, dtype=np.int64),
        zero_posteriors=np.concatenate(zero_post) if zero_post else np.empty(0),
        targets=targets,
    )


def detect(
    m: CountMatrix,
    strata: StratumLabels | None = None,
    config: EmConfig | None = None,
    n_jobs: int = 1,
) -> tuple[DropoutMask, ZinbFitTable]:
    """Full detection pass: fits, per-cell budgets, and the mask."""
    fits = fit_matrix(m, strata, config, n_jobs=n_jobs)
    targets = estimate_dropout_targets(m)
    return build_mask(m, fits, strata, targets), fits
