"""Synthetic grouped scRNA-seq counts with tunable mean-dependent dropout.

The generator keeps just the pieces the pipeline needs: gamma base means
per gene, log-normal differential-expression factors per group, log-normal
library sizes, NB counts with a common dispersion, and per-entry logistic
dropout driven by log2(mean + 1).  The pre-dropout matrix is retained as
an evaluation oracle.

Each random component draws from its own derived stream, so the truth
matrix is identical across different ``dropout_mid`` values under the same
seed and the dropout mask grows monotonically with ``dropout_mid``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ._rng import DOMAIN_SIMULATE, child_rng
from .errors import ConfigError, UnreachableTargetError
from .matrix_io import CountMatrix

_STREAM_MEANS = 0
_STREAM_DE = 1
_STREAM_GROUPS = 2
_STREAM_LIBSIZE = 3
_STREAM_COUNTS = 4
_STREAM_DROPOUT = 5


@dataclass(frozen=True)
class SimConfig:
    n_genes: int = 1000
    n_cells: int = 800
    group_probs: tuple[float, ...] = (0.20, 0.35, 0.45)
    mean_shape: float = 0.6
    mean_rate: float = 0.3
    de_prob: float = 0.1
    de_factor_sd: float = 0.4
    libsize_mu: float = 11.0
    libsize_sd: float = 0.2
    dispersion: float = 0.1
    dropout_mid: float = 0.0
    dropout_shape: float = -1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_genes < 1 or self.n_cells < 1:
            raise ConfigError("n_genes and n_cells must be positive")
        probs = np.asarray(self.group_probs, dtype=np.float64)
        if probs.size == 0 or np.any(probs <= 0):
            raise ConfigError("group_probs must all be positive")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ConfigError(f"group_probs sum to {probs.sum()}, expected 1")
        for name in ("mean_shape", "mean_rate", "de_factor_sd", "libsize_sd", "dispersion"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.de_prob <= 1:
            raise ConfigError("de_prob must be in [0, 1]")
        if self.dropout_shape >= 0:
            raise ConfigError("dropout_shape must be negative (dropout decreasing in mean)")


@dataclass
class SimOutput:
    truth: CountMatrix
    observed: CountMatrix
    labels: np.ndarray
    dropout_mask_true: np.ndarray
    config: SimConfig


def _logistic(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _mean_matrix(config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry NB means and group labels."""
    g, c = config.n_genes, config.n_cells
    k = len(config.group_probs)
    seed = config.seed

    base = child_rng(seed, DOMAIN_SIMULATE, _STREAM_MEANS).gamma(
        shape=config.mean_shape, scale=1.0 / config.mean_rate, size=g
    )
    rng_de = child_rng(seed, DOMAIN_SIMULATE, _STREAM_DE)
    is_de = rng_de.random((k, g)) < config.de_prob
    factors = np.exp(rng_de.normal(0.0, config.de_factor_sd, size=(k, g)))
    de = np.where(is_de, factors, 1.0)

    labels = child_rng(seed, DOMAIN_SIMULATE, _STREAM_GROUPS).choice(
        k, size=c, p=np.asarray(config.group_probs)
    )
    libsize = child_rng(seed, DOMAIN_SIMULATE, _STREAM_LIBSIZE).lognormal(
        mean=config.libsize_mu, sigma=config.libsize_sd, size=c
    )

    means = base[:, None] * de[labels].T
    means *= libsize / means.sum(axis=0)
    return means, labels


def simulate(config: SimConfig) -> SimOutput:
    """Generate truth and observed matrices; deterministic given the seed."""
    means, labels = _mean_matrix(config)
    g, c = means.shape
    r = 1.0 / config.dispersion
    truth = child_rng(config.seed, DOMAIN_SIMULATE, _STREAM_COUNTS).negative_binomial(
        n=r, p=r / (r + means)
    ).astype(np.float64)

    p_drop = _logistic(config.dropout_shape * (np.log2(means + 1.0) - config.dropout_mid))
    u = child_rng(config.seed, DOMAIN_SIMULATE, _STREAM_DROPOUT).random(size=(g, c))
    dropped = u < p_drop
    observed = np.where(dropped, 0.0, truth)

    gene_names = [f"g{i + 1:04d}" for i in range(g)]
    cell_names = [f"c{j + 1:04d}" for j in range(c)]
    return SimOutput(
        truth=CountMatrix.from_dense(truth, gene_names, cell_names),
        observed=CountMatrix.from_dense(observed, gene_names, cell_names),
        labels=labels.astype(np.int64),
        dropout_mask_true=dropped,
        config=config,
    )


def calibrate_dropout(config: SimConfig, target_sparsity: float, tol: float = 0.02, max_steps: int = 40) -> SimConfig:
    """Bisection on ``dropout_mid`` until the observed zero fraction hits the target."""
    if not 0.0 < target_sparsity < 1.0:
        raise ConfigError(f"target sparsity {target_sparsity} outside (0, 1)")
    means, _ = _mean_matrix(config)
    truth_zero_frac = simulate(
        dataclasses.replace(config, dropout_mid=-1e6)
    ).observed.zero_fraction()
    if truth_zero_frac >= target_sparsity:
        raise UnreachableTargetError(
            f"intrinsic zero fraction {truth_zero_frac:.4f} already >= target {target_sparsity}"
        )

    log_means = np.log2(means + 1.0)
    span = 50.0 / abs(config.dropout_shape)
    lo = float(log_means.min()) - span
    hi = float(log_means.max()) + span
    best_mid = None
    best_gap = np.inf
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        sparsity = simulate(dataclasses.replace(config, dropout_mid=mid)).observed.zero_fraction()
        gap = abs(sparsity - target_sparsity)
        if gap < best_gap:
            best_gap, best_mid = gap, mid
        if gap < tol:
            break
        if sparsity < target_sparsity:
            lo = mid
        else:
            hi = mid
    return dataclasses.replace(config, dropout_mid=best_mid)
