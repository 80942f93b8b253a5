"""Iterative forest imputation restricted to flagged entries.

The loop follows the classic iterative-forest recipe with one deliberate
twist: within an iteration every gene's forest reads the *previous*
iterate (Jacobi update), so results do not depend on gene visiting order
or on how work is scheduled across processes.

Per iteration, for each gene with flagged entries (visited in ascending
order of flagged count), a forest regresses that gene on all others over
the cells where the gene is not flagged, then overwrites the flagged cells
with predictions.  The loop stops when the normalized change on flagged
entries increases, when mean out-of-bag error stops improving, or at the
iteration cap, whichever fires first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from ._rng import DOMAIN_FOREST
from .errors import MaskShapeError
from .forest import ForestConfig, train_forest
from .matrix_io import CountMatrix
from .zinb import DropoutMask

STOP_DELTA_INCREASED = "delta_increased"
STOP_OOB_STALLED = "oob_stalled"
STOP_MAX_ITERATIONS = "max_iterations"
STOP_EMPTY_MASK = "empty_mask"

OOB_STALL_TOL = 1e-4


@dataclass
class ImputationResult:
    imputed: CountMatrix
    deltas: list[float]
    oob_trace: list[float]
    iterations_run: int
    stop_reason: str
    iterates: list[np.ndarray] = field(default_factory=list)


def mean_initialize(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill flagged entries with the gene's mean over nonzero observations.

    Genes with no nonzero observations initialize to 0.
    """
    y = x.copy()
    for g in np.flatnonzero(mask.any(axis=1)):
        row = x[g]
        nz = row[row > 0]
        y[g, mask[g]] = nz.mean() if nz.size else 0.0
    return y


def _masked_delta(y_new: np.ndarray, y_old: np.ndarray, mask: np.ndarray) -> float:
    num = float(np.linalg.norm((y_new - y_old)[mask]))
    den = float(np.linalg.norm(y_old[mask]))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def _gene_pass(
    y_prev_t: np.ndarray,
    genes: np.ndarray,
    mask_t: np.ndarray,
    config: ForestConfig,
) -> list[tuple[int, np.ndarray, float]]:
    """Train/predict for a chunk of genes against the shared snapshot.

    ``y_prev_t`` and ``mask_t`` are cells x genes.  Returns
    (gene, predictions over flagged cells, oob_error) triples.
    """
    n_genes = y_prev_t.shape[1]
    out = []
    for g in genes:
        flagged = mask_t[:, g]
        train_rows = np.flatnonzero(~flagged)
        if train_rows.size < 2:
            # nothing to learn from; keep the initialized values
            out.append((int(g), y_prev_t[flagged, g].copy(), None))
            continue
        features = np.concatenate(
            (np.arange(g, dtype=np.int64), np.arange(g + 1, n_genes, dtype=np.int64))
        )
        # bootstraps are shared across iterations (stream keyed on gene and
        # tree only) so the OOB trace compares like against like; fresh
        # resampling each pass would drown the convergence signal in noise
        forest = train_forest(
            y_prev_t[train_rows],
            y_prev_t[train_rows, g],
            config,
            rng_stream=(DOMAIN_FOREST, int(g)),
            feature_subset=features,
            response_id=int(g),
        )
        preds = np.zeros(int(flagged.sum()))
        rows = y_prev_t[flagged]
        for tree in forest.trees:
            preds += tree.predict(rows)
        preds /= len(forest.trees)
        out.append((int(g), preds, forest.oob_error))
    return out


def impute(
    x: CountMatrix,
    mask: DropoutMask | np.ndarray,
    config: ForestConfig | None = None,
    *,
    n_jobs: int = 1,
    winsorize: bool = False,
    keep_iterates: bool = False,
) -> ImputationResult:
    """Impute flagged zeros of ``x``; all other entries pass through untouched."""
    config = config or ForestConfig()
    flags = mask.mask if isinstance(mask, DropoutMask) else np.asarray(mask, dtype=bool)
    if flags.shape != (x.n_genes, x.n_cells):
        raise MaskShapeError(f"mask {flags.shape} for matrix {(x.n_genes, x.n_cells)}")
    dense = x.to_dense()
    if np.any(dense[flags] != 0):
        raise ValueError("mask flags a nonzero entry")

    if not flags.any():
        return ImputationResult(
            imputed=CountMatrix(x.values.copy(), list(x.gene_names), list(x.cell_names)),
            deltas=[],
            oob_trace=[],
            iterations_run=0,
            stop_reason=STOP_EMPTY_MASK,
        )

    integral_input = bool(np.all(dense == np.rint(dense)))

    y = mean_initialize(dense, flags)
    masked_counts = flags.sum(axis=1)
    trainable = np.flatnonzero((masked_counts > 0) & dense.any(axis=1))
    gene_order = trainable[np.lexsort((trainable, masked_counts[trainable]))]

    y_t = np.ascontiguousarray(y.T)
    mask_t = np.ascontiguousarray(flags.T)

    deltas: list[float] = []
    oob_trace: list[float] = []
    iterates: list[np.ndarray] = [y_t.T.copy()] if keep_iterates else []
    stop_reason = STOP_MAX_ITERATIONS
    final_t = y_t
    iterations = 0

    for it in range(1, config.max_iterations + 1):
        if n_jobs == 1 or gene_order.size < 8:
            results = _gene_pass(y_t, gene_order, mask_t, config)
        else:
            chunks = np.array_split(gene_order, min(4 * n_jobs, gene_order.size))
            parts = Parallel(n_jobs=n_jobs, backend="loky")(
                delayed(_gene_pass)(y_t, chunk, mask_t, config)
                for chunk in chunks
                if chunk.size
            )
            results = [r for part in parts for r in part]
        # aggregate in gene order so float sums match for any n_jobs
        results.sort(key=lambda r: r[0])

        y_next = y_t.copy()
        oobs = []
        for g, preds, oob in results:
            y_next[mask_t[:, g], g] = preds
            if oob is not None:
                oobs.append(oob)

        iterations = it
        deltas.append(_masked_delta(y_next.T, y_t.T, flags))
        oob_trace.append(float(np.mean(oobs)) if oobs else 0.0)
        if keep_iterates:
            iterates.append(y_next.T.copy())

        if len(deltas) >= 2 and deltas[-1] > deltas[-2]:
            stop_reason = STOP_DELTA_INCREASED
            final_t = y_t  # revert to the iterate before divergence
            break
        final_t = y_next
        if len(oob_trace) >= 2 and oob_trace[-2] - oob_trace[-1] <= OOB_STALL_TOL:
            stop_reason = STOP_OOB_STALLED
            break
        y_t = y_next

    out = final_t.T.copy()
    flat = out[flags]
    np.maximum(flat, 0.0, out=flat)
    if winsorize:
        gene_max = dense.max(axis=1)
        cap = np.repeat(gene_max, flags.sum(axis=1))
        np.minimum(flat, cap, out=flat)
    if integral_input:
        flat = np.round(flat)
    out[flags] = flat
    out[~flags] = dense[~flags]

    imputed = CountMatrix.from_dense(out, list(x.gene_names), list(x.cell_names))
    return ImputationResult(
        imputed=imputed,
        deltas=deltas,
        oob_trace=oob_trace,
        iterations_run=iterations,
        stop_reason=stop_reason,
        iterates=iterates,
    )
