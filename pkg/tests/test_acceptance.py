"""Acceptance suite: one test per release criterion, one printed verdict line each.

The imputation-quality criteria run the full desk-scale protocol: a
1000 x 800 three-group simulation calibrated to 80% +/- 2% observed zeros,
five fixed seeds, library defaults (ntree=10, maxiter=2).  The simulation
uses a well-separated, small-count parameterization so that detection
budgets are non-trivial and group structure is clearly recoverable.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines.
"""

import dataclasses
import time
from contextlib import contextmanager

import numpy as np
import pytest

from dropforest._rng import child_rng
from dropforest.cli import main as cli_main
from dropforest.forest import ForestConfig, predict, train_forest
from dropforest.impute import impute, mean_initialize
from dropforest.matrix_io import CountMatrix, normalize
from dropforest.metrics import ari, kmeans, nmi, pca
from dropforest.simulate import SimConfig, calibrate_dropout, simulate
from dropforest.zinb import ZinbFit, detect, dropout_posterior, fit_zinb

from test_forest import cart_oracle_predict
from test_metrics import ari_pair_oracle, set_partitions

N_JOBS = 4

ACCEPTANCE_SIM = SimConfig(
    n_genes=1000,
    n_cells=800,
    group_probs=(0.20, 0.35, 0.45),
    libsize_mu=7.0,
    de_prob=0.3,
    de_factor_sd=0.8,
    dispersion=0.15,
)


@contextmanager
def verdict(number: int, description: str):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number}: FAIL - {description}")
        raise
    print(f"ACCEPTANCE {number}: PASS - {description} ({time.perf_counter() - t0:.1f}s)")


@pytest.fixture(scope="module")
def pipeline_runs():
    """Five seeded end-to-end runs of the desk-scale protocol."""
    runs = []
    for seed in range(5):
        cfg = dataclasses.replace(ACCEPTANCE_SIM, seed=seed)
        cal = calibrate_dropout(cfg, 0.80)
        out = simulate(cal)
        mask, _ = detect(out.observed, n_jobs=N_JOBS)
        truth = out.truth.to_dense()
        observed = out.observed.to_dense()
        init = mean_initialize(observed, mask.mask)
        flags = mask.mask
        result = impute(
            out.observed,
            mask,
            ForestConfig(seed=seed),
            n_jobs=N_JOBS,
            keep_iterates=True,
        )
        imputed = result.imputed.to_dense()

        # recompute the convergence statistic from the stored snapshots
        delta_err = 0.0
        for t in range(1, len(result.iterates)):
            prev, cur = result.iterates[t - 1], result.iterates[t]
            den = float(np.linalg.norm(prev[flags]))
            expect = float(np.linalg.norm((cur - prev)[flags])) / den if den else 0.0
            delta_err = max(delta_err, abs(expect - result.deltas[t - 1]))

        def ari_for(matrix):
            normed, _ = normalize(matrix, "library_size_log2")
            part, _ = kmeans(pca(normed.to_dense().T, 20), 3, seed=seed)
            return float(ari(part.labels, out.labels))

        runs.append(
            {
                "seed": seed,
                "sparsity": out.observed.zero_fraction(),
                "group_sizes": np.bincount(out.labels, minlength=3),
                "n_flagged": mask.n_flagged,
                "scope_ok": bool(
                    np.array_equal(imputed[~flags], observed[~flags])
                    and imputed.min() >= 0
                ),
                "baseline_rmse": float(np.sqrt(np.mean((init[flags] - truth[flags]) ** 2))),
                "rf_rmse": float(np.sqrt(np.mean((imputed[flags] - truth[flags]) ** 2))),
                "ari_before": ari_for(out.observed),
                "ari_after": ari_for(result.imputed),
                "deltas": result.deltas,
                "oob_trace": result.oob_trace,
                "stop_reason": result.stop_reason,
                "delta_recompute_err": delta_err,
            }
        )
    return runs


def test_c1_dropout_posterior_formula():
    with verdict(1, "dropout-posterior formula exact at the reference points"):
        assert dropout_posterior(ZinbFit(0.0, 2.0, 0.5, 0.0, 0, True)) == 1.0
        assert dropout_posterior(ZinbFit(1.0, 2.0, 0.5, 0.0, 0, True)) == 0.0
        d = dropout_posterior(ZinbFit(0.5, 1.0, 0.5, 0.0, 0, True))
        assert abs(d - 1.0 / 3.0) <= 1e-12


def test_c2_em_recovery():
    with verdict(2, "EM recovers theta=0.3 within 0.1 and ascends every step"):
        errs = []
        for seed in range(50):
            rng = child_rng(4242, seed)
            n = 500
            counts = rng.negative_binomial(2, 1 - 5.0 / 7.0, size=n).astype(float)
            counts[rng.random(n) < 0.3] = 0.0
            fit = fit_zinb(counts)
            errs.append(abs(fit.theta - 0.3))
            trace = np.asarray(fit.ll_trace)
            assert np.all(np.diff(trace) >= -1e-9)
        assert float(np.mean(errs)) <= 0.1


def test_c3_metric_oracles():
    with verdict(3, "ARI matches brute-force pair counting; NMI reference points"):
        # exhaustive over all partition pairs up to n=6, dense random
        # coverage at n=7 and 8 (full n=8 enumeration is out of budget)
        for n in range(2, 7):
            parts = [list(p) for p in set_partitions(n)]
            for u in parts:
                for v in parts:
                    assert abs(ari(u, v) - ari_pair_oracle(u, v)) <= 1e-12
        rng = child_rng(77, 0)
        for n in (7, 8):
            for _ in range(6000):
                u = rng.integers(0, n, n).tolist()
                v = rng.integers(0, n, n).tolist()
                assert abs(ari(u, v) - ari_pair_oracle(u, v)) <= 1e-12
        assert abs(nmi([0, 0, 1, 1], [1, 1, 0, 0]) - 1.0) <= 1e-12
        assert abs(nmi([0, 1, 2, 0, 1, 2], [2, 0, 1, 2, 0, 1]) - 1.0) <= 1e-12
        assert abs(nmi([0, 0, 1, 1], [0, 1, 0, 1])) <= 1e-12
        assert abs(ari([0, 0, 1, 1], [0, 1, 0, 1]) - (-0.5)) <= 1e-12


def test_c4_mask_safety_and_scope():
    with verdict(4, "flags are zeros, budgets exact, imputation in scope, nonnegative"):
        for seed in range(20):
            rng = child_rng(1000 + seed, 0)
            g, c = 40, 30
            dense = np.where(
                rng.random((g, c)) < 0.5, rng.integers(1, 25, (g, c)), 0
            ).astype(float)
            m = CountMatrix.from_dense(dense)
            mask, _ = detect(m)
            assert not np.any(mask.mask & (dense != 0))
            zeros_per_cell = (dense == 0).sum(axis=0)
            assert np.array_equal(
                mask.mask.sum(axis=0), np.minimum(mask.targets, zeros_per_cell)
            )
            result = impute(m, mask, ForestConfig(ntree=5, seed=seed))
            out = result.imputed.to_dense()
            assert np.array_equal(out[~mask.mask], dense[~mask.mask])
            assert out.min() >= 0


def test_c5_forest_correctness():
    with verdict(5, "tree interpolation, CART-oracle equivalence, constant OOB"):
        rng = child_rng(5150, 0)
        x = rng.random((48, 6))
        y = rng.random(48)
        interp = train_forest(
            x, y, ForestConfig(ntree=1, mtry=6, min_node_size=1), rng_stream=(1,), bootstrap=False
        )
        assert np.array_equal(predict(interp, x), y)

        for n, p, min_node in ((20, 3, 1), (35, 5, 5), (50, 4, 3)):
            rng = child_rng(5151, n, p)
            xt = rng.random((n, p))
            yt = rng.random(n)
            probe = rng.random((20, p))
            f = train_forest(
                xt, yt, ForestConfig(ntree=1, mtry=p, min_node_size=min_node),
                rng_stream=(0,), bootstrap=False,
            )
            assert np.allclose(
                predict(f, probe), cart_oracle_predict(xt, yt, probe, min_node), atol=1e-12
            )

        const = train_forest(x, np.full(48, 7.7), ForestConfig(ntree=10), rng_stream=(2,))
        assert const.oob_error == 0.0


def test_c6_imputation_quality(pipeline_runs):
    with verdict(6, "median masked RMSE >=20% under baseline; ARI not degraded"):
        ratios = [r["rf_rmse"] / r["baseline_rmse"] for r in pipeline_runs]
        diffs = [r["ari_after"] - r["ari_before"] for r in pipeline_runs]
        assert all(r["scope_ok"] for r in pipeline_runs)
        assert all(r["n_flagged"] > 0 for r in pipeline_runs)
        assert float(np.median(ratios)) <= 0.80
        assert float(np.median(diffs)) >= 0.0
        assert float(np.median([r["ari_after"] for r in pipeline_runs])) >= float(
            np.median([r["ari_before"] for r in pipeline_runs])
        )


def test_c7_stopping_rule_fidelity(pipeline_runs):
    with verdict(7, "delta trace recomputes to 1e-12; stop reasons recorded; OOB eases"):
        for r in pipeline_runs:
            assert r["delta_recompute_err"] <= 1e-12
            assert r["stop_reason"] in ("delta_increased", "oob_stalled", "max_iterations")
            if r["stop_reason"] == "delta_increased":
                assert r["deltas"][-1] > r["deltas"][-2]
        oob_down = sum(
            1 for r in pipeline_runs if len(r["oob_trace"]) >= 2 and r["oob_trace"][1] <= r["oob_trace"][0]
        )
        assert oob_down >= 4


def test_c8_determinism_across_threads(tmp_path):
    with verdict(8, "1-thread and 8-thread pipelines byte-identical"):
        cfg = tmp_path / "config.ini"
        cfg.write_text(
            "[simulate]\nn_genes = 80\nn_cells = 60\nlibsize_mu = 6.0\n"
            "de_prob = 0.3\nde_factor_sd = 0.8\ndispersion = 0.3\n"
            "target_sparsity = 0.7\n"
        )
        outs = []
        for tag, threads in (("t1", "1"), ("t8", "8")):
            out = tmp_path / tag
            code = cli_main([
                "pipeline", "--out-dir", str(out), "--seed", "17",
                "--config", str(cfg), "--threads", threads,
            ])
            assert code == 0
            outs.append(out)
        a, b = outs
        assert (a / "imputed.mtx").read_bytes() == (b / "imputed.mtx").read_bytes()
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        assert (a / "mask.mtx").read_bytes() == (b / "mask.mtx").read_bytes()


def test_c9_simulator_calibration(pipeline_runs):
    with verdict(9, "calibration hits 80% +/- 2%; group sizes within 3 sigma"):
        for r in pipeline_runs:
            assert abs(r["sparsity"] - 0.80) <= 0.02
            for i, p in enumerate((0.20, 0.35, 0.45)):
                sigma = np.sqrt(800 * p * (1 - p))
                assert abs(r["group_sizes"][i] - 800 * p) <= 3 * sigma
        # the default parameterization calibrates too
        cal = calibrate_dropout(SimConfig(seed=0), 0.80)
        assert abs(simulate(cal).observed.zero_fraction() - 0.80) <= 0.02
