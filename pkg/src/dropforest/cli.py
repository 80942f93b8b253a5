"""Batch command-line front end.

Subcommands wire the pipeline stages: ``simulate``, ``detect``, ``impute``,
``eval``, and the end-to-end ``pipeline``.  Configuration comes from an INI
file with one section per stage; command-line flags override file values
and the fully resolved configuration is echoed next to every run.

Reports are deterministic JSON (sorted keys, no timestamps); wall-clock
timings go to a ``timings.txt`` sidecar so two runs of the same seed are
byte-identical regardless of thread count.  Progress goes to stderr; no
data is ever written to stdout.

Exit codes: 0 success, 2 configuration, 3 I/O or parsing, 4 numeric.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matrix_io
from .errors import ConfigError, DropforestError, ParseError
from .forest import ForestConfig
from .impute import impute, mean_initialize
from .matrix_io import CountMatrix, read_labels, read_mask, read_matrix, write_labels, write_mask, write_matrix
from .metrics import ari, elbow_curve, kmeans, nmi, pca
from .simulate import SimConfig, calibrate_dropout, simulate
from .zinb import StratumLabels, detect

THREADS_ENV_VAR = "DROPFOREST_THREADS"

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0},
    "simulate": {
        "n_genes": 1000,
        "n_cells": 800,
        "group_probs": "0.20,0.35,0.45",
        "mean_shape": 0.6,
        "mean_rate": 0.3,
        "de_prob": 0.1,
        "de_factor_sd": 0.4,
        "libsize_mu": 11.0,
        "libsize_sd": 0.2,
        "dispersion": 0.1,
        "dropout_mid": 0.0,
        "dropout_shape": -1.0,
        "target_sparsity": "",
    },
    "detect": {"strata_file": ""},
    "impute": {
        "ntree": 10,
        "mtry": "sqrt_p",
        "min_node_size": 5,
        "maxiter": 2,
        "winsorize": False,
    },
    "eval": {
        "k": 3,
        "pca_components": 20,
        "k_min": 2,
        "k_max": 10,
        "normalize": "library_size_log2",
    },
    "pipeline": {"input_matrix": "", "input_labels": "", "input_format": ""},
}


@dataclass
class RunReport:
    command: str
    config_echo: dict
    seed: int
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    artifact_paths: list = field(default_factory=list)

    def to_json(self) -> str:
        # timings are wall-clock and live in a sidecar; everything here is
        # reproducible byte-for-byte from config + inputs + seed
        doc = {
            "command": self.command,
            "config_echo": self.config_echo,
            "seed": self.seed,
            "metrics": self.metrics,
            "artifact_paths": sorted(self.artifact_paths),
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


class _Stopwatch:
    def __init__(self) -> None:
        self.laps: dict[str, float] = {}

    def time(self, stage: str):
        return _Lap(self, stage)


class _Lap:
    def __init__(self, watch: _Stopwatch, stage: str) -> None:
        self.watch = watch
        self.stage = stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        _progress(f"{self.stage}: start")
        return self

    def __exit__(self, *exc):
        self.watch.laps[self.stage] = time.perf_counter() - self.t0
        _progress(f"{self.stage}: done in {self.watch.laps[self.stage]:.2f}s")
        return False


def _progress(msg: str) -> None:
    print(f"dropforest: {msg}", file=sys.stderr)


def _coerce(section: str, key: str, raw: str):
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    default = DEFAULTS[section][key]
    if isinstance(default, bool):
        lowered = str(raw).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected a number, got {raw!r}") from None
    return str(raw)


def load_config(path: str | None, overrides: dict[str, dict[str, object]] | None = None) -> dict:
    """Defaults, then config file, then flag overrides."""
    resolved = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config file {path}: {exc}") from None
        for section in parser.sections():
            if section not in resolved:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                resolved[section][key] = _coerce(section, key, raw)
    for section, vals in (overrides or {}).items():
        for key, val in vals.items():
            if val is not None:
                resolved[section][key] = val
    return resolved


def write_resolved_config(resolved: dict, path: Path) -> None:
    parser = configparser.ConfigParser()
    for section in sorted(resolved):
        parser[section] = {k: str(v) for k, v in sorted(resolved[section].items())}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def _sim_config(resolved: dict, seed: int) -> SimConfig:
    s = resolved["simulate"]
    try:
        probs = tuple(float(tok) for tok in str(s["group_probs"]).split(","))
    except ValueError:
        raise ConfigError(f"unparseable group_probs {s['group_probs']!r}") from None
    return SimConfig(
        n_genes=int(s["n_genes"]),
        n_cells=int(s["n_cells"]),
        group_probs=probs,
        mean_shape=float(s["mean_shape"]),
        mean_rate=float(s["mean_rate"]),
        de_prob=float(s["de_prob"]),
        de_factor_sd=float(s["de_factor_sd"]),
        libsize_mu=float(s["libsize_mu"]),
        libsize_sd=float(s["libsize_sd"]),
        dispersion=float(s["dispersion"]),
        dropout_mid=float(s["dropout_mid"]),
        dropout_shape=float(s["dropout_shape"]),
        seed=seed,
    )


def _forest_config(resolved: dict, seed: int) -> ForestConfig:
    s = resolved["impute"]
    mtry = s["mtry"]
    if isinstance(mtry, str) and mtry != "sqrt_p":
        try:
            mtry = int(mtry)
        except ValueError:
            raise ConfigError(f"impute.mtry: expected an integer or 'sqrt_p', got {mtry!r}") from None
    try:
        return ForestConfig(
            ntree=int(s["ntree"]),
            mtry=mtry,
            min_node_size=int(s["min_node_size"]),
            max_iterations=int(s["maxiter"]),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _echo(resolved: dict, sections: tuple[str, ...]) -> dict:
    return {sec: {k: v for k, v in sorted(resolved[sec].items())} for sec in sections}


def _write_floats(values, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in values:
            fh.write(f"{float(v)!r}\n")


def _write_timings(watch: _Stopwatch, out_dir: Path) -> None:
    with open(out_dir / "timings.txt", "w", encoding="utf-8") as fh:
        for stage, sec in watch.laps.items():
            fh.write(f"{stage}\t{sec:.3f}\n")


def _finish(report: RunReport, out_dir: Path, watch: _Stopwatch) -> RunReport:
    report.timings = dict(watch.laps)
    report.artifact_paths.append("timings.txt")
    _write_timings(watch, out_dir)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    _progress(f"report written to {out_dir / 'report.json'}")
    return report


# ---------------------------------------------------------------------------
# stage implementations (shared by the standalone commands and the pipeline)
# ---------------------------------------------------------------------------


def _stage_simulate(resolved: dict, seed: int, out_dir: Path, watch: _Stopwatch):
    cfg = _sim_config(resolved, seed)
    target = resolved["simulate"]["target_sparsity"]
    with watch.time("simulate"):
        if target != "":
            cfg = calibrate_dropout(cfg, float(target))
            resolved["simulate"]["dropout_mid"] = cfg.dropout_mid
        out = simulate(cfg)
    write_matrix(out.truth, str(out_dir / "truth.mtx"), "matrix_market")
    write_matrix(out.observed, str(out_dir / "observed.mtx"), "matrix_market")
    write_labels(out.labels, str(out_dir / "labels.txt"))
    return out, ["truth.mtx", "observed.mtx", "labels.txt"]


def _stage_detect(matrix: CountMatrix, strata: StratumLabels | None, out_dir: Path, watch: _Stopwatch, n_jobs: int):
    with watch.time("detect"):
        mask, fits = detect(matrix, strata=strata, n_jobs=n_jobs)
    write_mask(mask.mask, str(out_dir / "mask.mtx"))
    with open(out_dir / "posteriors.txt", "w", encoding="utf-8") as fh:
        for i, j, d in zip(mask.zero_rows, mask.zero_cols, mask.zero_posteriors):
            fh.write(f"{i + 1} {j + 1} {float(d)!r}\n")
    _write_floats(mask.targets, out_dir / "targets.txt")
    n_zeros = int(mask.zero_rows.size)
    stats = {
        "n_zeros": n_zeros,
        "n_flagged": int(mask.n_flagged),
        "flagged_fraction": mask.n_flagged / n_zeros if n_zeros else 0.0,
        "stratified": strata is not None,
    }
    if n_zeros == 0:
        stats["warning"] = "matrix has no zeros; mask is empty"
    return mask, stats, ["mask.mtx", "posteriors.txt", "targets.txt"]


def _stage_impute(matrix: CountMatrix, flags: np.ndarray, fcfg: ForestConfig, winsorize: bool, out_dir: Path, watch: _Stopwatch, n_jobs: int):
    with watch.time("impute"):
        result = impute(matrix, flags, fcfg, n_jobs=n_jobs, winsorize=winsorize)
    write_matrix(result.imputed, str(out_dir / "imputed.mtx"), "matrix_market")
    _write_floats(result.deltas, out_dir / "deltas.txt")
    _write_floats(result.oob_trace, out_dir / "oob_trace.txt")
    stats = {
        "deltas": [float(d) for d in result.deltas],
        "oob_trace": [float(v) for v in result.oob_trace],
        "iterations_run": result.iterations_run,
        "stop_reason": result.stop_reason,
    }
    return result, stats, ["imputed.mtx", "deltas.txt", "oob_trace.txt"]


def _stage_eval(matrix: CountMatrix, labels: np.ndarray, resolved: dict, seed: int, out_dir: Path, watch: _Stopwatch, tag: str = "eval"):
    e = resolved["eval"]
    with watch.time(tag):
        work = matrix
        if e["normalize"] != "none":
            work, _ = matrix_io.normalize(matrix, str(e["normalize"]))
        n_comp = min(int(e["pca_components"]), matrix.n_cells, matrix.n_genes)
        emb = pca(work.to_dense().T, n_comp)
        part, wcss = kmeans(emb, int(e["k"]), seed=seed)
        k_lo, k_hi = int(e["k_min"]), int(e["k_max"])
        curve = elbow_curve(emb, range(k_lo, min(k_hi, matrix.n_cells) + 1), seed=seed)
    with open(out_dir / f"elbow_{tag}.txt", "w", encoding="utf-8") as fh:
        for k, w in curve:
            fh.write(f"{k} {float(w)!r}\n")
    stats = {
        "ari": float(ari(part.labels, labels)),
        "nmi": float(nmi(part.labels, labels)),
        "wcss": float(wcss),
        "k": int(e["k"]),
        "elbow": [[int(k), float(w)] for k, w in curve],
    }
    return stats, [f"elbow_{tag}.txt"]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> RunReport:
    resolved = load_config(args.config, {
        "run": {"seed": args.seed},
        "simulate": {"target_sparsity": args.target_sparsity},
    })
    seed = int(resolved["run"]["seed"])
    out_dir = _prepare_out_dir(args.out_dir)
    watch = _Stopwatch()
    out, artifacts = _stage_simulate(resolved, seed, out_dir, watch)
    write_resolved_config(resolved, out_dir / "resolved_config.ini")
    report = RunReport(
        command="simulate",
        config_echo=_echo(resolved, ("run", "simulate")),
        seed=seed,
        metrics={
            "sparsity": out.observed.zero_fraction(),
            "truth_sparsity": out.truth.zero_fraction(),
            "group_sizes": np.bincount(out.labels, minlength=len(out.config.group_probs)).tolist(),
        },
        artifact_paths=artifacts + ["resolved_config.ini"],
    )
    return _finish(report, out_dir, watch)


def cmd_detect(args) -> RunReport:
    resolved = load_config(args.config, {
        "run": {"seed": args.seed},
        "detect": {"strata_file": args.strata},
    })
    seed = int(resolved["run"]["seed"])
    out_dir = _prepare_out_dir(args.out_dir)
    watch = _Stopwatch()
    with watch.time("load"):
        matrix = read_matrix(args.matrix, args.format or matrix_io.sniff_format(args.matrix))
        strata_file = str(resolved["detect"]["strata_file"])
        strata = StratumLabels.from_labels(read_labels(strata_file)) if strata_file else None
    _, stats, artifacts = _stage_detect(matrix, strata, out_dir, watch, args.threads)
    write_resolved_config(resolved, out_dir / "resolved_config.ini")
    report = RunReport(
        command="detect",
        config_echo=_echo(resolved, ("run", "detect")),
        seed=seed,
        metrics=stats,
        artifact_paths=artifacts + ["resolved_config.ini"],
    )
    return _finish(report, out_dir, watch)


def cmd_impute(args) -> RunReport:
    resolved = load_config(args.config, {
        "run": {"seed": args.seed},
        "impute": {
            "ntree": args.ntree,
            "mtry": args.mtry,
            "min_node_size": args.min_node_size,
            "maxiter": args.maxiter,
            "winsorize": args.winsorize or None,
        },
    })
    seed = int(resolved["run"]["seed"])
    out_dir = _prepare_out_dir(args.out_dir)
    watch = _Stopwatch()
    with watch.time("load"):
        matrix = read_matrix(args.matrix, args.format or matrix_io.sniff_format(args.matrix))
        flags = read_mask(args.mask)
    fcfg = _forest_config(resolved, seed)
    _, stats, artifacts = _stage_impute(
        matrix, flags, fcfg, bool(resolved["impute"]["winsorize"]), out_dir, watch, args.threads
    )
    write_resolved_config(resolved, out_dir / "resolved_config.ini")
    report = RunReport(
        command="impute",
        config_echo=_echo(resolved, ("run", "impute")),
        seed=seed,
        metrics=stats,
        artifact_paths=artifacts + ["resolved_config.ini"],
    )
    return _finish(report, out_dir, watch)


def cmd_eval(args) -> RunReport:
    resolved = load_config(args.config, {
        "run": {"seed": args.seed},
        "eval": {
            "k": args.k,
            "pca_components": args.pca_components,
            "k_min": args.k_min,
            "k_max": args.k_max,
        },
    })
    seed = int(resolved["run"]["seed"])
    out_dir = _prepare_out_dir(args.out_dir)
    watch = _Stopwatch()
    with watch.time("load"):
        matrix = read_matrix(args.matrix, args.format or matrix_io.sniff_format(args.matrix))
        labels = read_labels(args.labels)
    if labels.shape[0] != matrix.n_cells:
        raise ConfigError(f"{labels.shape[0]} labels for {matrix.n_cells} cells")
    stats, artifacts = _stage_eval(matrix, labels, resolved, seed, out_dir, watch)
    write_resolved_config(resolved, out_dir / "resolved_config.ini")
    report = RunReport(
        command="eval",
        config_echo=_echo(resolved, ("run", "eval")),
        seed=seed,
        metrics=stats,
        artifact_paths=artifacts + ["resolved_config.ini"],
    )
    return _finish(report, out_dir, watch)


def cmd_pipeline(args) -> RunReport:
    resolved = load_config(args.config, {
        "run": {"seed": args.seed},
        "simulate": {"target_sparsity": args.target_sparsity},
        "pipeline": {"input_matrix": args.matrix, "input_labels": args.labels},
        "eval": {"k": args.k},
    })
    seed = int(resolved["run"]["seed"])
    out_dir = _prepare_out_dir(args.out_dir)
    watch = _Stopwatch()
    report = RunReport(
        command="pipeline",
        config_echo=_echo(resolved, ("run", "simulate", "detect", "impute", "eval", "pipeline")),
        seed=seed,
    )
    stage = "setup"
    try:
        truth = None
        input_matrix = str(resolved["pipeline"]["input_matrix"])
        if input_matrix:
            stage = "load"
            with watch.time("load"):
                observed = read_matrix(
                    input_matrix,
                    str(resolved["pipeline"]["input_format"]) or matrix_io.sniff_format(input_matrix),
                )
                labels_file = str(resolved["pipeline"]["input_labels"])
                labels = read_labels(labels_file) if labels_file else None
        else:
            stage = "simulate"
            sim, artifacts = _stage_simulate(resolved, seed, out_dir, watch)
            observed, truth, labels = sim.observed, sim.truth, sim.labels
            report.artifact_paths += artifacts
            report.metrics["sparsity"] = observed.zero_fraction()

        stage = "detect"
        mask, det_stats, artifacts = _stage_detect(observed, None, out_dir, watch, args.threads)
        report.metrics.update({f"detect_{k}": v for k, v in det_stats.items()})
        report.artifact_paths += artifacts

        stage = "impute"
        fcfg = _forest_config(resolved, seed)
        result, imp_stats, artifacts = _stage_impute(
            observed, mask.mask, fcfg, bool(resolved["impute"]["winsorize"]), out_dir, watch, args.threads
        )
        report.metrics.update(imp_stats)
        report.artifact_paths += artifacts

        if truth is not None and mask.n_flagged:
            t = truth.to_dense()
            init = mean_initialize(observed.to_dense(), mask.mask)
            imp = result.imputed.to_dense()
            report.metrics["masked_rmse"] = float(
                np.sqrt(np.mean((imp[mask.mask] - t[mask.mask]) ** 2))
            )
            report.metrics["baseline_rmse"] = float(
                np.sqrt(np.mean((init[mask.mask] - t[mask.mask]) ** 2))
            )

        if labels is not None:
            stage = "eval"
            before, artifacts_b = _stage_eval(observed, labels, resolved, seed, out_dir, watch, tag="eval_before")
            after, artifacts_a = _stage_eval(result.imputed, labels, resolved, seed, out_dir, watch, tag="eval_after")
            report.metrics.update(
                {
                    "ari_before": before["ari"],
                    "ari_after": after["ari"],
                    "nmi_before": before["nmi"],
                    "nmi_after": after["nmi"],
                }
            )
            report.artifact_paths += artifacts_b + artifacts_a
    except Exception:
        report.metrics["failed_stage"] = stage
        write_resolved_config(resolved, out_dir / "resolved_config.ini")
        report.artifact_paths.append("resolved_config.ini")
        _finish(report, out_dir, watch)
        raise

    write_resolved_config(resolved, out_dir / "resolved_config.ini")
    report.artifact_paths.append("resolved_config.ini")
    return _finish(report, out_dir, watch)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _prepare_out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR}={raw!r} is not an integer") from None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="master random seed")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker processes; 0 = auto (env {THREADS_ENV_VAR})")
    parser.add_argument("--out-dir", required=True, help="output directory")
    parser.add_argument("--config", default=None, help="INI configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dropforest", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic grouped count matrix")
    _add_common(p)
    p.add_argument("--target-sparsity", type=float, default=None,
                   help="calibrate dropout_mid to this observed zero fraction")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="flag recoverable zeros of a count matrix")
    _add_common(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--format", choices=["matrix_market", "dense_delimited"], default=None)
    p.add_argument("--strata", default=None, help="per-cell integer stratum labels file")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("impute", help="fill flagged entries with forest predictions")
    _add_common(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--mask", required=True, help="pattern Matrix Market mask file")
    p.add_argument("--format", choices=["matrix_market", "dense_delimited"], default=None)
    p.add_argument("--ntree", type=int, default=None)
    p.add_argument("--mtry", default=None)
    p.add_argument("--maxiter", type=int, default=None)
    p.add_argument("--min-node-size", type=int, default=None)
    p.add_argument("--winsorize", action="store_true")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("eval", help="cluster an expression matrix and score against labels")
    _add_common(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--format", choices=["matrix_market", "dense_delimited"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--pca-components", type=int, default=None)
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="simulate (or load), detect, impute, evaluate")
    _add_common(p)
    p.add_argument("--matrix", default=None, help="skip simulation and start from this matrix")
    p.add_argument("--labels", default=None, help="ground-truth labels for evaluation")
    p.add_argument("--target-sparsity", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is None:
            args.threads = _default_threads()
        if args.threads == 0:
            args.threads = os.cpu_count() or 1
        args.func(args)
    except ConfigError as exc:
        _progress(f"configuration error: {exc}")
        return 2
    except (ParseError, OSError) as exc:
        _progress(f"input error: {exc}")
        return 3
    except (DropforestError, ValueError, ArithmeticError) as exc:
        _progress(f"numeric error: {exc}")
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
