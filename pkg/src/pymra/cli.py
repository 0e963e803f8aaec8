"""Batch front end: ``pymra CONFIG [--workers P] [--lanes L]``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter

import numpy as np

from pymra.dataio import (
    Config,
    ObservationSet,
    PredictionResults,
    deduplicate,
    parse_config,
    read_observations,
    resolve_prediction_locations,
    write_predictions,
)
from pymra.errors import ConfigError, FormatError, NumericalError, StructureError
from pymra.executor import estimate_memory, run_parallel
from pymra.executor.transport import TransportError
from pymra.kernel import CovarianceParams
from pymra.optimize import OptimizationProblem, maximize_likelihood
from pymra.partition import PartitionTree, build_tree, structure_report

log = logging.getLogger("pymra")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5
EXIT_STRUCTURE = 6
EXIT_RUNTIME = 7

STRUCTURE_FILE = "structure_information.txt"


@dataclass
class RunReport:
    mode: str
    workers: int
    lanes: int
    timings: dict = field(default_factory=dict)
    n_read: int = 0
    n_duplicates: int = 0
    n_nan: int = 0
    n_eliminated: int = 0
    loglik: float | None = None
    loglik_without_constant: float | None = None
    n_predictions: int = 0
    optimum: dict | None = None
    outputs: list = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"mode = {self.mode}", f"workers = {self.workers}", f"lanes = {self.lanes}"]
        out.append(f"observations read = {self.n_read}")
        out.append(f"duplicates dropped = {self.n_duplicates}")
        out.append(f"NaN-valued rows = {self.n_nan}")
        out.append(f"observations eliminated at knots = {self.n_eliminated}")
        if self.loglik is not None:
            out.append(f"loglik = {self.loglik:.17g}")
            out.append(f"loglik without constant = {self.loglik_without_constant:.17g}")
        if self.mode == "prediction":
            out.append(f"predictions = {self.n_predictions}")
        if self.optimum is not None:
            out.append("optimum = " + " ".join(f"{k}={v:.10g}" for k, v in self.optimum.items()))
        for path in self.outputs:
            out.append(f"wrote {path}")
        for phase, secs in self.timings.items():
            out.append(f"time {phase} = {secs:.6f} s")
        return out


def _timer(report: RunReport):
    @contextmanager
    def phase(name: str):
        t0 = perf_counter()
        try:
            yield
        finally:
            report.timings[name] = report.timings.get(name, 0.0) + perf_counter() - t0

    return phase


def print_detail(tree: PartitionTree, data: ObservationSet, flag: bool, n_read: int | None = None, dropped: int = 0):
    """Log a description of the data and the structure built over it."""
    if not flag:
        return
    log.info("data extent: lon [%.10g, %.10g], lat [%.10g, %.10g]", data.lon.min(), data.lon.max(), data.lat.min(), data.lat.max())
    if n_read is not None:
        log.info("observations: %d read, %d after removing %d duplicates", n_read, data.n, dropped)
    log.info("observations eliminated at pre-finest knots: %d", len(tree.eliminated))
    log.info("J = %d, M = %d, r = %d, r_hat = %d", tree.J, tree.M, tree.r, tree.r_hat)
    for m in range(1, tree.M + 1):
        log.info("level %d: %d regions", m, len(tree.by_level[m]))
    counts = tree.finest_counts()
    log.info(
        "finest-level observations per region: min %d, mean %.1f, max %d, empty regions %d",
        counts.min(),
        counts.mean(),
        counts.max(),
        int(np.sum(counts == 0)),
    )
    log.info("moment-block memory bound: %.4g GiB", estimate_memory(tree.J, tree.M, tree.r_hat))


def _params(cfg: Config) -> CovarianceParams:
    return CovarianceParams(cfg.ALPHA, cfg.BETA, cfg.TAU)


def execute(cfg: Config, workers: int = 1, lanes: int = 1, transport: str = "thread", outdir=".") -> RunReport:
    """Run the configured calculation and return its report."""
    report = RunReport(cfg.CALCULATION_MODE, workers, lanes)
    timer = _timer(report)
    t_start = perf_counter()
    with timer("load"):
        data = read_observations(cfg.DATA_FILE_NAME)
    report.n_read = data.n
    if cfg.ELIMINATION_DUPLICATES_FLAG:
        with timer("dedup"):
            data, report.n_duplicates = deduplicate(data)
        if report.n_duplicates:
            log.info("dropped %d duplicate locations", report.n_duplicates)
    report.n_nan = int(np.sum(np.isnan(data.value)))
    with timer("build"):
        tree = build_tree(data, cfg.NUM_PARTITIONS_J, cfg.NUM_KNOTS_r, cfg.NUM_LEVELS_M, cfg.OFFSET)
    report.n_eliminated = len(tree.eliminated)
    print_detail(tree, data, cfg.PRINT_DETAIL_FLAG, report.n_read, report.n_duplicates)

    mode = cfg.CALCULATION_MODE
    if mode == "build_structure_only":
        path = structure_report(tree, Path(outdir) / STRUCTURE_FILE)
        log.info("structure with %d regions written to %s", tree.n_regions, path)
        report.outputs.append(str(path))
    else:
        if report.n_nan and mode in ("likelihood", "optimization"):
            log.warning("%d NaN-valued observations are excluded from the likelihood", report.n_nan)
        with _spill_dir(cfg) as spill:
            if mode == "likelihood":
                res = run_parallel(
                    "likelihood", tree, _params(cfg), data.value, workers, cfg.DYNAMIC_SCHEDULE_FLAG, transport, lanes, spill
                )
                _merge_timings(report, res)
                report.loglik, report.loglik_without_constant = res.loglik, res.loglik_without_constant
                log.info("loglik = %.17g (without constant %.17g)", res.loglik, res.loglik_without_constant)
            elif mode == "prediction":
                _prediction(cfg, data, tree, workers, lanes, transport, spill, report, timer)
            elif mode == "optimization":
                with timer("optimize"):
                    _optimization(cfg, data, tree, workers, lanes, transport, spill, report)
            else:  # parse_config rejects anything else
                raise ConfigError(f"unknown calculation mode {mode!r}", key="CALCULATION_MODE")
    report.timings["total"] = perf_counter() - t_start
    return report


@contextmanager
def _spill_dir(cfg: Config):
    """Temporary spill directory under TMP_DIRECTORY when SAVE_TO_DISK_FLAG is set."""
    if not cfg.SAVE_TO_DISK_FLAG:
        yield None
        return
    base = Path(cfg.TMP_DIRECTORY)
    if not base.is_dir():
        raise OSError(f"TMP_DIRECTORY {base} is not a directory")
    with tempfile.TemporaryDirectory(prefix="pymra_", dir=base) as name:
        yield name


def _merge_timings(report: RunReport, res) -> None:
    for phase in ("prior", "posterior", "predict"):
        if any(phase in t for t in res.timings):
            report.timings[phase] = report.timings.get(phase, 0.0) + res.phase_time(phase)


def _prediction(cfg, data, tree, workers, lanes, transport, spill, report, timer) -> None:
    locs = resolve_prediction_locations(cfg.PREDICTION_LOCATION_MODE, data, cfg.PREDICTION_LOCATION_FILE)
    if len(locs) == 0:
        log.warning("no prediction locations for PREDICTION_LOCATION_MODE = %s", cfg.PREDICTION_LOCATION_MODE)
    res = run_parallel(
        "prediction", tree, _params(cfg), data.value, workers, cfg.DYNAMIC_SCHEDULE_FLAG, transport, lanes, spill, locs
    )
    _merge_timings(report, res)
    report.loglik, report.loglik_without_constant = res.loglik, res.loglik_without_constant
    report.n_predictions = int(sum(len(wp.index) for wp in res.predictions))
    if cfg.DUMP_PREDICTION_RESULTS_FLAG:
        with timer("write"):
            for w, wp in enumerate(res.predictions):
                q = locs[wp.index]
                part = PredictionResults(q[:, 0].copy(), q[:, 1].copy(), wp.mean, wp.variance)
                try:
                    path = write_predictions(cfg.PREDICTION_RESULTS_FILE_NAME, w, part)
                except OSError as exc:
                    raise OSError(f"cannot write prediction results for worker {w}: {exc}") from exc
                report.outputs.append(str(path))
    mean, var = res.gathered_predictions(len(locs))
    if len(locs):
        log.info(
            "prediction means in [%.6g, %.6g], variances in [%.6g, %.6g]",
            np.nanmin(mean) if np.any(np.isfinite(mean)) else np.nan,
            np.nanmax(mean) if np.any(np.isfinite(mean)) else np.nan,
            np.nanmin(var) if np.any(np.isfinite(var)) else np.nan,
            np.nanmax(var) if np.any(np.isfinite(var)) else np.nan,
        )


def _optimization(cfg, data, tree, workers, lanes, transport, spill, report) -> None:
    def objective(x):
        res = run_parallel(
            "likelihood", tree, CovarianceParams(*x), data.value, workers, cfg.DYNAMIC_SCHEDULE_FLAG, transport, lanes, spill
        )
        return res.loglik

    names = ("ALPHA", "BETA", "TAU")
    problem = OptimizationProblem(
        objective,
        [getattr(cfg, f"{n}_LOWER_BOUND") for n in names],
        [getattr(cfg, f"{n}_UPPER_BOUND") for n in names],
        [getattr(cfg, f"{n}_INITIAL_GUESS") for n in names],
        cfg.MAX_ITERATIONS,
    )
    result = maximize_likelihood(problem)
    report.optimum = dict(zip(("alpha", "beta", "tau"), (float(v) for v in result.x)))
    report.loglik = result.loglik
    report.loglik_without_constant = result.loglik + 0.5 * tree.n_obs * np.log(2.0 * np.pi)
    log.info("optimum after %d evaluations: %s", result.evaluations, report.optimum)


def write_timing_csv(path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "seconds"])
        for phase, secs in report.timings.items():
            writer.writerow([phase, f"{secs:.9f}"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pymra", description="Multi-resolution approximation of spatial Gaussian processes.")
    parser.add_argument("config", help="KEY = VALUE parameter file")
    parser.add_argument("-p", "--workers", type=int, default=1, help="number of workers (default 1)")
    parser.add_argument("-l", "--lanes", type=int, default=None, help="data-parallel lanes per worker (default: available cores)")
    parser.add_argument("--transport", choices=("thread", "process"), default="thread", help="worker transport")
    parser.add_argument("--output-dir", default=".", help=f"directory for {STRUCTURE_FILE}")
    parser.add_argument("--timing-csv", default=None, help="write per-phase wall times to this CSV file")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return parser


def _available_lanes() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not available on every platform
        return os.cpu_count() or 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.workers < 1:
        log.error("--workers must be at least 1")
        return EXIT_CONFIG
    lanes = args.lanes if args.lanes is not None else _available_lanes()
    if lanes < 1:
        log.error("--lanes must be at least 1")
        return EXIT_CONFIG
    try:
        cfg = parse_config(args.config)
        report = execute(cfg, args.workers, lanes, args.transport, args.output_dir)
        if args.timing_csv:
            write_timing_csv(args.timing_csv, report)
    except ConfigError as exc:
        log.error("configuration error in %s: %s", args.config, exc)
        return EXIT_CONFIG
    except FormatError as exc:
        log.error("format error: %s", exc)
        return EXIT_FORMAT
    except NumericalError as exc:
        log.error("numerical error: %s", exc)
        return EXIT_NUMERICAL
    except StructureError as exc:
        log.error("structure error: %s", exc)
        return EXIT_STRUCTURE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except TransportError as exc:
        log.error("worker failure: %s", exc)
        return EXIT_RUNTIME
    for line in report.lines():
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
