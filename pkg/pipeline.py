#!/usr/bin/env python3
"""
pipeline.py — Multi-stage identification pipeline.

Orchestrates Mesh → Simulate → (Bootstrap) → Reconstruct → Evaluate and writes every
artifact a run produces. Each stage wraps failures in PipelineError so the CLI can map
them to an exit code and an actionable hint without string matching.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator

from error_utils import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERICAL,
    ConfigurationError,
    ShapeError,
    classify_numerical_error,
)
from fp_constants import SCHEMA_VERSION
from geometry import DiscreteOperators, SphereMesh, assemble_operators, load_or_build_mesh, mesh_cache_path
from harness import (
    ErrorReport,
    Measurement,
    Scenario,
    apply_scenario_overrides,
    build_problem,
    error_function,
    evaluate,
    generate_measurement,
    ground_truth,
    initial_guess,
    model_mismatch,
    noise_tag,
    save_scenario,
)
from inversion import ForwardProblem, LandweberConfig, ReconstructionRun, bootstrap_run, landweber_run
from log_utils import log_error, log_warning, verbose_log
from model import ParameterCase, write_parameter
from observation import ObservationMode, read_observation_csv, write_observation_csv
from pde import write_state_csv
from version import APP_VERSION, MEASUREMENT_FORMAT, RUN_FORMAT

MEASUREMENT_MANIFEST = "measurement.json"
RUN_MANIFEST = "run.json"
ERROR_REPORT = "error_report.csv"
ERROR_TABLE = "error_table.csv"
RULE_ORDER = ("discrepancy", "best", "final")


# =============================================================================
# STAGES AND ERRORS
# =============================================================================

class PipelineStage(Enum):
    """Pipeline stage identifiers."""
    MESH = "mesh"
    SIMULATE = "simulate"
    BOOTSTRAP = "bootstrap"
    RECONSTRUCT = "reconstruct"
    EVALUATE = "evaluate"
    LADDER = "ladder"


class PipelineError(Exception):
    """Failure of one stage, carrying the stage and the original exception."""
    def __init__(self, stage: PipelineStage, original_error: Exception):
        self.stage = stage
        self.original_error = original_error
        super().__init__(f"Pipeline {stage.value} failed: {original_error}")


@dataclass
class ErrorClassification:
    """Classification of an error for exit codes and user messaging."""
    exit_code: int
    is_numerical: bool
    is_config_error: bool
    is_io_error: bool
    user_message: str                # Human-friendly message for the console
    hint: str | None                 # Actionable hint for the user
    raw_error: str                   # Original error for logging


def classify_error(error: Exception, stage: PipelineStage) -> ErrorClassification:
    """Map any pipeline failure to an exit code, a message and a hint."""
    if isinstance(error, PipelineError):
        return classify_error(error.original_error, error.stage)
    message, hint, exit_code = classify_numerical_error(error)
    return ErrorClassification(
        exit_code=exit_code,
        is_numerical=exit_code == EXIT_NUMERICAL,
        is_config_error=exit_code == EXIT_CONFIG,
        is_io_error=exit_code == EXIT_IO,
        user_message=f"{stage.value.capitalize()}: {message}",
        hint=hint,
        raw_error=str(error),
    )


@contextmanager
def _stage(stage: PipelineStage) -> Iterator[None]:
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        log_error(f"{stage.value} stage failed", exc)
        raise PipelineError(stage, exc) from exc


# =============================================================================
# RESULTS
# =============================================================================

@dataclass
class SimulationResult:
    scenario: Scenario
    measurement: Measurement
    model_mismatch: float
    output_dir: Path
    files: dict[str, Path] = field(default_factory=dict)


@dataclass
class ReconstructionResult:
    run: ReconstructionRun
    bootstrap: ReconstructionRun | None
    report: ErrorReport | None
    output_dir: Path
    noise_level: float | None
    delta: float | None


@dataclass
class EvaluationResult:
    table: Path
    rows: int
    skipped: list[Path] = field(default_factory=list)


@dataclass
class LadderResult:
    runs: list[ReconstructionResult]
    failed: dict[str, str]
    evaluation: EvaluationResult


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def _format_value(value: float | int | None) -> str:
    if value is None:
        return "NA"
    if isinstance(value, int):
        return str(value)
    return f"{value:.10g}"


# =============================================================================
# PIPELINE
# =============================================================================

class FokkerIdPipeline:
    """
    Identification pipeline on the two-grid protocol.

    Stages:
    1. Mesh: build or load the cached icospheres
    2. Simulate: fine-mesh data, interpolated and observed on the coarse mesh, plus noise
    3. Bootstrap: unsmoothed initial-value search (easy-axis case only)
    4. Reconstruct: smoothed Landweber run with the discrepancy principle
    5. Evaluate: relative L2/H1 errors per stopping rule, aggregated into a table

    Meshes and operators are cached per instance; all methods are safe to call from
    several threads at once.
    """

    def __init__(self, overrides: dict | None = None, cache_dir: Path | None = None):
        self.overrides = dict(overrides or {})
        self.config = LandweberConfig.from_overrides(self.overrides)
        self.cache_dir = cache_dir
        self._meshes: dict[int, SphereMesh] = {}
        self._operators: dict[tuple[int, float], DiscreteOperators] = {}
        self._lock = threading.Lock()

    # --- meshes ---

    def build_mesh(self, level: int) -> tuple[SphereMesh, bool, Path]:
        """Build or load one level; returns (mesh, cache_hit, cache_path)."""
        with _stage(PipelineStage.MESH):
            mesh, hit = load_or_build_mesh(level, self.cache_dir)
            verbose_log(f"Mesh level {level}: {len(mesh.triangles)} triangles "
                        f"({'cache hit' if hit else 'built'})")
            with self._lock:
                self._meshes.setdefault(mesh.refinement_level, mesh)
            return mesh, hit, mesh_cache_path(level, self.cache_dir)

    def mesh(self, level: int) -> SphereMesh:
        with self._lock:
            cached = self._meshes.get(level)
        if cached is not None:
            return cached
        return self.build_mesh(level)[0]

    def operators(self, level: int, lam: float) -> DiscreteOperators:
        key = (level, lam)
        with self._lock:
            cached = self._operators.get(key)
        if cached is not None:
            return cached
        operators = assemble_operators(self.mesh(level), lam)
        with self._lock:
            return self._operators.setdefault(key, operators)

    def prepare_scenario(self, scenario: Scenario) -> Scenario:
        return apply_scenario_overrides(scenario, self.overrides)

    def coarse_problem(self, scenario: Scenario) -> ForwardProblem:
        return build_problem(scenario, self.operators(scenario.coarse_level, scenario.constants.lam))

    # --- simulate ---

    def simulate(self, scenario: Scenario, output_dir: Path, dump_state: bool = False) -> SimulationResult:
        """Generate y.csv, y_d<tag>.csv per noise level and the measurement manifest."""
        scenario = self.prepare_scenario(scenario)
        with _stage(PipelineStage.SIMULATE):
            measurement = generate_measurement(scenario, self.mesh)
            mismatch = model_mismatch(scenario, measurement.clean, self.coarse_problem(scenario))
            verbose_log(f"Two-grid model mismatch: {mismatch:.6e}")

            output_dir.mkdir(parents=True, exist_ok=True)
            files = {"clean": output_dir / "y.csv", "scenario": output_dir / "scenario.json"}
            write_observation_csv(files["clean"], measurement.clean)
            save_scenario(files["scenario"], scenario)
            levels = []
            for level, series in measurement.noisy.items():
                path = output_dir / f"y_d{noise_tag(level)}.csv"
                write_observation_csv(path, series)
                files[f"noise_{noise_tag(level)}"] = path
                levels.append({"noise_level": level, "file": path.name, "delta": measurement.deltas[level]})
            if dump_state:
                files["state"] = output_dir / "state.csv"
                write_state_csv(files["state"], measurement.state)

            files["truth"] = output_dir / "truth.csv"
            problem = self.coarse_problem(scenario)
            write_parameter(files["truth"], ground_truth(scenario, problem), problem.time_grid)

            files["manifest"] = output_dir / MEASUREMENT_MANIFEST
            _write_json(files["manifest"], {
                "format": MEASUREMENT_FORMAT,
                "app_version": APP_VERSION,
                "schema_version": SCHEMA_VERSION,
                "scenario": files["scenario"].name,
                "seed": scenario.seed,
                "observation_mode": scenario.observation_mode.value,
                "clean": files["clean"].name,
                "model_mismatch": mismatch,
                "levels": levels,
                "state_dump": files["state"].name if dump_state else None,
            })
        return SimulationResult(scenario, measurement, mismatch, output_dir, files)

    # --- reconstruct ---

    @staticmethod
    def measurement_info(measurement_path: Path) -> tuple[float | None, float | None, float | None]:
        """(noise_level, delta_noise, model_mismatch) from the manifest beside a measurement file."""
        manifest = measurement_path.parent / MEASUREMENT_MANIFEST
        if not manifest.exists():
            return None, None, None
        data = json.loads(manifest.read_text(encoding="utf-8"))
        if data.get("format") != MEASUREMENT_FORMAT:
            raise ConfigurationError("measurement manifest", str(manifest), f"expected {MEASUREMENT_FORMAT}")
        mismatch = data.get("model_mismatch")
        if measurement_path.name == data.get("clean"):
            return 0.0, 0.0, mismatch
        for entry in data.get("levels", []):
            if entry.get("file") == measurement_path.name:
                return entry["noise_level"], entry["delta"], mismatch
        return None, None, mismatch

    def reconstruct(self, scenario: Scenario, measurement_path: Path, output_dir: Path,
                    delta: float | None = None) -> ReconstructionResult:
        """Bootstrap (easy axis) and the main Landweber run on one measurement file.

        Args:
            delta: Overrides the discrepancy-principle bound; by default the recorded
                noise norm plus the two-grid model mismatch.
        """
        scenario = self.prepare_scenario(scenario)
        with _stage(PipelineStage.RECONSTRUCT):
            problem = self.coarse_problem(scenario)
            y_delta = read_observation_csv(measurement_path, scenario.time_grid)
            if y_delta.mode is not problem.mode:
                raise ConfigurationError("observation_mode", y_delta.mode.value,
                                         f"scenario expects {problem.mode.value} data")
            columns = problem.mesh.n_cells if problem.mode is ObservationMode.IDENTITY else 3
            if y_delta.values.shape[1] != columns:
                raise ShapeError("measurement columns", columns, y_delta.values.shape[1])

            noise_level, delta_noise, mismatch = self.measurement_info(measurement_path)
            if delta is None and delta_noise is not None:
                delta = delta_noise + (mismatch or 0.0)
            if delta is None:
                log_warning(f"No noise bound for {measurement_path}; the discrepancy principle is disabled")
            p1 = initial_guess(scenario, problem)
            error_fn = error_function(scenario, problem)

        clock = time.perf_counter()
        bootstrap = None
        if self.config.find_initial_value and scenario.case is ParameterCase.EASY_AXIS:
            with _stage(PipelineStage.BOOTSTRAP):
                bootstrap = bootstrap_run(y_delta, p1, self.config, problem, delta=delta)
                p1 = bootstrap.final
        bootstrap_seconds = time.perf_counter() - clock

        with _stage(PipelineStage.RECONSTRUCT):
            run = landweber_run(y_delta, p1, replace(self.config, find_initial_value=False), problem,
                                delta=delta, error_fn=error_fn)
        total_seconds = time.perf_counter() - clock

        report = None
        with _stage(PipelineStage.EVALUATE):
            if scenario.ground_truth is not None:
                report = evaluate(run, scenario, problem, noise_level=noise_level or 0.0)

        with _stage(PipelineStage.RECONSTRUCT):
            self._write_run(output_dir, scenario, measurement_path, run, bootstrap, report, problem,
                            noise_level, delta, delta_noise, mismatch,
                            {"bootstrap_s": bootstrap_seconds, "total_s": total_seconds})
        verbose_log(f"Reconstruction finished: status {run.status}, {run.last_index} iterations, "
                    f"discrepancy index {run.discrepancy_index}")
        return ReconstructionResult(run, bootstrap, report, output_dir, noise_level, delta)

    def _write_run(self, output_dir: Path, scenario: Scenario, measurement_path: Path,
                   run: ReconstructionRun, bootstrap: ReconstructionRun | None,
                   report: ErrorReport | None, problem: ForwardProblem, noise_level: float | None,
                   delta: float | None, delta_noise: float | None, mismatch: float | None,
                   timing: dict) -> None:
        output_dir.mkdir(parents=True, exist_ok=True)
        grid = problem.time_grid
        for index, p in sorted(run.iterates.items()):
            write_parameter(output_dir / "iterates" / f"iter_{index:04d}.csv", p, grid)
        write_parameter(output_dir / "p_final.csv", run.final, grid)

        if report is not None:
            lines = ["noise_level,seed,rule,iteration,discrepancy,l2_error,h1_error"]
            for row in report.rows:
                lines.append(",".join([_format_value(report.noise_level), str(report.seed), row.rule,
                                       str(row.iteration), _format_value(row.discrepancy),
                                       _format_value(row.l2), _format_value(row.h1)]))
            (output_dir / ERROR_REPORT).write_text("\n".join(lines) + "\n", encoding="utf-8")

        _write_json(output_dir / RUN_MANIFEST, {
            "format": RUN_FORMAT,
            "app_version": APP_VERSION,
            "schema_version": SCHEMA_VERSION,
            "scenario": scenario.name,
            "case": int(scenario.case),
            "seed": scenario.seed,
            "measurement": str(measurement_path),
            "noise_level": noise_level,
            "delta": delta,
            "delta_noise": delta_noise,
            "model_mismatch": mismatch,
            "overrides": self.overrides,
            "config": run.config,
            "omega": run.omega,
            "status": run.status,
            "iterations": run.last_index,
            "discrepancy_index": run.discrepancy_index,
            "best_index": run.best_index,
            "trace": [
                {"iteration": r.index, "discrepancy": r.discrepancy, "step": r.step,
                 "armijo_trials": r.armijo_trials, "error": r.error}
                for r in run.records
            ],
            "bootstrap": None if bootstrap is None else {
                "iterations": bootstrap.last_index,
                "status": bootstrap.status,
                "discrepancy_start": bootstrap.discrepancies[0],
                "discrepancy_end": bootstrap.discrepancies[-1],
            },
            "has_ground_truth": report is not None,
            "timing": timing,
        })

    # --- evaluate ---

    def evaluate(self, run_dirs: list[Path], output_path: Path,
                 rules: tuple[str, ...] = RULE_ORDER) -> EvaluationResult:
        """Aggregate the error reports of completed runs into one table.

        Incomplete runs (no manifest, or an unfinished status) are skipped with a warning.
        Runs without ground truth contribute a discrepancy-principle row with NA errors.
        """
        with _stage(PipelineStage.EVALUATE):
            entries: list[tuple[float, int, int, list[str]]] = []
            skipped: list[Path] = []
            for run_dir in run_dirs:
                manifest = run_dir / RUN_MANIFEST
                if not manifest.exists():
                    log_warning(f"Skipping incomplete run {run_dir}: no {RUN_MANIFEST}")
                    skipped.append(run_dir)
                    continue
                data = json.loads(manifest.read_text(encoding="utf-8"))
                if data.get("format") != RUN_FORMAT or data.get("status") in (None, "running"):
                    log_warning(f"Skipping incomplete run {run_dir}: status {data.get('status')}")
                    skipped.append(run_dir)
                    continue
                level = data.get("noise_level")
                level_key = level if level is not None else -1.0
                seed = int(data.get("seed", 0))
                report_path = run_dir / ERROR_REPORT
                if data.get("has_ground_truth") and report_path.exists():
                    for line in report_path.read_text(encoding="utf-8").splitlines()[1:]:
                        fields = line.split(",")
                        if fields[2] in rules:
                            entries.append((level_key, seed, RULE_ORDER.index(fields[2]), fields))
                elif "discrepancy" in rules:
                    index = data.get("discrepancy_index")
                    trace = {t["iteration"]: t["discrepancy"] for t in data.get("trace", [])}
                    entries.append((level_key, seed, 0, [
                        _format_value(level), str(seed), "discrepancy",
                        _format_value(index), _format_value(trace.get(index)), "NA", "NA",
                    ]))

            entries.sort(key=lambda entry: entry[:3])
            lines = ["noise_level,seed,rule,iteration,discrepancy,l2_error,h1_error"]
            lines.extend(",".join(fields) for *_, fields in entries)
            output_path.parent.mkdir(parents=True, exist_ok=True)
            output_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        verbose_log(f"Error table: {len(entries)} rows from {len(run_dirs) - len(skipped)} runs "
                    f"({len(skipped)} skipped)")
        return EvaluationResult(output_path, len(entries), skipped)

    # --- ladder ---

    def ladder(self, scenario: Scenario, output_dir: Path, seeds: list[int] | None = None,
               workers: int = 1) -> LadderResult:
        """Simulate per seed, reconstruct every (seed, noise level) concurrently, then evaluate.

        Each reconstruction writes to its own directory seed_<s>/d<tag>/.
        """
        scenario = self.prepare_scenario(scenario)
        seeds = seeds if seeds else [scenario.seed]
        jobs: list[tuple[str, Scenario, Path, Path]] = []
        for seed in seeds:
            seeded = replace(scenario, seed=seed)
            seed_dir = output_dir / f"seed_{seed}"
            simulation = self.simulate(seeded, seed_dir)
            for level in simulation.scenario.noise_levels:
                tag = noise_tag(level)
                jobs.append((f"seed {seed}, noise {level:g}", simulation.scenario,
                             seed_dir / f"y_d{tag}.csv", seed_dir / f"d{tag}"))

        runs: list[ReconstructionResult] = []
        failed: dict[str, str] = {}
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = {pool.submit(self.reconstruct, s, path, out): label for label, s, path, out in jobs}
            for future in as_completed(futures):
                label = futures[future]
                try:
                    runs.append(future.result())
                except PipelineError as exc:
                    log_error(f"Ladder run {label} failed", exc.original_error)
                    failed[label] = str(exc.original_error)

        if jobs and not runs:
            raise PipelineError(PipelineStage.LADDER, RuntimeError(f"all {len(jobs)} ladder runs failed"))
        runs.sort(key=lambda result: str(result.output_dir))
        evaluation = self.evaluate([out for *_, out in jobs], output_dir / ERROR_TABLE)
        return LadderResult(runs, failed, evaluation)

