"""
test_pipeline.py — Integration tests for FokkerIdPipeline on tiny meshes.

Every scenario is shrunk to levels 2 -> 1 and eight time steps through schema overrides,
so a full simulate/reconstruct/evaluate cycle takes well under a second.

Run with: pytest tests/test_pipeline.py -v
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from error_utils import GridMismatchError
from fp_constants import parse_overrides
from harness import load_scenario, preset_case1, preset_case3
from pipeline import (
    ERROR_REPORT,
    MEASUREMENT_MANIFEST,
    RUN_MANIFEST,
    FokkerIdPipeline,
    PipelineError,
    PipelineStage,
)
from version import MEASUREMENT_FORMAT, RUN_FORMAT

TINY = [
    "fine_level=2", "coarse_level=1", "t_end=2e-8", "n_steps=8", "noise_levels=0,0.02",
    "k_max=4", "power_iterations=5", "bootstrap_k_max=3",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return FokkerIdPipeline(parse_overrides(TINY), cache_dir=tmp_path_factory.mktemp("cache"))


@pytest.fixture(scope="module")
def simulated(pipeline, tmp_path_factory):
    """A case-1 simulation shared by the reconstruction tests."""
    out = tmp_path_factory.mktemp("case1")
    return pipeline.simulate(preset_case1(), out)


def read_table(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return header, [dict(zip(header, line.split(","))) for line in lines[1:]]


# =============================================================================
# TESTS: Mesh stage
# =============================================================================

class TestMeshStage:
    """Tests for build_mesh and the per-instance caches."""

    @pytest.mark.integration
    def test_build_then_hit(self, tmp_path):
        pipeline = FokkerIdPipeline(cache_dir=tmp_path)
        mesh, hit, path = pipeline.build_mesh(1)
        assert (len(mesh.triangles), hit) == (80, False)
        assert path.exists()
        _, hit_again, _ = pipeline.build_mesh(1)
        assert hit_again

    @pytest.mark.integration
    def test_level_four_has_5120_triangles(self, tmp_path):
        mesh, _, _ = FokkerIdPipeline(cache_dir=tmp_path).build_mesh(4)
        assert len(mesh.triangles) == 5120

    @pytest.mark.integration
    def test_invalid_level_is_a_mesh_stage_error(self, tmp_path):
        with pytest.raises(PipelineError) as exc_info:
            FokkerIdPipeline(cache_dir=tmp_path).build_mesh(9)
        assert exc_info.value.stage is PipelineStage.MESH

    @pytest.mark.integration
    def test_operators_are_shared(self, pipeline):
        assert pipeline.operators(1, 5e7) is pipeline.operators(1, 5e7)


# =============================================================================
# TESTS: Simulate
# =============================================================================

class TestSimulate:
    """Tests for the simulate stage."""

    @pytest.mark.integration
    def test_files_written(self, simulated):
        out = simulated.output_dir
        for name in ("y.csv", "y_d00.csv", "y_d02.csv", "scenario.json", "truth.csv", MEASUREMENT_MANIFEST):
            assert (out / name).exists(), name
        assert (out / "y.csv").read_text().splitlines()[0] == "t,y1,y2,y3"
        assert len((out / "y.csv").read_text().splitlines()) == 10

    @pytest.mark.integration
    def test_manifest_records_deltas_and_mismatch(self, simulated):
        manifest = json.loads((simulated.output_dir / MEASUREMENT_MANIFEST).read_text())
        assert manifest["format"] == MEASUREMENT_FORMAT
        assert manifest["model_mismatch"] == pytest.approx(simulated.model_mismatch)
        assert manifest["model_mismatch"] > 0
        levels = {entry["file"]: entry for entry in manifest["levels"]}
        assert levels["y_d00.csv"]["delta"] == 0.0
        assert levels["y_d02.csv"]["delta"] == pytest.approx(simulated.measurement.deltas[0.02])

    @pytest.mark.integration
    def test_saved_scenario_carries_overrides(self, simulated):
        scenario = load_scenario(simulated.output_dir / "scenario.json")
        assert (scenario.fine_level, scenario.coarse_level, scenario.n_steps) == (2, 1, 8)

    @pytest.mark.integration
    def test_same_seed_gives_identical_files(self, pipeline, simulated, tmp_path):
        again = pipeline.simulate(preset_case1(), tmp_path / "again")
        for name in ("y.csv", "y_d02.csv"):
            assert (again.output_dir / name).read_bytes() == (simulated.output_dir / name).read_bytes()

    @pytest.mark.integration
    def test_cold_and_warm_cache_give_identical_files(self, tmp_path):
        """A fresh pipeline on a warm mesh cache reproduces the cold-cache run byte for byte."""
        cache = tmp_path / "cache"
        outputs = []
        for attempt in ("cold", "warm"):
            fresh = FokkerIdPipeline(parse_overrides(TINY), cache_dir=cache)
            result = fresh.simulate(preset_case1(), tmp_path / attempt)
            run = fresh.reconstruct(result.scenario, result.output_dir / "y_d02.csv", tmp_path / attempt / "run")
            outputs.append(({name: (result.output_dir / name).read_bytes() for name in ("y.csv", "y_d02.csv")},
                            run.run.discrepancies))
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]

    @pytest.mark.integration
    def test_state_dump(self, pipeline, tmp_path):
        result = pipeline.simulate(preset_case1(), tmp_path / "dump", dump_state=True)
        assert result.files["state"].read_text().splitlines()[0].startswith("t,u1,")


# =============================================================================
# TESTS: Reconstruct
# =============================================================================

class TestReconstruct:
    """Tests for the reconstruct stage and its artifacts."""

    @pytest.mark.integration
    def test_run_artifacts(self, pipeline, simulated, tmp_path):
        scenario = load_scenario(simulated.output_dir / "scenario.json")
        out = tmp_path / "run"
        result = pipeline.reconstruct(scenario, simulated.output_dir / "y_d02.csv", out)

        manifest = json.loads((out / RUN_MANIFEST).read_text())
        assert manifest["format"] == RUN_FORMAT
        assert manifest["status"] == result.run.status
        assert manifest["noise_level"] == 0.02
        assert manifest["delta"] == pytest.approx(manifest["delta_noise"] + manifest["model_mismatch"])
        assert manifest["bootstrap"] is None
        assert len(manifest["trace"]) == result.run.last_index
        assert (out / "p_final.csv").exists()
        assert (out / "iterates" / "iter_0001.csv").exists()

        header, rows = read_table(out / ERROR_REPORT)
        assert header == ["noise_level", "seed", "rule", "iteration", "discrepancy", "l2_error", "h1_error"]
        assert {row["rule"] for row in rows} >= {"best", "final"}

    @pytest.mark.integration
    def test_discrepancy_decreases(self, pipeline, simulated, tmp_path):
        scenario = load_scenario(simulated.output_dir / "scenario.json")
        run = pipeline.reconstruct(scenario, simulated.output_dir / "y_d00.csv", tmp_path / "run").run
        assert np.all(np.diff(run.discrepancies) < 0)

    @pytest.mark.integration
    def test_explicit_delta_wins(self, pipeline, simulated, tmp_path):
        scenario = load_scenario(simulated.output_dir / "scenario.json")
        result = pipeline.reconstruct(scenario, simulated.output_dir / "y_d02.csv", tmp_path / "run", delta=1e3)
        assert result.delta == 1e3
        assert result.run.discrepancy_index == 1

    @pytest.mark.integration
    def test_easy_axis_runs_initial_value_search(self, pipeline, tmp_path):
        simulation = pipeline.simulate(preset_case3(), tmp_path / "case3")
        out = tmp_path / "case3" / "run"
        result = pipeline.reconstruct(simulation.scenario, tmp_path / "case3" / "y_d02.csv", out)
        assert result.bootstrap is not None
        assert result.bootstrap.config["find_initial_value"] is True
        assert result.run.config["find_initial_value"] is False
        manifest = json.loads((out / RUN_MANIFEST).read_text())
        assert manifest["bootstrap"]["iterations"] == result.bootstrap.last_index

    @pytest.mark.integration
    def test_grid_mismatch(self, simulated, tmp_path):
        plain = FokkerIdPipeline(parse_overrides(["k_max=2"]), cache_dir=tmp_path)
        scenario = replace(load_scenario(simulated.output_dir / "scenario.json"), n_steps=16)
        with pytest.raises(PipelineError) as exc_info:
            plain.reconstruct(scenario, simulated.output_dir / "y_d02.csv", tmp_path / "run")
        assert isinstance(exc_info.value.original_error, GridMismatchError)
        assert not (tmp_path / "run").exists()


# =============================================================================
# TESTS: Evaluate and ladder
# =============================================================================

class TestEvaluate:
    """Tests for the evaluate stage."""

    @pytest.mark.integration
    def test_table_skips_incomplete_runs(self, pipeline, simulated, tmp_path):
        scenario = load_scenario(simulated.output_dir / "scenario.json")
        done = []
        for tag in ("00", "02"):
            out = tmp_path / f"d{tag}"
            pipeline.reconstruct(scenario, simulated.output_dir / f"y_d{tag}.csv", out)
            done.append(out)
        incomplete = tmp_path / "crashed"
        incomplete.mkdir()

        result = pipeline.evaluate(done + [incomplete], tmp_path / "error_table.csv")
        assert result.skipped == [incomplete]
        _, rows = read_table(result.table)
        assert len(rows) == result.rows
        levels = [float(row["noise_level"]) for row in rows]
        assert levels == sorted(levels)
        assert {row["rule"] for row in rows} >= {"best", "final"}

    @pytest.mark.integration
    def test_rule_filter(self, pipeline, simulated, tmp_path):
        scenario = load_scenario(simulated.output_dir / "scenario.json")
        pipeline.reconstruct(scenario, simulated.output_dir / "y_d02.csv", tmp_path / "run")
        result = pipeline.evaluate([tmp_path / "run"], tmp_path / "table.csv", rules=("final",))
        _, rows = read_table(result.table)
        assert [row["rule"] for row in rows] == ["final"]

    @pytest.mark.integration
    def test_run_without_truth_reports_na(self, pipeline, simulated, tmp_path):
        scenario = replace(load_scenario(simulated.output_dir / "scenario.json"), ground_truth=None)
        result = pipeline.reconstruct(scenario, simulated.output_dir / "y_d02.csv", tmp_path / "run")
        assert result.report is None
        assert not (tmp_path / "run" / ERROR_REPORT).exists()
        table = pipeline.evaluate([tmp_path / "run"], tmp_path / "table.csv")
        _, rows = read_table(table.table)
        assert len(rows) == 1
        assert (rows[0]["rule"], rows[0]["l2_error"], rows[0]["h1_error"]) == ("discrepancy", "NA", "NA")


class TestLadder:
    """Tests for the noise ladder."""

    @pytest.mark.integration
    def test_two_seeds_concurrently(self, pipeline, tmp_path):
        result = pipeline.ladder(preset_case1(), tmp_path, seeds=[1, 2], workers=2)
        assert result.failed == {}
        assert len(result.runs) == 4
        for seed in (1, 2):
            for tag in ("00", "02"):
                assert (tmp_path / f"seed_{seed}" / f"d{tag}" / RUN_MANIFEST).exists()
        _, rows = read_table(tmp_path / "error_table.csv")
        assert {row["seed"] for row in rows} == {"1", "2"}
        assert len(rows) >= 8

    @pytest.mark.integration
    def test_seeds_give_different_noise(self, pipeline, tmp_path):
        pipeline.ladder(preset_case1(), tmp_path, seeds=[1, 2], workers=1)
        first = (tmp_path / "seed_1" / "y_d02.csv").read_bytes()
        second = (tmp_path / "seed_2" / "y_d02.csv").read_bytes()
        assert first != second
        assert (tmp_path / "seed_1" / "y.csv").read_bytes() == (tmp_path / "seed_2" / "y.csv").read_bytes()
