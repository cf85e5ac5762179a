"""
test_inversion.py — Tests for the Riesz smoothers, step length and the Landweber iteration.

Covers:
- Time and space smoothers: exact discrete eigen-factors, self-adjointness, positivity
- Power-iteration estimate of ||F'||^2 against a dense computation
- Landweber statuses, monotone discrepancy, discrepancy principle, best-iterate tracking
- Gain scaling and seed independence of the step length; earlier stopping under larger noise
- The unsmoothed initial-value search
- LandweberConfig validation

Run with: pytest tests/test_inversion.py -v
"""

from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg

from error_utils import ConfigurationError, SolverError
from inversion import (
    LandweberConfig,
    bootstrap_initial_value,
    bootstrap_run,
    compute_gradient,
    estimate_operator_norm,
    estimate_step_length,
    landweber_run,
    riesz_smooth_space,
    riesz_smooth_time,
    smooth_parameter,
)
from model import AnisotropyLandscape, EasyAxis, ParameterCase, TimeGrid, parameter_inner, parameter_norm
from observation import observation_norm


def weighted_inner(f, g, grid):
    return float(grid.weights @ (f * g))


# =============================================================================
# TESTS: Riesz smoothers
# =============================================================================

class TestTimeSmoother:
    """Tests for riesz_smooth_time (v - eps^2 v'' = f, Neumann ends)."""

    @pytest.fixture
    def grid(self):
        return TimeGrid(1e-7, 200)

    @pytest.mark.unit
    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_cosines_are_eigenvectors(self, k, grid):
        """cos(k pi t / T) is scaled by 1 / (1 + eps^2 (2 - 2 cos(k pi / N)) / dt^2)."""
        eps = grid.t_end / 10
        f = np.cos(k * np.pi * grid.times / grid.t_end)
        factor = 1.0 / (1.0 + (eps / grid.dt) ** 2 * (2.0 - 2.0 * np.cos(k * np.pi / grid.n_steps)))
        v = riesz_smooth_time(f, eps, grid)
        assert np.max(np.abs(v - factor * f)) <= 1e-8 * factor

    @pytest.mark.unit
    def test_low_cosine_matches_continuous_factor(self, grid):
        eps = grid.t_end / 10
        f = np.cos(2 * np.pi * grid.times / grid.t_end)
        v = riesz_smooth_time(f, eps, grid)
        continuous = 1.0 / (1.0 + (eps * 2 * np.pi / grid.t_end) ** 2)
        assert np.allclose(v, continuous * f, rtol=1e-3, atol=1e-3 * continuous)

    @pytest.mark.unit
    def test_constants_pass_through(self, grid):
        v = riesz_smooth_time(np.full((grid.n_samples, 3), 4.0), grid.t_end / 10, grid)
        assert np.allclose(v, 4.0, rtol=1e-12)

    @pytest.mark.unit
    def test_self_adjoint_and_positive(self, grid, rng):
        eps = grid.t_end / 10
        for _ in range(20):
            f, g = rng.standard_normal(grid.n_samples), rng.standard_normal(grid.n_samples)
            rf, rg = riesz_smooth_time(f, eps, grid), riesz_smooth_time(g, eps, grid)
            assert weighted_inner(rf, g, grid) == pytest.approx(weighted_inner(f, rg, grid), rel=1e-10, abs=1e-22)
            assert weighted_inner(rf, f, grid) > 0

    @pytest.mark.unit
    def test_zero_strength_is_identity(self, grid, rng):
        f = rng.standard_normal((grid.n_samples, 3))
        assert np.array_equal(riesz_smooth_time(f, 0.0, grid), f)


class TestSpaceSmoother:
    """Tests for riesz_smooth_space (u - eps^2 Lap u + eps^4 Lap^2 u = f)."""

    @pytest.mark.unit
    def test_discrete_eigenvectors(self, operators_l1):
        """Generalized eigenvectors of (-L, M) are scaled by 1 / (1 + eps^2 mu + eps^4 mu^2)."""
        eps = operators_l1.mesh.diameter
        mu, vectors = scipy.linalg.eigh(-operators_l1.laplacian.toarray(), np.diag(operators_l1.mass))
        for index in (1, 4, 20, 60):
            v = vectors[:, index]
            factor = 1.0 / (1.0 + eps ** 2 * mu[index] + eps ** 4 * mu[index] ** 2)
            smoothed = riesz_smooth_space(v, operators_l1, eps)
            assert np.linalg.norm(smoothed - factor * v) <= 1e-8 * factor * np.linalg.norm(v)

    @pytest.mark.unit
    def test_constants_pass_through(self, operators_l2):
        f = np.full((operators_l2.mesh.n_cells, 3), -2.0)
        assert np.allclose(riesz_smooth_space(f, operators_l2, 0.3), -2.0, rtol=1e-10)

    @pytest.mark.unit
    def test_self_adjoint_in_area_inner_product(self, operators_l2, rng):
        mass = operators_l2.mass
        for _ in range(20):
            f, g = rng.standard_normal(len(mass)), rng.standard_normal(len(mass))
            rf, rg = riesz_smooth_space(f, operators_l2, 0.3), riesz_smooth_space(g, operators_l2, 0.3)
            assert (rf * mass) @ g == pytest.approx((f * mass) @ rg, rel=1e-10, abs=1e-14)
            assert (rf * mass) @ f > 0

    @pytest.mark.unit
    def test_smoothing_reduces_roughness(self, operators_l2, rng):
        f = rng.standard_normal(operators_l2.mesh.n_cells)
        u = riesz_smooth_space(f, operators_l2, operators_l2.mesh.diameter)
        laplacian = operators_l2.laplacian
        assert -(u @ (laplacian @ u)) < -(f @ (laplacian @ f))


class TestSmoothParameter:
    """Tests for smooth_parameter dispatch per case."""

    @pytest.mark.unit
    def test_time_dependent_landscape_is_smoothed_in_both(self, problem_factory, rng):
        problem, p = problem_factory(ParameterCase.ANISOTROPY_LANDSCAPE, time_dependent=True)
        noise = p.with_values(rng.standard_normal(p.values.shape))
        config = LandweberConfig()
        smoothed = smooth_parameter(noise, config, problem)
        assert isinstance(smoothed, AnisotropyLandscape)
        assert smoothed.values.shape == noise.values.shape
        grid = problem.time_grid
        by_time = riesz_smooth_time(noise.values, config.time_smoothing(grid), grid)
        # space smoothing is applied on top of time smoothing and commutes with it
        first = riesz_smooth_space(by_time[0], problem.operators, config.space_smoothing(problem.mesh))
        assert np.allclose(smoothed.values[0], first, rtol=1e-10, atol=1e-12)

    @pytest.mark.unit
    def test_default_strengths(self, mesh_l2, small_grid):
        config = LandweberConfig()
        assert config.time_smoothing(small_grid) == pytest.approx(small_grid.t_end / 10)
        assert config.space_smoothing(mesh_l2) == pytest.approx(mesh_l2.diameter)
        assert LandweberConfig(epsilon_time=0.0).time_smoothing(small_grid) == 0.0


# =============================================================================
# TESTS: Gradient and step length
# =============================================================================

class TestGradientAndStepLength:
    """Tests for compute_gradient and the power-iteration step length."""

    @pytest.mark.unit
    def test_unsmoothed_gradient_is_plain_adjoint(self, problem_factory, rng):
        problem, p = problem_factory(ParameterCase.EASY_AXIS)
        state, y = problem.forward(p)
        residual = y.with_values(rng.standard_normal(y.values.shape))
        gradient = compute_gradient(p, residual, state, LandweberConfig(find_initial_value=True), problem)
        assert np.array_equal(gradient.values, problem.adjoint(p, residual, state).values)

    @pytest.mark.unit
    @pytest.mark.parametrize("case", [ParameterCase.FIELD_WAVEFORM, ParameterCase.ANISOTROPY_LANDSCAPE])
    def test_smoothed_gradient_is_a_descent_direction(self, case, problem_factory, rng):
        problem, p = problem_factory(case)
        state, y = problem.forward(p)
        residual = y.with_values(rng.standard_normal(y.values.shape))
        raw = problem.adjoint(p, residual, state)
        smoothed = compute_gradient(p, residual, state, LandweberConfig(), problem)
        assert parameter_inner(smoothed, raw, problem.mesh, problem.time_grid) > 0

    @pytest.mark.unit
    def test_power_iteration_matches_dense_norm(self, problem_factory):
        problem, p = problem_factory(ParameterCase.FIELD_WAVEFORM)
        grid = problem.time_grid
        state = problem.solve(p)
        columns = []
        for j in range(p.values.size):
            unit = np.zeros(p.values.size)
            unit[j] = 1.0
            columns.append(problem.derivative(p, p.with_values(unit.reshape(p.values.shape)), state).values.ravel())
        jacobian = np.column_stack(columns)
        w = np.sqrt(np.repeat(grid.weights, 3))
        exact = np.linalg.norm(w[:, None] * jacobian / w[None, :], 2) ** 2

        estimate = estimate_operator_norm(p, problem, trials=200, seed=3, state=state)
        assert estimate.squared_norm <= exact * (1 + 1e-8)
        assert estimate.squared_norm == pytest.approx(exact, rel=2e-2)

    @pytest.mark.unit
    def test_step_length_uses_safety_factor(self, problem_factory):
        problem, p = problem_factory(ParameterCase.FIELD_WAVEFORM)
        estimate = estimate_operator_norm(p, problem, trials=10, seed=1)
        omega = estimate_step_length(p, problem, trials=10, seed=1, safety=0.5)
        assert omega == pytest.approx(0.5 / estimate.squared_norm)

    @pytest.mark.unit
    def test_doubled_gain_quadruples_squared_norm(self, problem_factory):
        """||F'||^2 scales with the square of the observation gain; omega scales inversely."""
        single, p = problem_factory(ParameterCase.FIELD_WAVEFORM)
        double, _ = problem_factory(ParameterCase.FIELD_WAVEFORM, gain=2.0)
        ratio = (estimate_operator_norm(p, double, trials=10, seed=2).squared_norm
                 / estimate_operator_norm(p, single, trials=10, seed=2).squared_norm)
        assert ratio == pytest.approx(4.0, rel=1e-8)
        omega_ratio = (estimate_step_length(p, single, trials=10, seed=2)
                       / estimate_step_length(p, double, trials=10, seed=2))
        assert omega_ratio == pytest.approx(4.0, rel=1e-8)

    @pytest.mark.unit
    @pytest.mark.parametrize("case", [ParameterCase.FIELD_WAVEFORM, ParameterCase.EASY_AXIS])
    def test_random_starts_agree(self, case, problem_factory):
        problem, p = problem_factory(case)
        state = problem.solve(p)
        omegas = [estimate_step_length(p, problem, trials=200, seed=seed, state=state) for seed in (0, 1, 2)]
        for omega in omegas[1:]:
            assert omega == pytest.approx(omegas[0], rel=5e-2)

    @pytest.mark.unit
    def test_zero_trials_rejected(self, problem_factory):
        problem, p = problem_factory(ParameterCase.FIELD_WAVEFORM)
        with pytest.raises(ConfigurationError):
            estimate_operator_norm(p, problem, trials=0)


# =============================================================================
# TESTS: Landweber iteration
# =============================================================================

@pytest.fixture
def field_inversion(problem_factory):
    """(problem, truth, data, start) for a noise-free field-waveform reconstruction."""
    problem, p_true = problem_factory(ParameterCase.FIELD_WAVEFORM)
    _, y = problem.forward(p_true)
    return problem, p_true, y, p_true.zeros_like()


class TestLandweber:
    """Tests for landweber_run."""

    @pytest.mark.unit
    def test_discrepancy_decreases_monotonically(self, field_inversion):
        problem, _, y, p1 = field_inversion
        run = landweber_run(y, p1, LandweberConfig(k_max=8, power_iterations=10), problem)
        discrepancies = run.discrepancies
        assert len(discrepancies) >= 3
        assert [record.index for record in run.records] == list(range(1, len(discrepancies) + 1))
        for previous, current in zip(discrepancies, discrepancies[1:]):
            assert current < previous * (1 - 1e-4)
        assert run.status in ("max_iterations", "stalled")
        assert run.omega > 0

    @pytest.mark.unit
    def test_exact_start_converges_immediately(self, field_inversion):
        problem, p_true, y, _ = field_inversion
        run = landweber_run(y, p_true, LandweberConfig(omega=1.0), problem)
        assert run.status == "converged"
        assert run.last_index == 1
        assert run.discrepancies == [0.0]

    @pytest.mark.unit
    def test_discrepancy_principle_stops_run(self, field_inversion):
        problem, _, y, p1 = field_inversion
        omega = estimate_step_length(p1, problem, trials=10)
        config = LandweberConfig(omega=omega, k_max=6)
        reference = landweber_run(y, p1, config, problem)
        assert reference.last_index >= 4
        delta = reference.discrepancies[3] / config.tau * (1 + 1e-12)

        stopped = landweber_run(y, p1, replace(config, store_iterates=False), problem, delta=delta)
        assert stopped.status == "discrepancy"
        assert stopped.discrepancy_index == 4
        assert stopped.last_index == 4
        assert stopped.parameter_at(4) is not None

    @pytest.mark.unit
    def test_discrepancy_index_moves_earlier_with_noise(self, field_inversion, rng):
        """Across a noise ladder the discrepancy principle fires no later for larger noise."""
        problem, _, y, p1 = field_inversion
        config = LandweberConfig(omega=estimate_step_length(p1, problem, trials=10), k_max=12)
        noise = rng.standard_normal(y.values.shape)
        noise *= observation_norm(y, problem.mesh) / observation_norm(y.with_values(noise), problem.mesh)

        indices = []
        for level in (0.005, 0.02, 0.08, 0.3, 20.0):
            y_delta = y.with_values(y.values + level * noise)
            run = landweber_run(y_delta, p1, config, problem, delta=problem.misfit(y_delta, y))
            indices.append(run.discrepancy_index if run.discrepancy_index is not None else config.k_max + 1)
        assert indices == sorted(indices, reverse=True)
        # F(0) = 0, so noise twenty times the signal is already explained by the start
        assert indices[-1] == 1

    @pytest.mark.unit
    def test_stored_run_continues_past_discrepancy(self, field_inversion):
        problem, _, y, p1 = field_inversion
        first = landweber_run(y, p1, LandweberConfig(omega=1.0, k_max=1), problem).discrepancies[0]
        run = landweber_run(y, p1, LandweberConfig(k_max=4, power_iterations=10), problem, delta=2 * first)
        assert run.discrepancy_index == 1
        assert run.status != "discrepancy"
        assert sorted(run.iterates) == list(range(1, run.last_index + 1))

    @pytest.mark.unit
    def test_impossible_decrease_stalls(self, field_inversion):
        problem, _, y, p1 = field_inversion
        run = landweber_run(y, p1, LandweberConfig(omega=1.0, tol=10.0, j_max=2), problem)
        assert run.status == "stalled"
        assert run.last_index == 1

    @pytest.mark.unit
    def test_max_iterations_status(self, field_inversion):
        problem, _, y, p1 = field_inversion
        run = landweber_run(y, p1, LandweberConfig(k_max=2, power_iterations=10), problem)
        assert run.status == "max_iterations"
        assert run.last_index == 2
        assert run.records[1].step is not None
        assert run.records[1].armijo_trials >= 1

    @pytest.mark.unit
    def test_best_iterate_tracks_error(self, field_inversion):
        problem, p_true, y, p1 = field_inversion
        mesh, grid = problem.mesh, problem.time_grid

        def error_fn(p):
            return parameter_norm(p.shifted(p_true, -1.0), mesh, grid)

        run = landweber_run(y, p1, LandweberConfig(k_max=5, power_iterations=10), problem, error_fn=error_fn)
        errors = [record.error for record in run.records]
        assert run.best_index == int(np.argmin(errors)) + 1
        assert error_fn(run.best) == pytest.approx(min(errors))

    @pytest.mark.unit
    def test_parallel_armijo_trials_match_serial(self, field_inversion):
        problem, _, y, p1 = field_inversion
        omega = 4 * estimate_step_length(p1, problem, trials=10)
        serial = landweber_run(y, p1, LandweberConfig(omega=omega, k_max=4), problem)
        parallel = landweber_run(y, p1, LandweberConfig(omega=omega, k_max=4, armijo_workers=3), problem)
        assert parallel.discrepancies == serial.discrepancies
        assert [r.armijo_trials for r in parallel.records] == [r.armijo_trials for r in serial.records]

    @pytest.mark.unit
    def test_solver_failure_carries_iteration(self, field_inversion, monkeypatch):
        problem, _, y, p1 = field_inversion

        def failing_forward(p):
            raise SolverError("forward", 3, "singular")

        monkeypatch.setattr(problem, "forward", failing_forward)
        with pytest.raises(SolverError) as exc_info:
            landweber_run(y, p1, LandweberConfig(omega=1.0), problem)
        assert exc_info.value.iteration == 1
        assert exc_info.value.step == 3


class TestInitialValueSearch:
    """Tests for bootstrap_run / bootstrap_initial_value."""

    @pytest.mark.unit
    def test_disabled_search_returns_start(self, problem_factory):
        problem, p = problem_factory(ParameterCase.EASY_AXIS)
        _, y = problem.forward(p)
        config = LandweberConfig(find_initial_value=False)
        assert bootstrap_run(y, p, config, problem) is None
        assert bootstrap_initial_value(y, p, config, problem) is p

    @pytest.mark.unit
    def test_search_rejected_outside_easy_axis(self, field_inversion):
        problem, _, y, p1 = field_inversion
        with pytest.raises(ConfigurationError):
            bootstrap_run(y, p1, LandweberConfig(find_initial_value=True), problem)

    @pytest.mark.unit
    def test_search_improves_easy_axis_start(self, problem_factory):
        problem, p_true = problem_factory(ParameterCase.EASY_AXIS)
        _, y = problem.forward(p_true)
        p1 = EasyAxis(np.tile([1.0, 0.0, 0.0], (problem.time_grid.n_samples, 1)))
        config = LandweberConfig(find_initial_value=True, bootstrap_k_max=4, power_iterations=10)
        run = bootstrap_run(y, p1, config, problem)
        assert run.config["find_initial_value"] is True
        assert run.config["k_max"] == 4
        assert run.discrepancies[-1] <= run.discrepancies[0]
        start = bootstrap_initial_value(y, p1, config, problem)
        assert problem.misfit(problem.forward(start)[1], y) == pytest.approx(run.discrepancies[-1])


# =============================================================================
# TESTS: Configuration
# =============================================================================

class TestLandweberConfig:
    """Tests for LandweberConfig validation and overrides."""

    @pytest.mark.unit
    @pytest.mark.parametrize("changes", [
        {"armijo_factor": 1.0},
        {"armijo_factor": 0.0},
        {"tau": 1.0},
        {"omega": -1.0},
        {"k_max": 0},
        {"tol": 0.0},
        {"epsilon_space": -0.1},
        {"step_safety": 1.5},
    ])
    def test_invalid_values_rejected(self, changes):
        with pytest.raises(ConfigurationError):
            LandweberConfig(**changes).validate()

    @pytest.mark.unit
    def test_from_overrides_uses_schema_defaults(self):
        config = LandweberConfig.from_overrides({"k_max": 5, "tau": 1.5})
        assert config.k_max == 5
        assert config.tau == 1.5
        assert config.armijo_factor == pytest.approx(0.7)
        assert config.find_initial_value is True

    @pytest.mark.unit
    def test_to_dict_round_trip(self):
        config = LandweberConfig(omega=0.25, armijo_workers=2)
        assert LandweberConfig(**config.to_dict()) == config

    @pytest.mark.unit
    def test_auto_smoothing_strength(self):
        config = LandweberConfig.from_overrides({"epsilon_time": None, "epsilon_space": 0.0})
        assert config.epsilon_time is None
        assert config.epsilon_space == 0.0
