"""
Tests for method-of-lines systems, fixed-step integration and convergence studies
"""

import numpy as np
import pytest

from stabopt.exceptions import ConfigError, DivergenceError
from stabopt.mol import (
    THREADS_VARIABLE,
    SemidiscreteSystem,
    advect_fv_system,
    burgers_manufactured_system,
    convergence_study,
    error_norm,
    fit_slope,
    godunov_flux,
    integrate,
    integration_report,
    thread_count,
    total_variation_increase,
)
from stabopt.rk import build_tableau


def _constant_system(rate: float = 1.0) -> SemidiscreteSystem:
    """u' = rate, integrated exactly by any consistent method."""
    return SemidiscreteSystem(
        dimension=3,
        rhs=lambda t, u: np.full_like(u, rate),
        initial_state=np.zeros(3),
        exact_solution=lambda t: np.full(3, rate * t),
        label="constant",
    )


def _time_system() -> SemidiscreteSystem:
    """u' = t, integrated exactly by second-order methods with correct abscissae."""
    return SemidiscreteSystem(
        dimension=1,
        rhs=lambda t, u: np.full_like(u, t),
        initial_state=np.zeros(1),
        exact_solution=lambda t: np.array([0.5 * t * t]),
        label="time",
    )


class TestAdvectionSystem:
    """Tests for periodic upwind advection"""

    def test_rhs_is_upwind_difference(self):
        """Test u_i' = -(a/dx)(u_i - u_{i-1}) with periodic wrap"""
        system = advect_fv_system(4, 4.0, 2.0, np.array([1.0, 2.0, 4.0, 8.0]))
        np.testing.assert_allclose(system.rhs(0.0, system.initial_state), [14.0, -2.0, -4.0, -8.0])
        assert system.cell_width == 1.0
        assert system.label == "advection-4"

    def test_exact_solution_starts_at_initial_state(self):
        """Test that the Fourier solution reproduces u0 at t = 0"""
        system = advect_fv_system(32, 2.0, 1.0, "gaussian")
        np.testing.assert_allclose(system.exact_solution(0.0), system.initial_state, atol=1e-13)

    def test_exact_solution_satisfies_ode(self):
        """Test the semidiscrete equation by a central difference in time"""
        system = advect_fv_system(32, 2.0, 1.0)
        t, h = 0.3, 1e-5
        derivative = (system.exact_solution(t + h) - system.exact_solution(t - h)) / (2 * h)
        np.testing.assert_allclose(derivative, system.rhs(t, system.exact_solution(t)), atol=1e-6)

    def test_exact_solution_from_later_start(self, disk8_tableau):
        """Test that the initial profile is taken as the state at t0"""
        base = advect_fv_system(32, 2.0, 1.0)
        shifted = advect_fv_system(32, 2.0, 1.0, t0=0.3)
        np.testing.assert_allclose(shifted.exact_solution(0.3), shifted.initial_state, atol=1e-13)
        np.testing.assert_allclose(shifted.exact_solution(0.8), base.exact_solution(0.5), atol=1e-13)
        late = integration_report(shifted, disk8_tableau, 0.05, 0.8, t0=0.3)
        early = integration_report(base, disk8_tableau, 0.05, 0.5)
        assert late.steps == early.steps == 10
        assert late.error_linf == pytest.approx(early.error_linf, rel=1e-6)

    def test_invalid_arguments(self):
        """Test the cell count, profile and initial state checks"""
        with pytest.raises(ConfigError) as excinfo:
            advect_fv_system(3, 1.0, 1.0)
        assert excinfo.value.field == "cells"
        with pytest.raises(ConfigError):
            advect_fv_system(16, 1.0, 1.0, "square")
        with pytest.raises(ConfigError):
            advect_fv_system(16, 1.0, 1.0, np.zeros(15))


class TestBurgersSystem:
    """Tests for the manufactured Burgers system"""

    @pytest.mark.parametrize(
        ("left", "right", "expected"),
        [
            (2.0, 1.0, 2.0),  # shock moving right
            (-1.0, -2.0, 2.0),  # shock moving left
            (-1.0, 1.0, 0.0),  # transonic rarefaction
            (1.0, 3.0, 0.5),  # rarefaction moving right
            (1.0, -1.0, 0.5),  # stationary shock
        ],
    )
    def test_godunov_flux(self, left, right, expected):
        """Test the exact Riemann flux in each wave configuration"""
        assert float(godunov_flux(np.array(left), np.array(right))) == expected

    def test_exact_solution_and_residual(self):
        """Test that the source balances the flux difference up to the upwind error"""
        system = burgers_manufactured_system(256)
        assert system.dimension == 256
        np.testing.assert_allclose(system.initial_state, system.exact_solution(0.0))
        assert np.all(system.initial_state >= 1.0)
        t, h = 0.2, 1e-6
        dudt = (system.exact_solution(t + h) - system.exact_solution(t - h)) / (2 * h)
        residual = system.rhs(t, system.exact_solution(t)) - dudt
        # first-order upwind flux leaves an O(dx) spatial residual
        assert np.max(np.abs(residual)) < 100.0 / 256

    def test_too_few_cells(self):
        """Test that coarse grids are rejected"""
        with pytest.raises(ConfigError):
            burgers_manufactured_system(4)

    def test_later_start(self):
        """Test that a later start begins from the exact solution at that time"""
        system = burgers_manufactured_system(64, t0=0.25)
        np.testing.assert_allclose(system.initial_state, system.exact_solution(0.25))
        np.testing.assert_allclose(system.initial_state, burgers_manufactured_system(64).exact_solution(0.25))


class TestIntegrate:
    """Tests for fixed-step Shu-Osher integration"""

    def test_truncated_last_step(self, disk8_tableau):
        """Test that the last step is shortened to land on tf"""
        result = integrate(_constant_system(), disk8_tableau, 0.3, 0.0, 1.0, np.zeros(3))
        assert result.steps == 4
        assert result.t_end == pytest.approx(1.0)
        np.testing.assert_allclose(result.state, 1.0, rtol=1e-13)

    def test_exact_step_count(self, disk8_tableau):
        """Test that a timestep dividing the interval takes no extra step"""
        result = integrate(_constant_system(2.0), disk8_tableau, 0.25, 0.0, 1.0, np.zeros(3))
        assert result.steps == 4
        np.testing.assert_allclose(result.state, 2.0, rtol=1e-13)

    def test_stage_abscissae(self, disk8_tableau):
        """Test that stages see t_n + c h, making u' = t exact at second order"""
        result = integrate(_time_system(), disk8_tableau, 0.1, 0.0, 1.0, np.zeros(1))
        assert result.state[0] == pytest.approx(0.5, abs=1e-12)

    def test_linear_decay(self, rk3_tableau):
        """Test u' = -u against exp(-1) for a small step"""
        system = SemidiscreteSystem(1, lambda t, u: -u, np.ones(1), label="decay")
        result = integrate(system, rk3_tableau, 0.01, 0.0, 1.0, np.ones(1))
        assert result.state[0] == pytest.approx(np.exp(-1.0), rel=1e-7)

    def test_divergence_is_reported(self, disk8_tableau):
        """Test that a non-finite stage raises DivergenceError with the step index"""
        system = SemidiscreteSystem(1, lambda t, u: np.full_like(u, np.nan), np.ones(1))
        with pytest.raises(DivergenceError) as excinfo:
            integrate(system, disk8_tableau, 0.1, 0.0, 1.0, np.ones(1))
        assert excinfo.value.step == 0

    def test_invalid_times(self, disk8_tableau):
        """Test that dt and the time interval are validated"""
        with pytest.raises(ConfigError):
            integrate(_constant_system(), disk8_tableau, 0.0, 0.0, 1.0, np.zeros(3))
        with pytest.raises(ConfigError):
            integrate(_constant_system(), disk8_tableau, 0.1, 1.0, 1.0, np.zeros(3))

    def test_initial_state_not_mutated(self, disk8_tableau):
        """Test that the caller's array is left untouched"""
        u0 = np.zeros(3)
        integrate(_constant_system(), disk8_tableau, 0.5, 0.0, 1.0, u0)
        np.testing.assert_array_equal(u0, 0.0)


class TestNorms:
    """Tests for error norms, total variation and slope fitting"""

    def test_error_norms(self):
        """Test the max norm and the domain-weighted L1 norm"""
        error = np.array([1.0, -3.0, 2.0, 0.0])
        assert error_norm(error, "linf") == 3.0
        assert error_norm(error, "weighted_l1", cell_width=0.5, domain_length=2.0) == 1.5
        with pytest.raises(ConfigError):
            error_norm(error, "l2")

    def test_total_variation_increase(self):
        """Test the periodic total variation difference"""
        flat = np.zeros(4)
        bumpy = np.array([0.0, 1.0, 0.0, 1.0])
        assert total_variation_increase(flat, bumpy) == 4.0
        assert total_variation_increase(bumpy, flat) == -4.0
        with pytest.raises(ValueError):
            total_variation_increase(flat, np.zeros(3))

    def test_fit_slope(self):
        """Test an exact power law and the three-point minimum"""
        dts = np.array([0.1, 0.05, 0.025, 0.0125])
        assert fit_slope(dts, 3.0 * dts**2) == pytest.approx(2.0)
        assert fit_slope(dts, np.array([1.0, np.nan, 0.0, 1e-3])) is None


class TestThreadCount:
    """Tests for the worker count environment variable"""

    def test_default(self, monkeypatch):
        """Test that one worker is used when the variable is unset"""
        monkeypatch.delenv(THREADS_VARIABLE, raising=False)
        assert thread_count() == 1

    def test_value(self, monkeypatch):
        """Test that the variable sets the worker count"""
        monkeypatch.setenv(THREADS_VARIABLE, "4")
        assert thread_count() == 4

    @pytest.mark.parametrize("raw", ["zero", "0", "-2"])
    def test_invalid(self, monkeypatch, raw):
        """Test that non-positive or non-integer values are rejected"""
        monkeypatch.setenv(THREADS_VARIABLE, raw)
        with pytest.raises(ConfigError) as excinfo:
            thread_count()
        assert excinfo.value.field == THREADS_VARIABLE


@pytest.mark.convergence
class TestConvergenceStudy:
    """Tests for timestep refinement studies"""

    def test_second_order_advection(self, disk8_tableau):
        """Test that the S=8, p=2 disk method converges at second order"""
        system = advect_fv_system(32, 2.0, 1.0)
        study = convergence_study(system, disk8_tableau, [0.05, 0.025, 0.0125, 0.00625], workers=2)
        assert study.slope_defined
        assert study.slope == pytest.approx(2.0, abs=0.15)
        assert study.unstable == []
        assert study.steps == [20, 40, 80, 160]

    def test_third_order_advection(self, rk3_tableau):
        """Test that the three-stage Taylor method converges at third order"""
        system = advect_fv_system(32, 2.0, 1.0)
        study = convergence_study(system, rk3_tableau, [0.005, 0.04, 0.01, 0.02])
        np.testing.assert_array_equal(study.dt_sequence, [0.04, 0.02, 0.01, 0.005])
        assert study.slope == pytest.approx(3.0, abs=0.15)

    @pytest.mark.optimizer
    @pytest.mark.slow
    def test_third_order_optimized_tableau(self, circle_order3_result):
        """Test that the optimized 16-stage, p=3 method converges at third order"""
        tableau = build_tableau(circle_order3_result.polynomial)
        assert tableau.S == 16
        system = advect_fv_system(32, 2.0, 1.0)
        study = convergence_study(system, tableau, [0.02, 0.01, 0.005, 0.0025], workers=2)
        assert study.unstable == []
        assert study.slope == pytest.approx(3.0, abs=0.15)

    def test_unstable_runs_are_excluded(self, disk8_tableau):
        """Test that diverging step sizes are listed and left out of the fit"""

        def rhs(t, u):
            return np.full_like(u, np.inf) if t > 0.75 else -u

        system = SemidiscreteSystem(2, rhs, np.ones(2), exact_solution=lambda t: np.exp(-t) * np.ones(2))
        study = convergence_study(system, disk8_tableau, [0.4, 0.2, 0.1], tf=0.45)
        assert study.unstable == []
        diverging = convergence_study(system, disk8_tableau, [0.4, 0.2, 0.1], tf=1.0)
        assert diverging.unstable == [0.4, 0.2, 0.1]
        assert diverging.errors == [None, None, None]
        assert not diverging.slope_defined
        assert diverging.to_report().slope_defined is False

    def test_requires_three_timesteps(self, disk8_tableau):
        """Test that a slope needs at least three step sizes"""
        with pytest.raises(ConfigError) as excinfo:
            convergence_study(advect_fv_system(16, 1.0, 1.0), disk8_tableau, [0.1, 0.05])
        assert excinfo.value.field == "dts"

    def test_exact_reference_needs_solution(self, disk8_tableau):
        """Test that systems without an exact solution need the fine reference"""
        system = SemidiscreteSystem(1, lambda t, u: -u, np.ones(1))
        with pytest.raises(ConfigError) as excinfo:
            convergence_study(system, disk8_tableau, [0.1, 0.05, 0.025])
        assert excinfo.value.field == "reference"

    def test_fine_reference(self, disk8_tableau):
        """Test that a fine-step reference recovers the order on u' = -u"""
        system = SemidiscreteSystem(1, lambda t, u: -u, np.ones(1), label="decay")
        study = convergence_study(system, disk8_tableau, [0.2, 0.1, 0.05, 0.025], reference="fine")
        assert study.reference == "fine"
        assert study.slope == pytest.approx(2.0, abs=0.2)

    def test_write_csv(self, disk8_tableau, tmp_path):
        """Test the dt,error,steps layout"""
        system = advect_fv_system(16, 2.0, 1.0)
        study = convergence_study(system, disk8_tableau, [0.1, 0.05, 0.025], tf=0.5)
        lines = study.write_csv(tmp_path / "convergence.csv").read_text().splitlines()
        assert lines[0] == "dt,error,steps"
        assert len(lines) == 4
        dt, error, steps = lines[1].split(",")
        assert float(dt) == 0.1
        assert float(error) > 0.0
        assert steps == "5"

    @pytest.mark.slow
    def test_second_order_burgers(self, disk8_tableau):
        """Test second-order convergence on the manufactured Burgers problem"""
        system = burgers_manufactured_system(256)
        study = convergence_study(
            system,
            disk8_tableau,
            [0.008, 0.004, 0.002, 0.001],
            norm="weighted_l1",
            tf=0.25,
            reference="fine",
            workers=4,
        )
        assert study.unstable == []
        assert study.slope == pytest.approx(2.0, abs=0.2)


class TestIntegrationReport:
    """Tests for single-run summaries"""

    def test_report_fields(self, disk8_tableau):
        """Test errors, step count and total variation of an advection run"""
        system = advect_fv_system(32, 2.0, 1.0)
        report = integration_report(system, disk8_tableau, 0.05, 0.5)
        assert report.system == "advection-32"
        assert report.steps == 10
        assert report.t_end == pytest.approx(0.5)
        assert 0.0 < report.error_linf < 1e-2
        assert report.error_l1 <= report.error_linf
        # upwind smoothing does not raise the variation of a sine
        assert report.tv_increase <= 1e-12

    def test_total_variation_grows_with_negative_kernel(self, rk3_tableau):
        """Test e_TV > 0 for one step at CFL 1.2 on a square wave, and none at CFL 1"""
        x = (np.arange(32) + 0.5) / 16
        square = ((x > 0.5) & (x < 1.0)).astype(float)
        system = advect_fv_system(32, 2.0, 1.0, square)
        dx = system.cell_width
        large = integration_report(system, rk3_tableau, 1.2 * dx, 1.2 * dx)
        unit = integration_report(system, rk3_tableau, dx, dx)
        assert large.steps == unit.steps == 1
        # one step applies the kernel [0.232, 0.624, -0.144, 0.288] to both jumps
        assert large.tv_increase == pytest.approx(0.576, abs=1e-9)
        assert abs(unit.tv_increase) <= 1e-12

    def test_report_without_exact_solution(self, disk8_tableau):
        """Test that errors are omitted when no exact solution exists"""
        system = SemidiscreteSystem(1, lambda t, u: -u, np.ones(1), label="decay")
        report = integration_report(system, disk8_tableau, 0.1, 1.0)
        assert report.error_linf is None
        assert report.error_l1 is None
