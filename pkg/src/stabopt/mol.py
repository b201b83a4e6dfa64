"""Method-of-lines test systems and time integration with Shu-Osher tableaux.

Two periodic finite-volume systems are provided: first-order upwind linear
advection, whose exact semidiscrete solution is known through its discrete
Fourier modes, and Burgers' equation with a manufactured source. Convergence
studies march a tableau at a sequence of timesteps and fit the log-log slope
of the error.
"""

import logging
import os
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stabopt.exceptions import ConfigError, DivergenceError
from stabopt.models import ConvergenceReport, IntegrationReport
from stabopt.rk import ShuOsherTableau
from stabopt.spectra import generate_fv_advection_circle

logger = logging.getLogger(__name__)

THREADS_VARIABLE = "STABOPT_THREADS"

# Refinement of the reference solution when no exact solution is used
FINE_FACTOR = 8

PROFILES = ("sine", "gaussian")
NORMS = ("linf", "weighted_l1")
REFERENCES = ("exact", "fine")


@dataclass(frozen=True)
class SemidiscreteSystem:
    """ODE system ``U' = F(t, U)`` from a spatial discretization."""

    dimension: int
    rhs: Callable[[float, np.ndarray], np.ndarray]
    initial_state: np.ndarray
    exact_solution: Callable[[float], np.ndarray] | None = None
    label: str = ""
    cell_width: float = 1.0
    domain_length: float = 1.0


# =============================================================================
# Systems
# =============================================================================


def _profile(name: str, x: np.ndarray, domain_length: float) -> np.ndarray:
    if name == "sine":
        return np.sin(2.0 * np.pi * x / domain_length)
    if name == "gaussian":
        width = 1e-3 * domain_length**2
        return np.exp(-((x - 0.5 * domain_length) ** 2) / width)
    raise ConfigError(f"unknown profile '{name}', expected one of {PROFILES}", field="profile")


def advect_fv_system(
    cells: int,
    domain_length: float,
    velocity: float,
    initial_profile: str | np.ndarray = "sine",
    t0: float = 0.0,
) -> SemidiscreteSystem:
    """Periodic first-order upwind finite volumes for ``u_t + a u_x = 0``.

    The right-hand side is ``u_i' = -(a/Δx)(u_i - u_{i-1})``. Its exact solution
    is obtained by diagonalizing the circulant operator with the FFT, so
    errors measured against it are purely temporal. The initial profile is
    the state at time ``t0``.
    """
    if cells < 4:
        raise ConfigError(f"at least 4 cells are needed, got {cells}", field="cells")
    dx = domain_length / cells
    x = (np.arange(cells) + 0.5) * dx
    if isinstance(initial_profile, str):
        u0 = _profile(initial_profile, x, domain_length)
    else:
        u0 = np.asarray(initial_profile, dtype=float)
        if u0.shape != (cells,):
            raise ConfigError(f"initial state must have {cells} entries", field="initial_profile")

    rate = velocity / dx
    modes = generate_fv_advection_circle(cells, domain_length, velocity).eigenvalues
    coefficients = np.fft.fft(u0)

    def rhs(t: float, u: np.ndarray) -> np.ndarray:
        return -rate * (u - np.roll(u, 1))

    def exact(t: float) -> np.ndarray:
        return np.fft.ifft(np.exp(modes * (t - t0)) * coefficients).real

    return SemidiscreteSystem(
        dimension=cells,
        rhs=rhs,
        initial_state=u0,
        exact_solution=exact,
        label=f"advection-{cells}",
        cell_width=dx,
        domain_length=domain_length,
    )


def godunov_flux(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Godunov flux of Burgers' equation, ``f(u) = u^2/2`` with minimum at 0.

    ``F = max(f(max(u_l, 0)), f(min(u_r, 0)))`` covers shocks, rarefactions and
    the transonic case.
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    return np.maximum(0.5 * np.maximum(left, 0.0) ** 2, 0.5 * np.minimum(right, 0.0) ** 2)


def burgers_manufactured_system(cells: int, t0: float = 0.0) -> SemidiscreteSystem:
    """Burgers' equation on ``[0, 1]`` with the source making
    ``u = 2 + sin(2π(x - t))`` an exact solution, started from its value at ``t0``.

    The source ``s = 2π cos(2π(x - t))(1 + sin(2π(x - t)))`` is evaluated at
    the cell centres.
    """
    if cells < 8:
        raise ConfigError(f"at least 8 cells are needed, got {cells}", field="cells")
    dx = 1.0 / cells
    x = (np.arange(cells) + 0.5) * dx

    def exact(t: float) -> np.ndarray:
        return 2.0 + np.sin(2.0 * np.pi * (x - t))

    def source(t: float) -> np.ndarray:
        phase = 2.0 * np.pi * (x - t)
        return 2.0 * np.pi * np.cos(phase) * (1.0 + np.sin(phase))

    def rhs(t: float, u: np.ndarray) -> np.ndarray:
        flux = godunov_flux(u, np.roll(u, -1))
        return -(flux - np.roll(flux, 1)) / dx + source(t)

    return SemidiscreteSystem(
        dimension=cells,
        rhs=rhs,
        initial_state=exact(t0),
        exact_solution=exact,
        label=f"burgers-{cells}",
        cell_width=dx,
        domain_length=1.0,
    )


# =============================================================================
# Time integration
# =============================================================================


@dataclass(frozen=True)
class IntegrationResult:
    state: np.ndarray
    steps: int
    t_end: float


def _sparse_rows(matrix: np.ndarray) -> list[list[tuple[int, float]]]:
    return [[(int(j), float(row[j])) for j in np.flatnonzero(row)] for row in matrix]


def integrate(
    sys: SemidiscreteSystem,
    t: ShuOsherTableau,
    dt: float,
    t0: float,
    tf: float,
    u0: np.ndarray,
) -> IntegrationResult:
    """March ``u0`` from ``t0`` to ``tf`` with fixed steps of ``dt``.

    The last step is shortened to land on ``tf``. Stages are evaluated at
    ``t_n + c_k h``.

    Raises:
        DivergenceError: If a stage contains NaN or Inf
    """
    if not dt > 0.0:
        raise ConfigError(f"timestep must be positive, got {dt}", field="dt")
    if not tf > t0:
        raise ConfigError(f"end time {tf} must exceed start time {t0}", field="tf")

    alpha_rows = _sparse_rows(t.alpha)
    beta_rows = _sparse_rows(t.beta)
    needed = np.zeros(t.S, dtype=bool)
    for row in beta_rows:
        for column, _ in row:
            needed[column] = True

    span = tf - t0
    steps = max(1, int(np.ceil(span / dt - 1e-12)))
    u = np.array(u0, dtype=float)
    t_n = t0
    h = dt
    for n in range(steps):
        t_n = t0 + n * dt
        h = dt if n < steps - 1 else span - (steps - 1) * dt
        stages = [u]
        derivatives: list[np.ndarray | None] = []
        for k in range(t.S + 1):
            if k > 0:
                value = t.v[k] * u if t.v[k] else np.zeros_like(u)
                for column, weight in alpha_rows[k]:
                    value = value + weight * stages[column]
                for column, weight in beta_rows[k]:
                    value = value + (h * weight) * derivatives[column]
                if not np.all(np.isfinite(value)):
                    raise DivergenceError(f"non-finite state in stage {k + 1}", step=n)
                stages.append(value)
            if k < t.S:
                derivatives.append(sys.rhs(t_n + t.c[k] * h, stages[k]) if needed[k] else None)
        u = stages[t.S]
    return IntegrationResult(state=u, steps=steps, t_end=t_n + h)


# =============================================================================
# Errors and convergence
# =============================================================================


def error_norm(
    error: np.ndarray, norm: str, cell_width: float = 1.0, domain_length: float = 1.0
) -> float:
    """``linf`` maximum norm or ``weighted_l1``, ``sum|e| Δx / |Ω|``."""
    if norm == "linf":
        return float(np.max(np.abs(error)))
    if norm == "weighted_l1":
        return float(np.sum(np.abs(error)) * cell_width / domain_length)
    raise ConfigError(f"unknown norm '{norm}', expected one of {NORMS}", field="norm")


def total_variation_increase(u_initial: np.ndarray, u_final: np.ndarray) -> float:
    """Periodic total variation of ``u_final`` minus that of ``u_initial``."""
    u_initial = np.asarray(u_initial, dtype=float)
    u_final = np.asarray(u_final, dtype=float)
    if u_initial.shape != u_final.shape:
        raise ValueError(f"shape mismatch: {u_initial.shape} vs {u_final.shape}")

    def tv(u: np.ndarray) -> float:
        return float(np.sum(np.abs(np.roll(u, -1) - u)))

    return tv(u_final) - tv(u_initial)


def fit_slope(dts: np.ndarray, errors: np.ndarray) -> float | None:
    """Least-squares slope of ``log(error)`` over ``log(dt)``; None below three points."""
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    usable = np.isfinite(errors) & (errors > 0.0)
    if np.count_nonzero(usable) < 3:
        return None
    slope, _ = np.polyfit(np.log(dts[usable]), np.log(errors[usable]), 1)
    return float(slope)


def thread_count() -> int:
    """Worker count from ``STABOPT_THREADS``, default 1."""
    raw = os.environ.get(THREADS_VARIABLE, "1")
    try:
        count = int(raw)
    except ValueError as e:
        raise ConfigError(f"expected an integer, got '{raw}'", field=THREADS_VARIABLE) from e
    if count < 1:
        raise ConfigError(f"must be at least 1, got {count}", field=THREADS_VARIABLE)
    return count


@dataclass(frozen=True)
class ConvergenceStudy:
    """Errors of one tableau over a descending timestep sequence."""

    dt_sequence: np.ndarray
    error_norm: str
    errors: list[float | None]
    steps: list[int]
    slope: float | None
    reference: str = "exact"
    unstable: list[float] = field(default_factory=list)
    label: str = ""

    @property
    def slope_defined(self) -> bool:
        return self.slope is not None

    def to_report(self) -> ConvergenceReport:
        return ConvergenceReport(
            system=self.label,
            norm=self.error_norm,
            reference=self.reference,
            dts=self.dt_sequence.tolist(),
            errors=self.errors,
            steps=self.steps,
            unstable=self.unstable,
            slope=self.slope,
            slope_defined=self.slope_defined,
        )

    def write_csv(self, path: str | Path) -> Path:
        """Rows ``dt,error,steps``; unstable runs have an empty error."""
        path = Path(path)
        lines = ["dt,error,steps"]
        for dt, error, steps in zip(self.dt_sequence.tolist(), self.errors, self.steps, strict=True):
            lines.append(f"{dt!r},{'' if error is None else repr(error)},{steps}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def convergence_study(
    sys: SemidiscreteSystem,
    tableau: ShuOsherTableau,
    dts: list[float] | np.ndarray,
    norm: str = "linf",
    tf: float = 1.0,
    t0: float = 0.0,
    reference: str = "exact",
    workers: int | None = None,
) -> ConvergenceStudy:
    """Measure the temporal convergence slope of ``tableau`` on ``sys``.

    With ``reference="exact"`` errors are taken against ``sys.exact_solution``;
    with ``"fine"`` against a run at ``min(dts) / FINE_FACTOR``. Diverging runs
    are excluded from the fit and listed in ``unstable``.
    """
    dts = np.sort(np.asarray(dts, dtype=float))[::-1]
    if dts.size < 3:
        raise ConfigError(f"at least 3 timesteps are needed, got {dts.size}", field="dts")
    if reference not in REFERENCES:
        raise ConfigError(f"unknown reference '{reference}'", field="reference")
    if norm not in NORMS:
        raise ConfigError(f"unknown norm '{norm}', expected one of {NORMS}", field="norm")
    if reference == "exact" and sys.exact_solution is None:
        raise ConfigError("system has no exact solution, use reference 'fine'", field="reference")

    u0 = sys.initial_state
    if reference == "exact":
        target = sys.exact_solution(tf)
    else:
        target = integrate(sys, tableau, float(dts[-1]) / FINE_FACTOR, t0, tf, u0).state

    def run(dt: float) -> tuple[float | None, int]:
        try:
            result = integrate(sys, tableau, dt, t0, tf, u0)
        except DivergenceError as e:
            logger.warning(f"Run at dt={dt!r} diverged: {e}")
            return None, e.step
        return error_norm(result.state - target, norm, sys.cell_width, sys.domain_length), result.steps

    count = workers if workers is not None else thread_count()
    with ThreadPoolExecutor(max_workers=count) as pool:
        outcomes = list(pool.map(run, dts.tolist()))

    errors = [error for error, _ in outcomes]
    steps = [s for _, s in outcomes]
    unstable = [float(dt) for dt, error in zip(dts, errors, strict=True) if error is None]
    finite = np.array([np.nan if e is None else e for e in errors])
    slope = fit_slope(dts, finite)
    if slope is None:
        logger.warning("Convergence slope undefined, fewer than three positive errors")
    else:
        logger.info(f"Convergence slope {slope:.4f} on {sys.label} ({norm}, {reference})")
    return ConvergenceStudy(
        dt_sequence=dts,
        error_norm=norm,
        errors=errors,
        steps=steps,
        slope=slope,
        reference=reference,
        unstable=unstable,
        label=sys.label,
    )


def integration_report(
    sys: SemidiscreteSystem, tableau: ShuOsherTableau, dt: float, tf: float, t0: float = 0.0
) -> IntegrationReport:
    """Integrate from the system's initial state and summarize the outcome."""
    result = integrate(sys, tableau, dt, t0, tf, sys.initial_state)
    error_linf = error_l1 = None
    if sys.exact_solution is not None:
        error = result.state - sys.exact_solution(tf)
        error_linf = error_norm(error, "linf")
        error_l1 = error_norm(error, "weighted_l1", sys.cell_width, sys.domain_length)
    return IntegrationReport(
        system=sys.label,
        dt=dt,
        t0=t0,
        tf=tf,
        t_end=result.t_end,
        steps=result.steps,
        error_linf=error_linf,
        error_l1=error_l1,
        tv_increase=total_variation_increase(sys.initial_state, result.state),
    )
