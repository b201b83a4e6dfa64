"""Optimization of stability polynomials over their pseudo-extrema.

The free variables are the abscissae ``x`` of the pseudo-extrema, placed on
an enclosing curve of the scaled spectrum, plus small imaginary corrections
``y``. A probe at fixed timestep solves the feasibility problem in two
stages (``x`` only, then ``x`` and ``y`` jointly); the outer search brackets
and bisects the largest feasible timestep.

Each stage minimizes the squared hinge of ``|P(dt*λ)|^2 - 1`` with L-BFGS-B,
using exact gradients. Order conditions enter through an augmented
Lagrangian whose penalty grows tenfold per round, and every candidate is
projected back onto the order manifold by a Gauss-Newton polish before it is
checked against the full spectrum.
"""

import logging
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from scipy.optimize import minimize

from stabopt.envelope import (
    AlphaShapeBoundary,
    HullCurve,
    HullFunction,
    alpha_shape_upper,
    convex_hull_upper,
    equal_arclength_points,
)
from stabopt.exceptions import ConfigError, SpectrumValidationError
from stabopt.models import EnvelopeKind, OptimizeConfig, OptimizeMode
from stabopt.polynomial import (
    PolynomialGradient,
    PseudoExtremaSet,
    StabilityPolynomial,
    chebyshev_pe,
    check_order_constraints,
    eval_gradient,
    evaluate,
    order_constraint_gradient,
)
from stabopt.spectra import Spectrum, reduce_to_upper

logger = logging.getLogger(__name__)

# Squared-modulus margin the hinge aims for, |P|^2 <= 1 - MARGIN
MARGIN = 1e-10

# Eigenvalues this close to the origin (relative) are left out of the hinge
ORIGIN_EXCLUSION = 1e-14

# Distance kept from the origin, relative to the envelope extent
ORIGIN_GAP = 1e-8

# Restart jitter as a fraction of the box width
JITTER = 0.005

MAX_HALVINGS = 40
MAX_DOUBLINGS = 40
POLISH_STEPS = 8


class ResultStatus(StrEnum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class StageSolution:
    """Outcome of one optimization stage at a fixed timestep.

    ``x`` holds the real pseudo-extrema followed by the upper abscissae (or
    arc-length parameters on an alpha-shape curve); ``y`` holds the imaginary
    corrections of the upper pseudo-extrema.
    """

    x: np.ndarray
    y: np.ndarray
    pe: PseudoExtremaSet
    max_violation: float
    order_residual: np.ndarray
    iterations: int
    feasible: bool
    hit_iteration_limit: bool = False


@dataclass(frozen=True)
class OptimizeResult:
    """Result of a probe or a timestep search.

    ``polynomial`` is ``None`` unless the result is feasible; ``pe`` always
    holds the best iterate, in scaled coordinates ``z = achieved_dt * λ``.
    """

    polynomial: StabilityPolynomial | None
    pe: PseudoExtremaSet
    achieved_dt: float
    max_violation: float
    stage1_solution: np.ndarray
    stage2_corrections: np.ndarray
    iterations: int
    status: ResultStatus
    order_residual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    envelope_scale: float | None = None

    @property
    def feasible(self) -> bool:
        return self.status in (ResultStatus.OPTIMAL, ResultStatus.FEASIBLE)


# =============================================================================
# Parametrizations
# =============================================================================


class _HullParametrization:
    """Upper pseudo-extrema ``x + i(I(x) + y)`` on the upper hull ``I``."""

    def __init__(self, envelope: HullFunction, n_real: int, n_upper: int, eps: float):
        self.envelope = envelope
        self.n_real = n_real
        self.n_upper = n_upper
        self.lower = envelope.x_min
        self.upper = -ORIGIN_GAP * abs(envelope.x_min)
        self.y_bound = eps * envelope.max_height

    def x_bounds(self) -> list[tuple[float, float]]:
        return [(self.lower, self.upper)] * (self.n_real + self.n_upper)

    def y_bounds(self) -> list[tuple[float, float]]:
        return [(-self.y_bound, self.y_bound)] * self.n_upper

    def _imag(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.envelope.height(x[self.n_real :]) + y

    def pe(self, x: np.ndarray, y: np.ndarray) -> PseudoExtremaSet:
        upper = x[self.n_real :] + 1j * np.abs(self._imag(x, y))
        return PseudoExtremaSet(x[: self.n_real], upper)

    def chain(
        self, x: np.ndarray, y: np.ndarray, g: PolynomialGradient
    ) -> tuple[np.ndarray, np.ndarray]:
        sign = np.where(self._imag(x, y) >= 0.0, 1.0, -1.0)
        g_im = g.upper_im * sign
        slope = self.envelope.slope(x[self.n_real :])
        gx = np.concatenate([g.real, g.upper_re + g_im * slope], axis=-1)
        return gx, g_im

    def rescale(self, x: np.ndarray, y: np.ndarray, ratio: float) -> tuple[np.ndarray, np.ndarray]:
        return x * ratio, y * ratio


class _CurveParametrization:
    """Upper pseudo-extrema ``γ(τ) + iy`` on an alpha-shape boundary curve."""

    def __init__(self, curve: HullCurve, n_real: int, n_upper: int, eps: float):
        self.curve = curve
        self.n_real = n_real
        self.n_upper = n_upper
        x_min = float(np.min(curve.points.real))
        self.lower = x_min
        self.upper = -ORIGIN_GAP * abs(x_min)
        self.y_bound = eps * float(np.max(curve.points.imag))

    def x_bounds(self) -> list[tuple[float, float]]:
        return [(self.lower, self.upper)] * self.n_real + [
            (0.0, 1.0 - ORIGIN_GAP)
        ] * self.n_upper

    def y_bounds(self) -> list[tuple[float, float]]:
        return [(-self.y_bound, self.y_bound)] * self.n_upper

    def pe(self, x: np.ndarray, y: np.ndarray) -> PseudoExtremaSet:
        gamma = self.curve.at(x[self.n_real :])
        return PseudoExtremaSet(x[: self.n_real], gamma.real + 1j * np.abs(gamma.imag + y))

    def chain(
        self, x: np.ndarray, y: np.ndarray, g: PolynomialGradient
    ) -> tuple[np.ndarray, np.ndarray]:
        tau = x[self.n_real :]
        sign = np.where(self.curve.at(tau).imag + y >= 0.0, 1.0, -1.0)
        g_im = g.upper_im * sign
        d = self.curve.derivative(tau)
        gx = np.concatenate([g.real, g.upper_re * d.real + g_im * d.imag], axis=-1)
        return gx, g_im

    def rescale(self, x: np.ndarray, y: np.ndarray, ratio: float) -> tuple[np.ndarray, np.ndarray]:
        scaled = x.copy()
        scaled[: self.n_real] *= ratio
        return scaled, y * ratio


_Parametrization = _HullParametrization | _CurveParametrization


def _counts(S: int) -> tuple[int, int]:
    """Numbers of real and upper pseudo-extrema in the canonical layout."""
    if S % 2 == 0:
        return 1, S // 2 - 1
    return 0, (S - 1) // 2


# =============================================================================
# Initialization
# =============================================================================


def initialize_pe(
    h: HullFunction | HullCurve | AlphaShapeBoundary,
    S: int,
    prior: OptimizeResult | None = None,
    scale_ratio: float = 2.0,
) -> np.ndarray:
    """Initial abscissae of the pseudo-extrema on an envelope.

    Without a prior the ``S // 2`` abscissae are spread with equal arc length,
    starting at the left end for even S (that point becomes the real
    pseudo-extremum). Flat spectra use the Chebyshev pseudo-extrema stretched
    over the envelope instead.

    With a prior at degree S/2 every second abscissa is the prior's, scaled by
    ``scale_ratio`` (the ratio of envelope scales, 2 for linear timestep
    growth), and the remaining ones sit at the arc-length midpoints between
    them, the last one toward the origin.

    Returns:
        Abscissae in ascending order

    Raises:
        ConfigError: If the prior does not have degree S/2 or S is not a
            multiple of four
    """
    even = S % 2 == 0
    n = S // 2 if even else (S - 1) // 2

    if prior is not None:
        if S % 4 or prior.pe.degree != S // 2 or not prior.pe.is_canonical:
            raise ConfigError(
                f"doubling needs S divisible by 4 and a prior of degree {S // 2}, "
                f"got S={S} and prior degree {prior.pe.degree}",
                field="prior",
            )
        if isinstance(h, HullFunction) and not h.degenerate:
            return _doubled_abscissae(h, n, prior.pe, scale_ratio)
        logger.warning("Doubling prior ignored on a non-hull or flat envelope")

    if isinstance(h, HullFunction) and h.degenerate:
        cheb = chebyshev_pe(S).scaled(abs(h.x_min) / (2.0 * S**2))
        return np.sort(np.concatenate([cheb.real_pe, cheb.upper_pe.real]))

    return equal_arclength_points(h, n, include_left_endpoint=even).real


def _doubled_abscissae(
    h: HullFunction, n: int, prior: PseudoExtremaSet, ratio: float
) -> np.ndarray:
    kept = np.sort(np.concatenate([prior.real_pe, prior.upper_pe.real])) * ratio
    kept = np.clip(kept, h.x_min, -ORIGIN_GAP * abs(h.x_min))
    position = h.arclength(kept)
    following = np.append(position[1:], h.length)
    midpoints = h.to_curve().at(0.5 * (position + following) / h.length).real

    x0 = np.empty(n)
    x0[0::2] = kept
    x0[1::2] = midpoints
    return x0


def _initial_variables(
    cfg: OptimizeConfig,
    envelope: HullFunction | AlphaShapeBoundary,
    param: _Parametrization,
    prior: OptimizeResult | None,
    scale_ratio: float,
) -> tuple[np.ndarray, np.ndarray]:
    y0 = np.zeros(param.n_upper)
    if isinstance(param, _HullParametrization):
        return initialize_pe(envelope, cfg.degree, prior, scale_ratio), y0

    if prior is not None:
        logger.warning("Doubling prior ignored for the alpha-shape envelope")
    n = param.n_real + param.n_upper
    if param.n_real:
        tau = np.arange(n) / n
        x_left = float(param.curve.at(0.0).real)
        x0 = np.concatenate([[np.clip(x_left, param.lower, param.upper)], tau[1:]])
    else:
        spacing = 1.0 / (n + 0.5)
        x0 = spacing / 2.0 + spacing * np.arange(n)
    return x0, y0


def _build_envelope(
    cfg: OptimizeConfig, reduced: Spectrum, scale: float
) -> tuple[HullFunction | AlphaShapeBoundary, _Parametrization]:
    scaled = reduced.scaled(scale)
    hull = convex_hull_upper(scaled)
    n_real, n_upper = _counts(cfg.degree)
    if cfg.envelope == EnvelopeKind.ALPHA and not hull.degenerate:
        boundary = alpha_shape_upper(scaled, cfg.alpha / scale)
        return boundary, _CurveParametrization(boundary.to_curve(), n_real, n_upper, cfg.eps)
    if cfg.envelope == EnvelopeKind.ALPHA:
        logger.warning("Flat spectrum, falling back to the convex hull envelope")
    return hull, _HullParametrization(hull, n_real, n_upper, cfg.eps)


# =============================================================================
# Merit function
# =============================================================================


@dataclass
class _Merit:
    """Squared hinge of ``|P|^2`` plus the augmented Lagrangian of the order conditions."""

    param: _Parametrization
    points: np.ndarray
    order: int
    y_fixed: np.ndarray | None
    multipliers: np.ndarray
    weight: float = 1.0
    scale: float = 1.0

    def split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n_x = self.param.n_real + self.param.n_upper
        if self.y_fixed is not None:
            return v, self.y_fixed
        return v[:n_x], v[n_x:]

    def hinge(self, pe: PseudoExtremaSet) -> tuple[float, np.ndarray]:
        excess = np.abs(evaluate(pe, self.points)) ** 2 - (1.0 - MARGIN)
        excess = np.maximum(excess, 0.0)
        return float(np.sum(excess**2)), excess

    def __call__(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        x, y = self.split(v)
        pe = self.param.pe(x, y)
        value, excess = self.hinge(pe)

        active = excess > 0.0
        if np.any(active):
            g = eval_gradient(pe, self.points[active])
            w = 2.0 * excess[active] / self.scale
            combined = PolynomialGradient(w @ g.real, w @ g.upper_re, w @ g.upper_im)
        else:
            n_real, n_upper = self.param.n_real, self.param.n_upper
            combined = PolynomialGradient(np.zeros(n_real), np.zeros(n_upper), np.zeros(n_upper))
        value /= self.scale

        c = check_order_constraints(pe, self.order)
        if c.size:
            J = order_constraint_gradient(pe, self.order)
            coefficient = self.multipliers + self.weight * c
            value += float(self.multipliers @ c + 0.5 * self.weight * (c @ c))
            combined = PolynomialGradient(
                combined.real + coefficient @ J.real,
                combined.upper_re + coefficient @ J.upper_re,
                combined.upper_im + coefficient @ J.upper_im,
            )

        gx, gy = self.param.chain(x, y, combined)
        grad = gx if self.y_fixed is not None else np.concatenate([gx, gy])
        return value, grad


# =============================================================================
# Stages
# =============================================================================


def _polish(
    param: _Parametrization,
    x: np.ndarray,
    y: np.ndarray,
    order: int,
    with_y: bool,
    tol: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton projection onto the order-condition manifold within the box."""
    if order < 2:
        return x, y
    bounds = param.x_bounds() + (param.y_bounds() if with_y else [])
    lo, hi = np.array(bounds).T
    n_x = x.size
    v = np.concatenate([x, y]) if with_y else x.copy()
    for _ in range(POLISH_STEPS):
        xi, yi = (v[:n_x], v[n_x:]) if with_y else (v, y)
        pe = param.pe(xi, yi)
        c = check_order_constraints(pe, order)
        if np.max(np.abs(c)) <= 1e-3 * tol:
            break
        gx, gy = param.chain(xi, yi, order_constraint_gradient(pe, order))
        J = np.concatenate([gx, gy], axis=1) if with_y else gx
        step = np.linalg.lstsq(J, c, rcond=None)[0]
        v = np.clip(v - step, lo, hi)
    return (v[:n_x], v[n_x:]) if with_y else (v, y)


def _assess(
    cfg: OptimizeConfig,
    param: _Parametrization,
    x: np.ndarray,
    y: np.ndarray,
    all_points: np.ndarray,
) -> tuple[PseudoExtremaSet, float, np.ndarray, bool]:
    pe = param.pe(x, y)
    violation = float(np.max(np.abs(evaluate(pe, all_points)) - 1.0))
    residual = check_order_constraints(pe, cfg.order)
    order_ok = residual.size == 0 or float(np.max(np.abs(residual))) <= cfg.order_tol
    return pe, violation, residual, violation <= cfg.constraint_tol and order_ok


def _hinge_points(points: np.ndarray) -> np.ndarray:
    radius = float(np.max(np.abs(points)))
    return points[np.abs(points) > ORIGIN_EXCLUSION * radius]


def _run_stage(
    cfg: OptimizeConfig,
    param: _Parametrization,
    all_points: np.ndarray,
    subset: np.ndarray,
    x0: np.ndarray,
    y0: np.ndarray,
    with_y: bool,
) -> StageSolution:
    """Drive the violation below ``constraint_tol`` from ``(x0, y0)``."""
    bounds = param.x_bounds() + (param.y_bounds() if with_y else [])
    lo, hi = np.array(bounds).T
    x = np.clip(x0, lo[: x0.size], hi[: x0.size])
    y = np.clip(y0, -param.y_bound, param.y_bound)

    pe, violation, residual, feasible = _assess(cfg, param, x, y, all_points)
    if not feasible:
        x, y = _polish(param, x, y, cfg.order, with_y, cfg.order_tol)
        pe, violation, residual, feasible = _assess(cfg, param, x, y, all_points)
    if feasible:
        return StageSolution(x, y, pe, violation, residual, 0, True)

    merit = _Merit(
        param=param,
        points=_hinge_points(all_points[subset]),
        order=cfg.order,
        y_fixed=None if with_y else y,
        multipliers=np.zeros(max(cfg.order - 1, 0)),
    )
    iterations = 0
    hit_limit = False
    best = (violation, x, y)
    found: list[tuple[np.ndarray, np.ndarray]] = []

    def stop_when_feasible(intermediate_result) -> None:
        xi, yi = merit.split(intermediate_result.x)
        xi, yi = _polish(param, xi, yi, cfg.order, with_y, cfg.order_tol)
        if _assess(cfg, param, xi, yi, all_points)[3]:
            found.append((xi.copy(), yi.copy()))
            raise StopIteration

    for round_index in range(cfg.penalty_rounds):
        v0 = np.concatenate([x, y]) if with_y else x
        start_value = merit.hinge(param.pe(x, y))[0]
        merit.scale = start_value if start_value > 0.0 else 1.0

        res = minimize(
            merit,
            v0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            callback=stop_when_feasible,
            options={"maxiter": cfg.max_iterations, "ftol": 1e-15, "gtol": 1e-14},
        )
        iterations += int(res.nit)
        hit_limit = res.status == 1

        if found:
            x, y = found[-1]
        else:
            x, y = merit.split(res.x)
            x, y = _polish(param, x, y, cfg.order, with_y, cfg.order_tol)
        pe, violation, residual, feasible = _assess(cfg, param, x, y, all_points)
        logger.debug(
            f"Round {round_index}: weight {merit.weight:.3g}, nit {res.nit}, "
            f"violation {violation:.3e}, residual {residual.tolist()}"
        )
        if violation < best[0]:
            best = (violation, x, y)
        if feasible:
            return StageSolution(x, y, pe, violation, residual, iterations, True)

        # active set: add violated eigenvalues left out of the subset
        modulus = np.abs(evaluate(pe, all_points)) - 1.0
        violated = np.flatnonzero(modulus > cfg.constraint_tol)
        missing = np.setdiff1d(violated, subset)
        if missing.size:
            subset = np.union1d(subset, missing)
            merit.points = _hinge_points(all_points[subset])
            logger.debug(f"Added {missing.size} violated eigenvalues to the constraint set")

        c = check_order_constraints(pe, cfg.order)
        merit.multipliers = merit.multipliers + merit.weight * c
        merit.weight *= 10.0

    violation, x, y = best
    pe, violation, residual, _ = _assess(cfg, param, x, y, all_points)
    return StageSolution(x, y, pe, violation, residual, iterations, False, hit_limit)


def _constraint_subset(cfg: OptimizeConfig, reduced: Spectrum, count: int) -> np.ndarray:
    """Indices of the eigenvalues used as constraints."""
    everything = np.arange(reduced.size)
    if cfg.hull_plus_samples is None:
        return everything
    values = reduced.eigenvalues
    hull = convex_hull_upper(reduced.scaled(1.0))
    tol = 1e-9 * reduced.max_modulus
    on_hull = np.flatnonzero(values.imag >= hull.height(values.real) - tol)
    interior = np.setdiff1d(everything, on_hull)
    k = min(cfg.hull_plus_samples, interior.size)
    picks = interior[np.unique(np.linspace(0, interior.size - 1, k).round().astype(int))] if k else []
    subset = np.union1d(on_hull, picks).astype(int)
    if subset.size <= count + 1:
        logger.warning(
            f"Constraint subset of {subset.size} eigenvalues is too small for "
            f"{count} pseudo-extrema, using the full spectrum"
        )
        return everything
    return subset


def _prepare(
    cfg: OptimizeConfig, spectrum: Spectrum, envelope, dt: float
) -> tuple[Spectrum, _Parametrization, np.ndarray, np.ndarray]:
    if not dt > 0.0:
        raise SpectrumValidationError(f"timestep must be positive, got {dt}")
    reduced = reduce_to_upper(spectrum)
    n_real, n_upper = _counts(cfg.degree)
    if isinstance(envelope, AlphaShapeBoundary):
        param = _CurveParametrization(envelope.to_curve(), n_real, n_upper, cfg.eps)
    else:
        param = _HullParametrization(envelope, n_real, n_upper, cfg.eps)
    subset = _constraint_subset(cfg, reduced, n_real + n_upper)
    return reduced, param, dt * reduced.eigenvalues, subset


def solve_stage1(
    cfg: OptimizeConfig,
    spectrum: Spectrum,
    envelope: HullFunction | AlphaShapeBoundary,
    dt: float,
    x0: np.ndarray,
) -> StageSolution:
    """Stage 1: pseudo-extrema on the envelope, ``x`` free within its box.

    ``x0`` holds abscissae on a hull envelope, or the real pseudo-extremum
    followed by arc-length parameters on an alpha-shape curve.
    """
    _, param, points, subset = _prepare(cfg, spectrum, envelope, dt)
    return _run_stage(
        cfg, param, points, subset, np.asarray(x0, float), np.zeros(param.n_upper), False
    )


def solve_stage2(
    cfg: OptimizeConfig,
    spectrum: Spectrum,
    envelope: HullFunction | AlphaShapeBoundary,
    dt: float,
    x0: np.ndarray,
    y0: np.ndarray | None = None,
) -> StageSolution:
    """Stage 2: joint ``x`` and imaginary corrections ``|y| <= eps * max Im``."""
    _, param, points, subset = _prepare(cfg, spectrum, envelope, dt)
    y = np.zeros(param.n_upper) if y0 is None else np.asarray(y0, float)
    return _run_stage(cfg, param, points, subset, np.asarray(x0, float), y, True)


# =============================================================================
# Probes and timestep search
# =============================================================================


def _probe(
    cfg: OptimizeConfig,
    reduced: Spectrum,
    dt: float,
    envelope_scale: float | None,
    start: StageSolution | None = None,
    start_ratio: float = 1.0,
    prior: OptimizeResult | None = None,
) -> tuple[StageSolution, float]:
    """Feasibility probe at ``dt``: stage 1, stage 2, then jittered restarts."""
    scale = dt if envelope_scale is None else envelope_scale
    envelope, param = _build_envelope(cfg, reduced, scale)
    n_real, n_upper = _counts(cfg.degree)
    subset = _constraint_subset(cfg, reduced, n_real + n_upper)
    points = dt * reduced.eigenvalues

    if start is not None:
        x0, y0 = param.rescale(start.x, start.y, start_ratio)
    else:
        ratio = 2.0
        if prior is not None and prior.envelope_scale:
            ratio = scale / prior.envelope_scale
        x0, y0 = _initial_variables(cfg, envelope, param, prior, ratio)

    iterations = 0
    best: StageSolution | None = None
    lo, hi = np.array(param.x_bounds()).T
    rng = np.random.default_rng(cfg.seed)
    for attempt in range(cfg.restarts + 1):
        if attempt:
            x0 = np.clip(x0 + JITTER * (hi - lo) * rng.uniform(-1.0, 1.0, x0.size), lo, hi)
            logger.debug(f"Restart {attempt} at dt={dt:.17g}")
        stage = _run_stage(cfg, param, points, subset, x0, y0, with_y=False)
        iterations += stage.iterations
        if not stage.feasible and param.y_bound > 0.0 and param.n_upper:
            second = _run_stage(cfg, param, points, subset, stage.x, stage.y, with_y=True)
            iterations += second.iterations
            if second.feasible or second.max_violation < stage.max_violation:
                stage = second
        if best is None or stage.max_violation < best.max_violation or stage.feasible:
            best = stage
        if stage.feasible:
            break

    logger.info(
        f"Probe dt={dt:.17g}: {'feasible' if best.feasible else 'infeasible'}, "
        f"violation {best.max_violation:.3e}, {iterations} iterations"
    )
    return StageSolution(
        best.x,
        best.y,
        best.pe,
        best.max_violation,
        best.order_residual,
        iterations,
        best.feasible,
        best.hit_iteration_limit,
    ), scale


def _order_scale(cfg: OptimizeConfig, reduced: Spectrum) -> float | None:
    """Fixed envelope scale for order >= 2.

    The equal-arc-length start on the envelope at scale E satisfies the first
    order condition exactly when ``E = 2 * g(1)`` with ``g(1) = -sum(1/r)`` of
    the start at unit scale, since ``g`` scales like ``1/E``.
    """
    if cfg.order < 2:
        return None
    if cfg.expected_dt is not None:
        return cfg.expected_dt
    envelope, param = _build_envelope(cfg, reduced, 1.0)
    x0, y0 = _initial_variables(cfg, envelope, param, None, 2.0)
    g = -float(np.sum(1.0 / param.pe(x0, y0).roots()).real)
    return 2.0 * g


def _result(
    cfg: OptimizeConfig,
    stage: StageSolution,
    dt: float,
    iterations: int,
    status: ResultStatus,
    scale: float | None,
) -> OptimizeResult:
    polynomial = None
    if status in (ResultStatus.OPTIMAL, ResultStatus.FEASIBLE):
        polynomial = StabilityPolynomial(stage.pe, cfg.order, dt)
    return OptimizeResult(
        polynomial=polynomial,
        pe=stage.pe,
        achieved_dt=dt,
        max_violation=stage.max_violation,
        stage1_solution=stage.x,
        stage2_corrections=stage.y,
        iterations=iterations,
        status=status,
        order_residual=stage.order_residual,
        envelope_scale=scale,
    )


def find_max_dt(
    cfg: OptimizeConfig, spectrum: Spectrum, prior: OptimizeResult | None = None
) -> OptimizeResult:
    """Run a feasibility probe or search for the largest stable timestep.

    In feasibility mode the probe runs at ``cfg.expected_dt``. In maximize
    mode a seed timestep is doubled until infeasible (or halved until
    feasible) and the bracket is bisected to ``bisection_rtol``, each probe
    warm-started from the best feasible solution so far.

    Args:
        cfg: Optimizer configuration
        spectrum: Raw or reduced spectrum
        prior: Result at degree S/2 used for the doubling initialization

    Returns:
        OptimizeResult, with status ``infeasible`` when no feasible timestep
        was found
    """
    reduced = reduce_to_upper(spectrum)
    scale = _order_scale(cfg, reduced)
    logger.info(
        f"Optimizing S={cfg.degree}, p={cfg.order} over {reduced.size} eigenvalues "
        f"({cfg.mode}, envelope {cfg.envelope})"
    )

    if cfg.mode == OptimizeMode.FEASIBILITY:
        dt = cfg.expected_dt
        stage, used = _probe(cfg, reduced, dt, scale, prior=prior)
        if stage.feasible:
            status = ResultStatus.FEASIBLE
        elif stage.hit_iteration_limit:
            status = ResultStatus.MAX_ITER
        else:
            status = ResultStatus.INFEASIBLE
        return _result(cfg, stage, dt, stage.iterations, status, used)

    expected = cfg.expected_dt
    if prior is not None and prior.feasible:
        expected = prior.achieved_dt * cfg.degree / prior.pe.degree
    seed = 1.2 * expected if expected else (cfg.degree - 1) / reduced.max_modulus

    iterations = 0
    stage, used = _probe(cfg, reduced, seed, scale, prior=prior)
    iterations += stage.iterations
    best, best_dt, best_scale = stage, seed, used
    lo = hi = None

    if stage.feasible:
        lo = seed
        for _ in range(MAX_DOUBLINGS):
            trial = 2.0 * lo
            stage, used = _probe(
                cfg, reduced, trial, scale, start=best, start_ratio=_ratio(scale, 2.0)
            )
            iterations += stage.iterations
            if not stage.feasible:
                hi = trial
                break
            lo, best, best_dt, best_scale = trial, stage, trial, used
        else:
            raise SpectrumValidationError("timestep search did not terminate, spectrum unbounded?")
    else:
        hi = seed
        for _ in range(MAX_HALVINGS):
            trial = 0.5 * hi
            stage, used = _probe(cfg, reduced, trial, scale, prior=prior)
            iterations += stage.iterations
            if stage.feasible:
                lo, best, best_dt, best_scale = trial, stage, trial, used
                break
            hi = trial
            if stage.max_violation < best.max_violation:
                best, best_dt, best_scale = stage, trial, used
        if lo is None:
            logger.info(f"No feasible timestep above {hi:.3e}")
            return _result(cfg, best, best_dt, iterations, ResultStatus.INFEASIBLE, best_scale)

    logger.info(f"Bracket [{lo:.17g}, {hi:.17g}]")
    while hi - lo > cfg.bisection_rtol * lo:
        mid = 0.5 * (lo + hi)
        stage, used = _probe(
            cfg, reduced, mid, scale, start=best, start_ratio=_ratio(scale, mid / lo)
        )
        iterations += stage.iterations
        if stage.feasible:
            lo, best, best_dt, best_scale = mid, stage, mid, used
        else:
            hi = mid
    logger.info(f"Largest feasible timestep {best_dt:.17g} after {iterations} iterations")
    return _result(cfg, best, best_dt, iterations, ResultStatus.OPTIMAL, best_scale)


def _ratio(envelope_scale: float | None, dt_ratio: float) -> float:
    """Warm-start rescaling: follows dt for a moving envelope, 1 for a fixed one."""
    return dt_ratio if envelope_scale is None else 1.0


def find_max_dt_doubling(
    cfg: OptimizeConfig, spectrum: Spectrum, start_degree: int
) -> OptimizeResult:
    """Optimize degrees ``start_degree, 2*start_degree, ..., cfg.degree`` in turn.

    Each degree is initialized from the previous result by the doubling rule
    of ``initialize_pe``.

    Raises:
        ConfigError: If ``cfg.degree`` is not ``start_degree`` times a power of two
    """
    ratio = cfg.degree // start_degree if start_degree > 0 else 0
    if (
        start_degree < 4
        or start_degree % 2
        or cfg.degree % start_degree
        or ratio & (ratio - 1)
    ):
        raise ConfigError(
            f"degree {cfg.degree} is not {start_degree} times a power of two",
            field="start_degree",
        )

    result: OptimizeResult | None = None
    degree = start_degree
    while True:
        step = cfg.model_copy(update={"degree": degree})
        result = find_max_dt(step, spectrum, prior=result if result and result.feasible else None)
        logger.info(f"Degree {degree}: dt={result.achieved_dt:.17g} ({result.status})")
        if not result.feasible or degree >= cfg.degree:
            return result
        degree *= 2


def verify_stability(poly: StabilityPolynomial, spectrum: Spectrum) -> float:
    """Maximum of ``|P(dt*λ)| - 1`` over the reduced spectrum."""
    if spectrum.size == 0:
        raise SpectrumValidationError("spectrum is empty")
    reduced = reduce_to_upper(spectrum)
    values = evaluate(poly.pe, poly.dt * reduced.eigenvalues)
    return float(np.max(np.abs(values) - 1.0))
