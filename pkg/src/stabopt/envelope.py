"""Spectrum-enclosing geometry in the second quadrant.

The pseudo-extrema ansatz places points on a piecewise-linear envelope of the
scaled spectrum: the upper convex hull read as a concave function of the real
part, or an arc-length parametrized curve taken from the hull or from an
alpha shape for nonconvex spectra.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial import Delaunay, QhullError

from stabopt.exceptions import EnvelopeError

if TYPE_CHECKING:
    from stabopt.spectra import ScaledSpectrum

logger = logging.getLogger(__name__)

# Heights below this fraction of the spectral extent count as a flat spectrum
DEGENERATE_TOLERANCE = 1e-12

# Abscissae and knot gaps below this fraction of the extent are round-off
MERGE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class HullFunction:
    """Concave piecewise-linear function through the upper hull knots.

    Knots run from ``(x_min, ·)`` to the imaginary axis with strictly increasing
    abscissae. ``degenerate`` marks a flat spectrum, for which the function is
    identically zero.
    """

    knots_x: np.ndarray
    knots_y: np.ndarray
    degenerate: bool = False
    _cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        kx = np.asarray(self.knots_x, dtype=float)
        ky = np.asarray(self.knots_y, dtype=float)
        if kx.ndim != 1 or kx.shape != ky.shape or kx.size < 2:
            raise EnvelopeError("hull function needs at least two knots")
        if np.any(np.diff(kx) <= 0.0):
            raise EnvelopeError("hull knots must have strictly increasing abscissae")
        segment = np.hypot(np.diff(kx), np.diff(ky))
        object.__setattr__(self, "knots_x", kx)
        object.__setattr__(self, "knots_y", ky)
        object.__setattr__(self, "_cumulative", np.concatenate([[0.0], np.cumsum(segment)]))

    @property
    def x_min(self) -> float:
        return float(self.knots_x[0])

    @property
    def max_height(self) -> float:
        return float(np.max(self.knots_y))

    @property
    def length(self) -> float:
        return float(self._cumulative[-1])

    def _segment(self, x: np.ndarray) -> np.ndarray:
        index = np.searchsorted(self.knots_x, x, side="right") - 1
        return np.clip(index, 0, self.knots_x.size - 2)

    def height(self, x: np.ndarray | float) -> np.ndarray:
        """Evaluate the interpolant, clamping abscissae to ``[x_min, 0]``."""
        return np.interp(x, self.knots_x, self.knots_y)

    def slope(self, x: np.ndarray | float) -> np.ndarray:
        seg = self._segment(np.asarray(x, dtype=float))
        slopes = np.diff(self.knots_y) / np.diff(self.knots_x)
        return slopes[seg]

    def arclength(self, x: np.ndarray | float) -> np.ndarray:
        """Arc length from the left end to the point above ``x``."""
        x = np.clip(np.asarray(x, dtype=float), self.knots_x[0], self.knots_x[-1])
        seg = self._segment(x)
        slopes = np.diff(self.knots_y) / np.diff(self.knots_x)
        return self._cumulative[seg] + np.hypot(1.0, slopes[seg]) * (
            x - self.knots_x[seg]
        )

    def to_curve(self) -> "HullCurve":
        return HullCurve.from_points(self.knots_x + 1j * self.knots_y)


@dataclass(frozen=True)
class HullCurve:
    """Polyline parametrized by normalized cumulative arc length ``τ ∈ [0, 1]``."""

    tau: np.ndarray
    points: np.ndarray
    length: float

    def __post_init__(self) -> None:
        if self.tau.size < 2 or self.tau[0] != 0.0 or self.tau[-1] != 1.0:
            raise EnvelopeError("curve parameter must run from 0 to 1")
        if np.any(np.diff(self.tau) <= 0.0):
            raise EnvelopeError("curve knots must be distinct")

    @classmethod
    def from_points(cls, points: np.ndarray) -> "HullCurve":
        pts = np.asarray(points, dtype=np.complex128)
        if pts.size >= 2:
            threshold = MERGE_TOLERANCE * float(np.sum(np.abs(np.diff(pts))))
            kept = [pts[0]]
            for point in pts[1:-1]:
                if abs(point - kept[-1]) > threshold:
                    kept.append(point)
            # the last knot is kept exactly, replacing a neighbour within round-off
            if abs(pts[-1] - kept[-1]) <= threshold and len(kept) > 1:
                kept.pop()
            kept.append(pts[-1])
            pts = np.array(kept)
        if pts.size < 2 or np.abs(pts[-1] - pts[0]) == 0.0:
            raise EnvelopeError("curve needs at least two distinct points")
        cumulative = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(pts)))])
        length = float(cumulative[-1])
        tau = cumulative / length
        tau[-1] = 1.0
        return cls(tau=tau, points=pts, length=length)

    def at(self, tau: np.ndarray | float) -> np.ndarray:
        t = np.clip(tau, 0.0, 1.0)
        return np.interp(t, self.tau, self.points.real) + 1j * np.interp(
            t, self.tau, self.points.imag
        )

    def derivative(self, tau: np.ndarray | float) -> np.ndarray:
        """Derivative ``dγ/dτ`` of the segment containing ``tau``."""
        t = np.asarray(tau, dtype=float)
        seg = np.clip(np.searchsorted(self.tau, t, side="right") - 1, 0, self.tau.size - 2)
        return (np.diff(self.points) / np.diff(self.tau))[seg]


@dataclass(frozen=True)
class AlphaShapeBoundary:
    """Upper boundary polyline of an alpha shape, from the left end to the origin."""

    alpha: float
    points: np.ndarray

    def to_curve(self) -> HullCurve:
        return HullCurve.from_points(self.points)


# =============================================================================
# Convex hull
# =============================================================================


def _cross(o: tuple[float, float], a: tuple[float, float], b: tuple[float, float]) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_upper(s: "ScaledSpectrum") -> HullFunction:
    """Upper convex hull of the scaled spectrum plus the origin.

    Uses Andrew's monotone chain on the points ``(Re z, |Im z|)``, keeping the
    highest point for each abscissa so that the result is a function of x.
    Abscissae within ``MERGE_TOLERANCE`` of the extent are one abscissa, so
    conjugate eigenvalues folded onto each other count once. The last knot
    is the origin, or the highest eigenvalue on the imaginary axis when there
    is one.

    Raises:
        EnvelopeError: If the spectrum has no extent to the left of the origin
    """
    values = np.asarray(s.values)
    xs = np.append(values.real, 0.0)
    ys = np.append(np.abs(values.imag), 0.0)

    order = np.lexsort((-ys, xs))
    xs, ys = xs[order], ys[order]
    tol = MERGE_TOLERANCE * max(abs(float(xs[0])), float(np.max(ys)))
    starts = np.flatnonzero(np.concatenate([[True], np.diff(xs) > tol]))
    ys = np.maximum.reduceat(ys, starts)
    xs = xs[starts]
    if xs.size >= 2 and abs(xs[-1]) <= tol:
        xs[-1] = 0.0

    if xs.size < 2 or xs[0] >= 0.0:
        raise EnvelopeError("spectrum needs at least one eigenvalue with Re < 0")

    x_min = float(xs[0])
    if float(np.max(ys)) <= DEGENERATE_TOLERANCE * max(abs(x_min), float(np.max(ys))):
        logger.debug(f"Flat spectrum on [{x_min}, 0], hull is degenerate")
        return HullFunction(np.array([x_min, 0.0]), np.zeros(2), degenerate=True)

    hull: list[tuple[float, float]] = []
    for point in zip(xs.tolist(), ys.tolist(), strict=True):
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], point) >= 0.0:
            hull.pop()
        hull.append(point)

    knots = np.array(hull)
    return HullFunction(knots[:, 0], knots[:, 1])


def interpolate_height(h: HullFunction, x: float) -> float:
    """Evaluate the hull interpolant at ``x``.

    Raises:
        EnvelopeError: If ``x`` lies outside ``[x_min, 0]``
    """
    slack = 1e-14 * abs(h.x_min)
    if not (h.x_min - slack <= x <= h.knots_x[-1] + slack):
        raise EnvelopeError(f"abscissa {x} outside [{h.x_min}, {h.knots_x[-1]}]")
    return float(h.height(x))


def curve_interpolate(c: HullCurve, tau: float) -> complex:
    if not 0.0 <= tau <= 1.0:
        raise EnvelopeError(f"curve parameter {tau} outside [0, 1]")
    return complex(c.at(tau))


def equal_arclength_points(
    h: HullFunction | HullCurve | AlphaShapeBoundary,
    n: int,
    include_left_endpoint: bool,
) -> np.ndarray:
    """Distribute ``n`` points with equal arc length along the envelope.

    With the left endpoint included the points sit at ``k·L/n`` for
    ``k = 0..n-1`` measured from the left end, so the last gap to the origin is
    ``L/n`` and the gap across the origin to the mirrored points is ``2L/n``.
    Without it the points sit at ``d/2 + k·d`` with ``d = L/(n + 1/2)``, the
    layout of odd-degree disk polynomials.
    """
    if n < 1:
        raise EnvelopeError(f"number of points must be positive, got {n}")
    curve = h if isinstance(h, HullCurve) else h.to_curve()
    if include_left_endpoint:
        tau = np.arange(n) / n
    else:
        spacing = 1.0 / (n + 0.5)
        tau = spacing / 2.0 + spacing * np.arange(n)
    if curve.length / n <= np.finfo(float).eps * curve.length:
        raise EnvelopeError(f"{n} points exceed the resolution of the envelope")
    return curve.at(tau)


# =============================================================================
# Alpha shapes
# =============================================================================


def _circumradius(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    ab = np.abs(a - b)
    bc = np.abs(b - c)
    ca = np.abs(c - a)
    area = 0.5 * np.abs(((b - a).conjugate() * (c - a)).imag)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(area > 0.0, ab * bc * ca / (4.0 * area), np.inf)


def _boundary_loop(edges: set[tuple[int, int]]) -> list[int]:
    """Chain boundary edges into a single closed loop of vertex indices."""
    neighbours: dict[int, list[int]] = {}
    for i, j in edges:
        neighbours.setdefault(i, []).append(j)
        neighbours.setdefault(j, []).append(i)
    if any(len(adjacent) != 2 for adjacent in neighbours.values()):
        raise EnvelopeError("alpha too large: boundary is not a simple closed curve")

    start = next(iter(neighbours))
    loop = [start]
    previous, current = start, neighbours[start][0]
    while current != start:
        loop.append(current)
        a, b = neighbours[current]
        previous, current = current, (b if a == previous else a)
    if len(loop) != len(neighbours):
        raise EnvelopeError("alpha too large: alpha shape is disconnected")
    return loop


def alpha_shape_upper(s: "ScaledSpectrum", alpha: float) -> AlphaShapeBoundary:
    """Upper boundary of the alpha shape of the scaled spectrum.

    The shape is built on the spectrum mirrored into the full plane plus the
    origin: Delaunay triangles whose circumradius is below ``1/alpha`` are kept
    and edges owned by exactly one kept triangle form the boundary. The part
    of the boundary loop in the closed upper half-plane is returned from its
    left real-axis crossing to the origin. ``alpha = 0`` gives the hull.

    Raises:
        EnvelopeError: If the boundary is disconnected or not a simple loop
    """
    if alpha < 0.0:
        raise EnvelopeError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0.0:
        h = convex_hull_upper(s)
        return AlphaShapeBoundary(alpha=0.0, points=h.knots_x + 1j * h.knots_y)

    upper = np.asarray(s.values)
    upper = upper.real + 1j * np.abs(upper.imag)
    cloud = np.unique(np.concatenate([upper, upper.conjugate(), [0.0 + 0j]]))
    try:
        triangulation = Delaunay(np.column_stack([cloud.real, cloud.imag]))
    except QhullError as e:
        raise EnvelopeError(f"cannot triangulate spectrum: {e}") from e

    simplices = triangulation.simplices
    radius = _circumradius(
        cloud[simplices[:, 0]], cloud[simplices[:, 1]], cloud[simplices[:, 2]]
    )
    edges: set[tuple[int, int]] = set()
    for ia, ib, ic in simplices[radius < 1.0 / alpha].tolist():
        for i, j in ((ia, ib), (ib, ic), (ic, ia)):
            if (j, i) in edges:
                edges.remove((j, i))
            elif (i, j) in edges:
                edges.remove((i, j))
            else:
                edges.add((i, j))
    if not edges:
        raise EnvelopeError("alpha too large: no triangle survives")

    loop = cloud[_boundary_loop(edges)]
    if not np.any(np.abs(loop) == 0.0):
        raise EnvelopeError("alpha too large: origin is not on the boundary")

    # insert real-axis crossings so the upper run ends on the axis
    closed: list[complex] = []
    for a, b in zip(loop, np.roll(loop, -1), strict=True):
        closed.append(complex(a))
        if a.imag * b.imag < 0.0:
            t = a.imag / (a.imag - b.imag)
            closed.append(complex(a.real + t * (b.real - a.real), 0.0))
    ring = np.array(closed)

    tol = DEGENERATE_TOLERANCE * float(np.max(np.abs(ring)))
    inside = ring.imag >= -tol
    if inside.all():
        raise EnvelopeError("alpha shape is flat")
    shift = int(np.argmin(inside))
    ring, inside = np.roll(ring, -shift), np.roll(inside, -shift)
    begin = int(np.argmax(inside))
    end = begin + int(np.argmin(inside[begin:])) if not inside[begin:].all() else ring.size
    run = ring[begin:end]
    if run[0].real > run[-1].real:
        run = run[::-1]
    run = run.real + 1j * np.maximum(run.imag, 0.0)
    logger.debug(f"Alpha shape (alpha={alpha}) upper boundary has {run.size} vertices")
    return AlphaShapeBoundary(alpha=alpha, points=run)


def write_knots(points: np.ndarray, path: str | Path) -> Path:
    """Dump envelope vertices as ``x,y`` CSV rows for plotting."""
    path = Path(path)
    rows = ["x,y", *(f"{z.real!r},{z.imag!r}" for z in np.asarray(points).tolist())]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path
