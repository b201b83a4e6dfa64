"""Stability polynomials in factorized pseudo-extrema form.

A polynomial of degree S with P(0) = 1 is written as

    P(z) = 1 + z * prod_j (1 - z / r_j)

over its S-1 pseudo-extrema r_j, the roots of (P(z) - 1)/z. Complex
pseudo-extrema come in conjugate pairs and only the upper member is stored;
each pair enters as the real quadratic factor 1 + p z + q z^2 with
p = -2 Re(r)/|r|^2 and q = 1/|r|^2. The monomial form is never used on the
production path, only as a cross-check for small degrees.
"""

import logging
from dataclasses import dataclass
from math import factorial
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as npoly

from stabopt.exceptions import PolynomialError, SpectrumFormatError

logger = logging.getLogger(__name__)

# Degree guard for the monomial expansion
MAX_MONOMIAL_DEGREE = 40

# Default tolerance on order-constraint residuals
ORDER_TOLERANCE = 1e-10


@dataclass(frozen=True)
class PseudoExtremaSet:
    """Pseudo-extrema of a stability polynomial.

    ``real_pe`` holds negative real pseudo-extrema (repeats allowed),
    ``upper_pe`` the upper members of conjugate pairs. An upper entry with zero
    imaginary part stands for a double real root. Optimizer output for even
    degree has exactly one real pseudo-extremum.
    """

    real_pe: np.ndarray
    upper_pe: np.ndarray

    def __post_init__(self) -> None:
        real = np.atleast_1d(np.asarray(self.real_pe, dtype=float)).ravel()
        upper = np.atleast_1d(np.asarray(self.upper_pe, dtype=np.complex128)).ravel()
        if not (np.all(np.isfinite(real)) and np.all(np.isfinite(upper))):
            raise PolynomialError("pseudo-extrema must be finite")
        if np.any(real >= 0.0):
            raise PolynomialError("real pseudo-extrema must be negative")
        if np.any(upper.imag < 0.0):
            raise PolynomialError("upper pseudo-extrema must have Im >= 0")
        if np.any(upper == 0.0):
            raise PolynomialError("pseudo-extrema must be nonzero")
        real.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "real_pe", real)
        object.__setattr__(self, "upper_pe", upper)

    @property
    def degree(self) -> int:
        return 1 + self.real_pe.size + 2 * self.upper_pe.size

    @property
    def is_canonical(self) -> bool:
        """Whether the set has the optimizer layout (one real pe for even S)."""
        return self.real_pe.size == (1 if self.degree % 2 == 0 else 0)

    def roots(self) -> np.ndarray:
        """All S-1 pseudo-extrema with conjugates written out."""
        return np.concatenate(
            [self.real_pe + 0j, self.upper_pe, self.upper_pe.conjugate()]
        )

    def quadratic_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients (p, q) of the real quadratic factors of the pairs."""
        modulus2 = np.abs(self.upper_pe) ** 2
        return -2.0 * self.upper_pe.real / modulus2, 1.0 / modulus2

    def scaled(self, factor: float) -> "PseudoExtremaSet":
        return PseudoExtremaSet(self.real_pe * factor, self.upper_pe * factor)


@dataclass(frozen=True)
class StabilityPolynomial:
    """Pseudo-extrema together with the order and timestep they were built for.

    Raises:
        PolynomialError: If the order constraints are violated by more than
            ``ORDER_TOLERANCE``
    """

    pe: PseudoExtremaSet
    order: int
    dt: float

    def __post_init__(self) -> None:
        if self.order not in (1, 2, 3):
            raise PolynomialError(f"order must be 1, 2 or 3, got {self.order}")
        if not self.dt > 0.0:
            raise PolynomialError(f"timestep must be positive, got {self.dt}")
        residual = check_order_constraints(self.pe, self.order)
        if residual.size and float(np.max(np.abs(residual))) > ORDER_TOLERANCE:
            raise PolynomialError(
                f"order {self.order} constraints violated, residual {residual.tolist()}"
            )

    @property
    def degree(self) -> int:
        return self.pe.degree

    def __call__(self, z: np.ndarray | complex) -> np.ndarray:
        return evaluate(self.pe, z)


@dataclass(frozen=True)
class PolynomialGradient:
    """Derivatives with respect to the free pseudo-extrema parameters.

    ``real`` holds derivatives with respect to each real pseudo-extremum,
    ``upper_re`` and ``upper_im`` with respect to the real and imaginary part
    of each upper pseudo-extremum. Leading dimensions follow the evaluation
    points (or constraints).
    """

    real: np.ndarray
    upper_re: np.ndarray
    upper_im: np.ndarray


# =============================================================================
# Evaluation
# =============================================================================


def _factors(pe: PseudoExtremaSet, z: np.ndarray) -> np.ndarray:
    """Matrix of linear (real) and quadratic (pair) factors, shape (M, K)."""
    p, q = pe.quadratic_coefficients()
    linear = 1.0 - z[:, None] / pe.real_pe[None, :]
    quadratic = 1.0 + p[None, :] * z[:, None] + q[None, :] * z[:, None] ** 2
    return np.concatenate([linear, quadratic], axis=1)


def evaluate(pe: PseudoExtremaSet, z: np.ndarray | complex) -> np.ndarray:
    """Evaluate ``P(z) = 1 + z * prod(1 - z/r_j)`` in factorized form.

    Conjugate pairs are multiplied as real quadratic factors, so real input
    produces results with exactly zero imaginary part.
    """
    z = np.asarray(z, dtype=np.complex128)
    flat = z.reshape(-1)
    product = np.prod(_factors(pe, flat), axis=1)
    return (1.0 + flat * product).reshape(z.shape)


def eval_gradient(pe: PseudoExtremaSet, z: np.ndarray | complex) -> PolynomialGradient:
    """Gradient of ``|P(z)|^2`` with respect to the pseudo-extrema.

    Uses the product rule with prefix and suffix products of the factors, so
    no factor is ever divided out. For a real pseudo-extremum ``ρ`` the factor
    derivative is ``z/ρ^2``; for a pair ``r = a + ib`` the derivatives of
    ``(1 - z/r)(1 - z/r̄)`` are

        d/da = (z/r^2)(1 - z/r̄) + (1 - z/r)(z/r̄^2)
        d/db = i z [(1 - z/r̄)/r^2 - (1 - z/r)/r̄^2]

    Returns:
        PolynomialGradient whose arrays have shape ``z.shape + (count,)``
    """
    z = np.asarray(z, dtype=np.complex128)
    flat = z.reshape(-1)
    factors = _factors(pe, flat)
    count = factors.shape[1]

    ones = np.ones((flat.size, 1), dtype=np.complex128)
    prefix = np.concatenate([ones, np.cumprod(factors[:, :-1], axis=1)], axis=1)
    reverse = factors[:, ::-1]
    suffix = np.concatenate([ones, np.cumprod(reverse[:, :-1], axis=1)], axis=1)[:, ::-1]
    others = prefix * suffix if count else np.zeros((flat.size, 0))

    value = 1.0 + flat * np.prod(factors, axis=1)
    weight = 2.0 * np.conj(value)[:, None] * flat[:, None] * others

    n_real = pe.real_pe.size
    rho = pe.real_pe[None, :]
    d_real = flat[:, None] / rho**2

    r = pe.upper_pe[None, :]
    rc = np.conj(r)
    zc = flat[:, None]
    left, right = 1.0 - zc / r, 1.0 - zc / rc
    d_re = (zc / r**2) * right + left * (zc / rc**2)
    d_im = 1j * zc * (right / r**2 - left / rc**2)

    shape = (*z.shape, -1)
    return PolynomialGradient(
        real=np.real(weight[:, :n_real] * d_real).reshape(shape),
        upper_re=np.real(weight[:, n_real:] * d_re).reshape(shape),
        upper_im=np.real(weight[:, n_real:] * d_im).reshape(shape),
    )


# =============================================================================
# Order constraints
# =============================================================================


def check_order_constraints(pe: PseudoExtremaSet, p: int) -> np.ndarray:
    """Residuals of the linear order conditions on the pseudo-extrema.

    ``residual[0] = -sum(1/r) - 1/2`` for ``p >= 2`` and
    ``residual[1] = sum_{a<b} 1/(r_a r_b) - 1/6`` for ``p = 3``, both taken over
    all S-1 pseudo-extrema including conjugates.
    """
    if p not in (1, 2, 3):
        raise PolynomialError(f"order must be 1, 2 or 3, got {p}")
    inverse = 1.0 / pe.roots()
    total = float(np.sum(inverse).real)
    residual = []
    if p >= 2:
        residual.append(-total - 0.5)
    if p >= 3:
        pairs = 0.5 * (total**2 - float(np.sum(inverse**2).real))
        residual.append(pairs - 1.0 / 6.0)
    return np.array(residual, dtype=float)


def order_constraint_gradient(pe: PseudoExtremaSet, p: int) -> PolynomialGradient:
    """Jacobian of ``check_order_constraints`` with leading dimension p-1."""
    inverse = 1.0 / pe.roots()
    total = float(np.sum(inverse).real)

    rho = pe.real_pe
    r = pe.upper_pe
    u = 1.0 / r
    real_rows, re_rows, im_rows = [], [], []
    if p >= 2:
        real_rows.append(1.0 / rho**2)
        re_rows.append(2.0 * np.real(1.0 / r**2))
        im_rows.append(-2.0 * np.imag(1.0 / r**2))
    if p >= 3:
        # d/du_j of the pair sum is (total - u_j)
        real_rows.append((total - 1.0 / rho) * (-1.0 / rho**2))
        re_rows.append(2.0 * np.real((total - u) * (-1.0 / r**2)))
        im_rows.append(2.0 * np.real((total - u) * (-1j / r**2)))
    rows = max(p - 1, 0)
    return PolynomialGradient(
        real=np.array(real_rows).reshape(rows, rho.size),
        upper_re=np.array(re_rows).reshape(rows, r.size),
        upper_im=np.array(im_rows).reshape(rows, r.size),
    )


# =============================================================================
# Monomial cross-check
# =============================================================================


def monomial_expand(pe: PseudoExtremaSet) -> np.ndarray:
    """Monomial coefficients ``α_0..α_S`` by exact multiplication of the factors.

    Raises:
        PolynomialError: For degrees above ``MAX_MONOMIAL_DEGREE``
    """
    if pe.degree > MAX_MONOMIAL_DEGREE:
        raise PolynomialError(
            f"monomial expansion guarded to degree {MAX_MONOMIAL_DEGREE}, got {pe.degree}"
        )
    product = np.array([1.0])
    for rho in pe.real_pe:
        product = npoly.polymul(product, [1.0, -1.0 / rho])
    for p, q in zip(*pe.quadratic_coefficients(), strict=True):
        product = npoly.polymul(product, [1.0, p, q])
    coefficients = np.zeros(pe.degree + 1)
    coefficients[0] = 1.0
    coefficients[1 : product.size + 1] = product
    return coefficients


# =============================================================================
# Closed-form oracles
# =============================================================================


def disk_polynomial_pe(S: int, p: int) -> PseudoExtremaSet:
    """Pseudo-extrema of the optimal polynomials for the disk.

    For ``p = 1`` the polynomial is ``(1 + z/S)^S``, for ``p = 2`` it is
    ``((S-1)/S)(1 + z/(S-1))^S + 1/S``. In both cases the pseudo-extrema are
    ``R(exp(2πij/S) - 1)`` on the circle of radius R = S or R = S-1, with the
    real member ``-2R`` at ``j = S/2``.
    """
    if S % 2 or S < 2:
        raise PolynomialError(f"disk polynomials are provided for even S, got {S}")
    if p not in (1, 2):
        raise PolynomialError(f"disk polynomials exist for order 1 and 2, got {p}")
    radius = float(S if p == 1 else S - 1)
    j = np.arange(1, S // 2)
    angle = 2.0 * np.pi * j / S
    upper = radius * (np.cos(angle) - 1.0) + 1j * radius * np.sin(angle)
    return PseudoExtremaSet(np.array([-2.0 * radius]), upper)


def chebyshev_pe(S: int) -> PseudoExtremaSet:
    """Pseudo-extrema of the shifted Chebyshev polynomial ``T_S(1 + z/S^2)``.

    They are ``S^2 (cos(2πj/S) - 1)``. Interior values are double roots and are
    stored as upper entries with zero imaginary part; for even S the single
    root ``-2S^2`` is the real pseudo-extremum.
    """
    if S < 2:
        raise PolynomialError(f"Chebyshev degree must be at least 2, got {S}")
    j = np.arange(1, (S - 1) // 2 + 1)
    doubles = S**2 * (np.cos(2.0 * np.pi * j / S) - 1.0)
    real = np.array([-2.0 * S**2]) if S % 2 == 0 else np.array([])
    return PseudoExtremaSet(real, doubles + 0j)


def exponential_taylor_pe(S: int) -> PseudoExtremaSet:
    """Pseudo-extrema of the degree-S Taylor polynomial of ``exp``.

    For ``S <= 4`` this is the stability polynomial of the classical
    S-stage, order-S Runge-Kutta methods.
    """
    if not 2 <= S <= MAX_MONOMIAL_DEGREE:
        raise PolynomialError(f"Taylor degree must be in [2, {MAX_MONOMIAL_DEGREE}]")
    # roots of (P - 1)/z = sum_{k>=1} z^(k-1)/k!
    coefficients = np.array([1.0 / factorial(k) for k in range(1, S + 1)])
    roots = npoly.polyroots(coefficients)
    return from_roots(roots, tol=1e-9)


def from_roots(roots: np.ndarray, tol: float = 1e-12) -> PseudoExtremaSet:
    """Build a set from the full root list, keeping the upper member of pairs."""
    roots = np.asarray(roots, dtype=np.complex128)
    scale = max(float(np.max(np.abs(roots))), 1.0) if roots.size else 1.0
    real_mask = np.abs(roots.imag) <= tol * scale
    real = np.sort(roots[real_mask].real)
    upper = roots[~real_mask & (roots.imag > 0.0)]
    if upper.size != np.count_nonzero(~real_mask) // 2:
        raise PolynomialError("complex roots do not come in conjugate pairs")
    return PseudoExtremaSet(real, upper[np.argsort(upper.real)])


# =============================================================================
# Serialization
# =============================================================================


def _grouped(values: np.ndarray, weight: int, tol: float) -> list[tuple[complex, int]]:
    groups: list[tuple[complex, int]] = []
    for value in sorted(values.tolist(), key=lambda v: (v.real, v.imag)):
        if groups and abs(groups[-1][0] - value) <= tol:
            groups[-1] = (groups[-1][0], groups[-1][1] + weight)
        else:
            groups.append((complex(value), weight))
    return groups


def write_pe(pe: PseudoExtremaSet, path: str | Path, header: str | None = None) -> Path:
    """Write pseudo-extrema as ``re,im,multiplicity`` rows.

    Rows with ``im > 0`` stand for conjugate pairs, multiplicity counting pairs.
    Rows with ``im == 0`` count real roots; upper entries on the real axis are
    double roots and contribute two.
    """
    path = Path(path)
    upper = pe.upper_pe
    on_axis = upper.imag == 0.0
    real_values = np.concatenate([pe.real_pe + 0j, upper[on_axis].real + 0j])
    weights = [1] * pe.real_pe.size + [2] * int(np.count_nonzero(on_axis))

    rows: list[tuple[complex, int]] = []
    for value, weight in sorted(zip(real_values.tolist(), weights, strict=True), key=lambda t: t[0].real):
        if rows and rows[-1][0] == value:
            rows[-1] = (rows[-1][0], rows[-1][1] + weight)
        else:
            rows.append((value, weight))
    rows.extend(_grouped(upper[~on_axis], 1, 0.0))

    lines = [f"# {header}"] if header else []
    lines.append(f"# degree {pe.degree}")
    lines.extend(f"{v.real!r},{v.imag!r},{m}" for v, m in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_pe(path: str | Path) -> PseudoExtremaSet:
    """Read pseudo-extrema written by ``write_pe``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SpectrumFormatError(f"cannot read file: {e}", path=str(path)) from e

    real: list[float] = []
    upper: list[complex] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [part.strip() for part in line.split(",")]
        try:
            re_part, im_part, multiplicity = float(parts[0]), float(parts[1]), int(parts[2])
        except (ValueError, IndexError) as e:
            raise SpectrumFormatError(
                f"expected 're,im,multiplicity', got '{line}'", path=str(path), line=number
            ) from e
        if multiplicity < 1:
            raise SpectrumFormatError("multiplicity must be positive", path=str(path), line=number)
        if im_part == 0.0:
            real.extend([re_part] * multiplicity)
        else:
            upper.extend([complex(re_part, abs(im_part))] * multiplicity)
    if not real and not upper:
        raise SpectrumFormatError("file contains no pseudo-extrema", path=str(path))
    return PseudoExtremaSet(np.array(real), np.array(upper, dtype=np.complex128))


# =============================================================================
# Stability region boundary
# =============================================================================


def _interior_anchor(pe: PseudoExtremaSet) -> complex:
    roots = pe.roots()
    centroid = complex(np.mean(roots.real))
    if abs(evaluate(pe, centroid)) < 1.0:
        return centroid
    grid = np.linspace(float(np.min(roots.real)), 0.0, 513)[1:-1] + 0j
    values = np.abs(evaluate(pe, grid))
    inside = np.flatnonzero(values < 1.0)
    if inside.size == 0:
        raise PolynomialError("no interior point of the stability region on the real axis")
    return complex(grid[inside[np.argmin(values[inside])]])


def stability_boundary_samples(
    pe: PseudoExtremaSet, rays: int = 256, tol: float = 1e-12
) -> np.ndarray:
    """Points on ``|P(z)| = 1`` along rays cast from an interior anchor.

    The anchor is the centroid of the pseudo-extrema, or the point of smallest
    ``|P|`` on a real-axis grid when the centroid lies outside the region. Each
    ray is marched outward in doubling steps until ``|P| > 1`` and the crossing
    is refined by bisection. For star-shaped regions the samples trace the
    whole boundary; otherwise they mark the first crossing per direction.

    Returns:
        Complex array of ``rays`` boundary points
    """
    if rays < 4:
        raise PolynomialError(f"at least 4 rays are needed, got {rays}")
    anchor = _interior_anchor(pe)
    scale = max(float(np.max(np.abs(pe.roots()))), 1.0)
    directions = np.exp(2j * np.pi * np.arange(rays) / rays)

    lo = np.zeros(rays)
    hi = np.full(rays, 1e-3 * scale)
    outside = np.abs(evaluate(pe, anchor + hi * directions)) > 1.0
    for _ in range(80):
        if np.all(outside):
            break
        lo = np.where(outside, lo, hi)
        hi = np.where(outside, hi, 2.0 * hi)
        outside = np.abs(evaluate(pe, anchor + hi * directions)) > 1.0

    while np.max(hi - lo) > tol * scale:
        mid = 0.5 * (lo + hi)
        beyond = np.abs(evaluate(pe, anchor + mid * directions)) > 1.0
        hi = np.where(beyond, mid, hi)
        lo = np.where(beyond, lo, mid)
    logger.debug(f"Sampled stability boundary along {rays} rays from {anchor:.6g}")
    return anchor + lo * directions
