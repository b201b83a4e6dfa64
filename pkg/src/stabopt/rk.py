"""Many-stage Runge-Kutta methods in modified Shu-Osher form.

A method with S stages is stored as dense lower-triangular matrices
``alpha`` and ``beta`` of shape ``(S+1, S)``. Row ``k`` defines stage
``Y_{k+1} = v_k U_n + sum_l (alpha[k,l] Y_{l+1} + dt beta[k,l] F(Y_{l+1}))``
and the last row defines the update ``U_{n+1}``.

``build_tableau`` realizes the factorized polynomial
``P(z) = 1 + z * prod(factors)`` as a chain of submethods, one per factor,
followed by the closing stage ``U_{n+1} = U_n + dt F(Y_S)``.
"""

import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy.linalg import solve_triangular
from scipy.optimize import minimize, minimize_scalar

from stabopt.exceptions import ConstructionError, TableauFormatError
from stabopt.models import (
    TABLEAU_VERSION,
    AmplificationSummary,
    SubmethodRecord,
    TableauRecord,
)
from stabopt.polynomial import StabilityPolynomial

logger = logging.getLogger(__name__)

# Tolerance on row sums and the abscissae cross-check
ROW_SUM_TOLERANCE = 1e-14
ABSCISSAE_TOLERANCE = 1e-12

# Beta magnitude above which ungrouped construction logs a warning
LARGE_BETA = 10.0

# Inequality margin kept by the quartic parameter search
QUARTIC_MARGIN = 1e-9


# =============================================================================
# Tableau
# =============================================================================


@dataclass(frozen=True)
class ShuOsherTableau:
    """Explicit Runge-Kutta method in modified Shu-Osher form.

    Raises:
        TableauFormatError: If shapes, lower-triangularity or row sums are off
    """

    S: int
    p: int
    dt: float
    v: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    c: np.ndarray
    grouping: tuple[SubmethodRecord, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        S = self.S
        for name, shape in (("v", (S + 1,)), ("alpha", (S + 1, S)), ("beta", (S + 1, S)), ("c", (S,))):
            value = np.array(getattr(self, name), dtype=float)
            if value.shape != shape:
                raise TableauFormatError(f"expected shape {shape}, got {value.shape}", location=name)
            if not np.all(np.isfinite(value)):
                raise TableauFormatError("entries must be finite", location=name)
            value.setflags(write=False)
            object.__setattr__(self, name, value)

        upper = np.triu(np.ones((S + 1, S), dtype=bool))
        if np.any(self.alpha[upper] != 0.0) or np.any(self.beta[upper] != 0.0):
            raise TableauFormatError("method must be explicit (strictly lower triangular)", location="alpha")
        if self.v[0] != 1.0 or np.any(self.v[1:] != 0.0):
            raise TableauFormatError("v must be (1, 0, ..., 0)", location="v")
        sums = self.alpha[1:].sum(axis=1)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE * S):
            row = int(np.argmax(np.abs(sums - 1.0))) + 1
            raise TableauFormatError(f"row sum {float(sums[row - 1])!r} differs from 1", location=f"alpha[{row}]")
        object.__setattr__(self, "grouping", tuple(self.grouping))

    @property
    def max_abs_beta(self) -> float:
        return float(np.max(np.abs(self.beta)))


def abscissae(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Stage times ``c = (I - alpha_{1:S})^{-1} beta_{1:S} 1`` by a triangular solve."""
    S = alpha.shape[1]
    system = np.eye(S) - alpha[:S]
    return solve_triangular(system, beta[:S].sum(axis=1), lower=True, unit_diagonal=True)


def abscissae_recursive(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Stage times from ``c_k = sum_l alpha[k,l] c_l + sum_l beta[k,l]``."""
    S = alpha.shape[1]
    c = np.zeros(S)
    for k in range(1, S):
        c[k] = alpha[k, :k] @ c[:k] + beta[k, :k].sum()
    return c


# =============================================================================
# Submethods
# =============================================================================


@dataclass(frozen=True)
class _Block:
    """Local coefficients of one submethod.

    ``alpha`` and ``beta`` have one row per new stage and one column per input,
    the first input being the block's entry stage.
    """

    kind: str
    pe_indices: tuple[int, ...]
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def stages(self) -> int:
        return self.alpha.shape[0]

    @property
    def beta_norm(self) -> float:
        return float(np.sum(np.abs(self.beta)))


def _euler_block(rho: float, index: int) -> _Block:
    return _Block("euler", (index,), np.array([[1.0]]), np.array([[-1.0 / rho]]))


def _pair_objective(b1: float, p: float, q: float) -> tuple[float, float, float, float]:
    """Best ``(norm, a1, b2, b3)`` for a given ``b1``."""
    a1 = float(np.clip((p - q / b1) / b1, 0.0, 1.0))
    b3 = q / b1
    b2 = p - a1 * b1 - b3
    return b1 + b3 + abs(b2), a1, b2, b3


def _pair_block(p: float, q: float, allow_negative_beta: bool, indices: tuple[int, ...]) -> _Block:
    """Two-stage realization of ``1 + p z + q z^2`` with minimal ``||beta||_1``.

    Stages ``Y1 = Y0 + dt b1 F(Y0)`` and
    ``Y2 = a1 Y1 + (1 - a1) Y0 + dt (b2 F(Y0) + b3 F(Y1))`` reproduce the
    factor when ``b1 b3 = q`` and ``a1 b1 + b2 + b3 = p``. For a given ``b1``
    the best ``a1`` is the clipped root of ``b2``; ``b1`` itself is found by a
    log-grid scan refined with a bounded scalar search.
    """
    if allow_negative_beta:
        lower, upper = 1e-6 * np.sqrt(q), 1e6 * np.sqrt(q)
    else:
        if p <= 0.0:
            raise ConstructionError(
                "pair factor with non-negative linear coefficient needs negative beta"
            )
        lower = q / p
        upper = max(1e3 * lower, 1e3 * np.sqrt(q), 1.0)

    grid = np.geomspace(lower, upper, 241)
    values = np.array([_pair_objective(b, p, q)[0] for b in grid])
    best = int(np.argmin(values))
    left = np.log(grid[max(best - 1, 0)])
    right = np.log(grid[min(best + 1, grid.size - 1)])
    b1 = float(grid[best])
    if right > left:
        refined = minimize_scalar(
            lambda t: _pair_objective(np.exp(t), p, q)[0],
            bounds=(left, right),
            method="bounded",
            options={"xatol": 1e-12},
        )
        if refined.fun <= values[best]:
            b1 = float(np.exp(refined.x))
    if not allow_negative_beta:
        b1 = max(b1, lower)

    _, a1, b2, b3 = _pair_objective(b1, p, q)
    if not allow_negative_beta:
        b2 = max(b2, 0.0)
    alpha = np.array([[1.0, 0.0], [1.0 - a1, a1]])
    beta = np.array([[b1, 0.0], [b2, b3]])
    return _Block("pair", indices, alpha, beta)


@dataclass(frozen=True)
class _QuarticCoefficients:
    b: float
    c: tuple[float, float, float]
    d: tuple[float, float, float]
    e: tuple[float, float, float]

    @property
    def betas(self) -> np.ndarray:
        return np.array([self.b, *self.c, *self.d])


def _quartic_coefficients(
    theta: np.ndarray, first: tuple[float, float], second: tuple[float, float]
) -> _QuarticCoefficients | None:
    """Back-substitute the quartic submethod from its free parameters.

    Stages ``s1 = 1 + b z`` and ``s_j = (1 - e_j) + c_j z + (e_j + d_j z) s_{j-1}``
    for ``j = 2, 3, 4``. Free parameters are ``(b, e2, d3, e3)``; the rest
    follow from ``s2 = 1 + p_f z + q_f z^2`` and ``s4`` matching the product of
    both quadratic factors coefficient by coefficient.
    """
    b, e2, d3, e3 = (float(t) for t in theta)
    pf, qf = first
    ps, qs = second
    C1 = pf + ps
    C2 = qf + qs + pf * ps
    C3 = pf * qs + ps * qf
    C4 = qf * qs

    if abs(b) < 1e-300 or abs(d3 * qf) < 1e-300:
        return None
    d2 = qf / b
    c2 = pf - d2 - e2 * b
    v3 = d3 * qf
    v2 = e3 * qf + d3 * pf
    d4 = C4 / v3
    e4 = (C3 - d4 * v2) / v3
    v1 = (C2 - e4 * v2) / d4
    c3 = v1 - d3 - e3 * pf
    c4 = C1 - d4 - e4 * v1
    return _QuarticCoefficients(b, (c2, c3, c4), (d2, d3, d4), (e2, e3, e4))


def _quartic_penalty(coeffs: _QuarticCoefficients, allow_negative_beta: bool) -> float:
    e = np.array(coeffs.e)
    penalty = np.sum(np.maximum(QUARTIC_MARGIN - e, 0.0)) + np.sum(
        np.maximum(e - 1.0, 0.0)
    )
    if not allow_negative_beta:
        penalty += np.sum(np.maximum(QUARTIC_MARGIN - coeffs.betas, 0.0))
    return float(penalty)


def _quartic_admissible(coeffs: _QuarticCoefficients, allow_negative_beta: bool) -> bool:
    e = np.array(coeffs.e)
    if not np.all(np.isfinite(coeffs.betas)) or np.any(e < 0.0) or np.any(e > 1.0):
        return False
    return allow_negative_beta or bool(np.all(coeffs.betas >= 0.0))


def _quartic_block(
    small: tuple[float, float],
    large: tuple[float, float],
    allow_negative_beta: bool,
    indices: tuple[int, ...],
    pe: tuple[complex, ...],
) -> _Block:
    """Four-stage submethod for the product of two quadratic factors.

    Nelder-Mead minimizes ``||beta||_1`` plus an exact penalty on the sign
    constraints, from a grid of starts and for both factor orders.
    """
    best: _QuarticCoefficients | None = None
    best_norm = np.inf
    starts = list(product((0.05, 0.5, 3.0), (0.0, 0.5), (1.0, 3.0, 10.0), (0.0, 0.5)))

    for first, second in ((large, small), (small, large)):

        def objective(theta: np.ndarray, first=first, second=second) -> float:
            coeffs = _quartic_coefficients(theta, first, second)
            if coeffs is None or not np.all(np.isfinite(coeffs.betas)):
                return 1e300
            norm = float(np.sum(np.abs(coeffs.betas)))
            return norm + 1e3 * (1.0 + norm) * _quartic_penalty(coeffs, allow_negative_beta)

        for start in starts:
            res = minimize(
                objective,
                np.array(start),
                method="Nelder-Mead",
                options={"maxiter": 4000, "xatol": 1e-12, "fatol": 1e-14},
            )
            coeffs = _quartic_coefficients(res.x, first, second)
            if coeffs is None or not _quartic_admissible(coeffs, allow_negative_beta):
                continue
            norm = float(np.sum(np.abs(coeffs.betas)))
            if norm < best_norm:
                best, best_norm = coeffs, norm

    if best is None:
        raise ConstructionError("no admissible quartic submethod found", pseudo_extrema=pe)

    c2, c3, c4 = best.c
    d2, d3, d4 = best.d
    e2, e3, e4 = best.e
    # columns: entry stage, then the three new stages preceding the last
    alpha = np.array(
        [
            [1.0, 0.0, 0.0, 0.0],
            [1.0 - e2, e2, 0.0, 0.0],
            [1.0 - e3, 0.0, e3, 0.0],
            [1.0 - e4, 0.0, 0.0, e4],
        ]
    )
    beta = np.array(
        [
            [best.b, 0.0, 0.0, 0.0],
            [c2, d2, 0.0, 0.0],
            [c3, 0.0, d3, 0.0],
            [c4, 0.0, 0.0, d4],
        ]
    )
    return _Block("lebedev_quad", indices, alpha, beta)


def _group_pairs(
    upper: np.ndarray, threshold: float
) -> tuple[list[tuple[int, int]], list[int]]:
    """Match pairs with ``Re > threshold`` to the pairs of most negative real part."""
    small = [int(j) for j in np.argsort(upper.real)[::-1] if upper[j].real > threshold]
    partners = [int(j) for j in np.argsort(upper.real) if upper[j].real <= threshold]
    if len(small) > len(partners):
        lone = small[len(partners)]
        raise ConstructionError(
            f"no partner with Re <= {threshold} for a pair near the imaginary axis",
            pseudo_extrema=(complex(upper[lone]),),
        )
    groups = list(zip(small, partners[: len(small)], strict=True))
    matched = {j for group in groups for j in group}
    singles = [j for j in range(upper.size) if j not in matched]
    return groups, singles


def build_tableau(
    poly: StabilityPolynomial,
    allow_negative_beta: bool = False,
    lebedev_grouping: bool = True,
    grouping_threshold: float = -0.5,
) -> ShuOsherTableau:
    """Realize a stability polynomial as a Shu-Osher tableau.

    Real pseudo-extrema become Forward Euler stages, conjugate pairs two-stage
    submethods, and with ``lebedev_grouping`` each pair with
    ``Re > grouping_threshold`` (scaled coordinates) is merged with a pair of
    most negative real part into a four-stage submethod. Submethods are
    ordered by increasing ``||beta||_1``.

    Raises:
        ConstructionError: If a submethod cannot be realized or a pair near
            the imaginary axis has no partner
    """
    pe = poly.pe
    S = pe.degree
    n_real = pe.real_pe.size
    n_upper = pe.upper_pe.size
    p_coef, q_coef = pe.quadratic_coefficients()

    def pair_indices(j: int) -> tuple[int, int]:
        return (n_real + j, n_real + n_upper + j)

    blocks = [_euler_block(float(rho), i) for i, rho in enumerate(pe.real_pe)]

    if lebedev_grouping:
        groups, singles = _group_pairs(pe.upper_pe, grouping_threshold)
    else:
        groups, singles = [], list(range(n_upper))

    for j in singles:
        try:
            blocks.append(
                _pair_block(float(p_coef[j]), float(q_coef[j]), allow_negative_beta, pair_indices(j))
            )
        except ConstructionError as e:
            raise ConstructionError(e.message, pseudo_extrema=(complex(pe.upper_pe[j]),)) from e
    for small, large in groups:
        blocks.append(
            _quartic_block(
                (float(p_coef[small]), float(q_coef[small])),
                (float(p_coef[large]), float(q_coef[large])),
                allow_negative_beta,
                pair_indices(small) + pair_indices(large),
                (complex(pe.upper_pe[small]), complex(pe.upper_pe[large])),
            )
        )

    blocks.sort(key=lambda block: block.beta_norm)

    alpha = np.zeros((S + 1, S))
    beta = np.zeros((S + 1, S))
    grouping: list[SubmethodRecord] = []
    entry = 0
    for block in blocks:
        # rows entry+1 .. entry+stages; inputs entry, entry+1, ...
        columns = [entry, *range(entry + 1, entry + block.stages)]
        for i in range(block.stages):
            row = entry + 1 + i
            for local, column in enumerate(columns):
                alpha[row, column] += block.alpha[i, local]
                beta[row, column] += block.beta[i, local]
        grouping.append(
            SubmethodRecord(
                kind=block.kind,
                pe_indices=list(block.pe_indices),
                stage_start=entry + 2,
                stage_stop=entry + 1 + block.stages,
            )
        )
        entry += block.stages

    alpha[S, 0] = 1.0
    beta[S, S - 1] = 1.0

    c = abscissae(alpha, beta)
    check = abscissae_recursive(alpha, beta)
    if np.max(np.abs(c - check)) > ABSCISSAE_TOLERANCE * max(1.0, float(np.max(np.abs(c)))):
        logger.warning(f"Abscissae disagree by {np.max(np.abs(c - check)):.3e}")

    tableau = ShuOsherTableau(
        S=S,
        p=poly.order,
        dt=poly.dt,
        v=np.eye(S + 1)[0],
        alpha=alpha,
        beta=beta,
        c=c,
        grouping=tuple(grouping),
    )
    kinds = [block.kind for block in blocks]
    logger.info(
        f"Built {S}-stage tableau: {kinds.count('euler')} Euler, {kinds.count('pair')} pair, "
        f"{kinds.count('lebedev_quad')} quartic submethods, max |beta| {tableau.max_abs_beta:.3g}"
    )
    if not lebedev_grouping and tableau.max_abs_beta > LARGE_BETA:
        logger.warning(
            f"Large beta coefficient {tableau.max_abs_beta:.3g} without grouping, "
            f"expect round-off amplification"
        )
    return tableau


# =============================================================================
# Analysis
# =============================================================================


def scalar_stability_function(t: ShuOsherTableau, z: np.ndarray | complex) -> np.ndarray:
    """Run the stage recursion on ``u' = λu`` with ``dt λ = z`` and ``u_n = 1``."""
    z = np.asarray(z, dtype=np.complex128)
    flat = z.reshape(-1)
    stages = np.zeros((t.S + 1, flat.size), dtype=np.complex128)
    stages[0] = t.v[0]
    for k in range(1, t.S + 1):
        coefficient = t.alpha[k, :k, None] + flat[None, :] * t.beta[k, :k, None]
        stages[k] = t.v[k] + np.sum(coefficient * stages[:k], axis=0)
    return stages[t.S].reshape(z.shape)


@dataclass(frozen=True)
class AmplificationReport:
    """Internal amplification of stage perturbations.

    ``q_values[m, k]`` is ``Q_{k+1}`` at ``sample_points[m]``; the last column is
    identically one.
    """

    per_stage_max: np.ndarray
    M_tilde: float
    sample_points: np.ndarray
    truncation_scale: float
    q_values: np.ndarray


def internal_stability(t: ShuOsherTableau, boundary_samples: np.ndarray) -> AmplificationReport:
    """Internal stability polynomials ``Q_k`` on the given samples.

    ``Q = (alpha_{S+1} + z beta_{S+1}) sum_k N^k`` with the nilpotent
    ``N = alpha_{1:S} + z beta_{1:S}``, accumulated as row vectors so no matrix
    is inverted. ``M_tilde`` is the maximum over samples of ``sum_{k>=2} |Q_k|``.
    """
    z = np.asarray(boundary_samples, dtype=np.complex128).reshape(-1)
    S = t.S
    a, b = t.alpha[:S], t.beta[:S]
    row = t.alpha[S][None, :] + z[:, None] * t.beta[S][None, :]
    total = row.copy()
    for _ in range(S - 1):
        row = row @ a + z[:, None] * (row @ b)
        total += row
    q = np.concatenate([total, np.ones((z.size, 1))], axis=1)
    magnitude = np.abs(q)
    return AmplificationReport(
        per_stage_max=magnitude.max(axis=0),
        M_tilde=float(np.max(magnitude[:, 1:].sum(axis=1))),
        sample_points=z,
        truncation_scale=t.dt ** (t.p + 1),
        q_values=q,
    )


def ssp_coefficient(t: ShuOsherTableau) -> float:
    """``min alpha/beta`` over entries with ``beta != 0``; zero when not SSP."""
    beta = t.beta
    if np.any(beta < 0.0) or np.any((t.alpha == 0.0) & (beta > 0.0)):
        return 0.0
    positive = beta > 0.0
    if not np.any(positive):
        return float("inf")
    return float(np.min(t.alpha[positive] / beta[positive]))


def summarize_amplification(t: ShuOsherTableau, report: AmplificationReport) -> AmplificationSummary:
    roundoff = report.M_tilde * float(np.finfo(float).eps)
    return AmplificationSummary(
        degree=t.S,
        order=t.p,
        dt=t.dt,
        m_tilde=report.M_tilde,
        per_stage_max=report.per_stage_max.tolist(),
        samples=int(report.sample_points.size),
        truncation_scale=report.truncation_scale,
        roundoff_scale=roundoff,
        ratio=roundoff / report.truncation_scale,
        ssp_coefficient=ssp_coefficient(t),
        max_abs_beta=t.max_abs_beta,
    )


# =============================================================================
# Serialization
# =============================================================================


def _triplets(matrix: np.ndarray) -> list[tuple[int, int, float]]:
    rows, cols = np.nonzero(matrix)
    return [(int(r), int(k), float(matrix[r, k])) for r, k in zip(rows, cols, strict=True)]


def to_record(t: ShuOsherTableau) -> TableauRecord:
    return TableauRecord(
        version=TABLEAU_VERSION,
        S=t.S,
        p=t.p,
        dt=t.dt,
        v=t.v.tolist(),
        alpha_triplets=_triplets(t.alpha),
        beta_triplets=_triplets(t.beta),
        c=t.c.tolist(),
        grouping=list(t.grouping),
    )


def _dense(triplets: list[tuple[int, int, float]], S: int, name: str) -> np.ndarray:
    matrix = np.zeros((S + 1, S))
    for index, (row, col, value) in enumerate(triplets):
        if not (0 <= row <= S and 0 <= col < S):
            raise TableauFormatError(f"index ({row}, {col}) out of range", location=f"{name}[{index}]")
        matrix[row, col] = value
    return matrix


def from_record(record: TableauRecord) -> ShuOsherTableau:
    if record.version != TABLEAU_VERSION:
        raise TableauFormatError(
            f"unsupported version '{record.version}', expected '{TABLEAU_VERSION}'",
            location="version",
        )
    return ShuOsherTableau(
        S=record.S,
        p=record.p,
        dt=record.dt,
        v=np.array(record.v),
        alpha=_dense(record.alpha_triplets, record.S, "alpha_triplets"),
        beta=_dense(record.beta_triplets, record.S, "beta_triplets"),
        c=np.array(record.c),
        grouping=tuple(record.grouping),
    )


def serialize_tableau(t: ShuOsherTableau, path: str | Path) -> Path:
    """Write a tableau as JSON with sparse triplets and round-trip floats."""
    path = Path(path)
    path.write_text(to_record(t).model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def deserialize_tableau(path: str | Path) -> ShuOsherTableau:
    """Read a tableau written by ``serialize_tableau``.

    Raises:
        TableauFormatError: On unreadable files, missing fields, a version
            mismatch or structurally invalid coefficients
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise TableauFormatError(f"cannot read {path}: {e}") from e
    try:
        record = TableauRecord.model_validate_json(text)
    except ValidationError as e:
        error = e.errors()[0]
        location = ".".join(str(part) for part in error["loc"]) or None
        raise TableauFormatError(error["msg"], location=location) from e
    return from_record(record)
