"""Eigenvalue spectra of semidiscretizations.

Spectra are loaded from CSV files (one ``re,im`` pair per line, ``#`` starts
a comment) or generated for the canonical test problems. Before they enter
the optimizer they are reduced to the closed upper half-plane, since the
spectrum of a real Jacobian is symmetric about the real axis.
"""

import logging
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np

from stabopt.exceptions import SpectrumFormatError, SpectrumValidationError

logger = logging.getLogger(__name__)

# Relative tolerance for clamping spurious positive real parts and for the
# default deduplication distance
RELATIVE_TOLERANCE = 1e-12


class SpectrumSource(StrEnum):
    FILE = "file"
    GENERATOR = "generator"


@dataclass(frozen=True)
class Spectrum:
    """Complex eigenvalues of a semidiscretization Jacobian.

    Real parts up to ``RELATIVE_TOLERANCE * max|λ|`` above zero are clamped to
    zero; anything larger is rejected.
    """

    eigenvalues: np.ndarray
    label: str = ""
    source: SpectrumSource = SpectrumSource.GENERATOR

    def __post_init__(self) -> None:
        values = np.atleast_1d(np.asarray(self.eigenvalues, dtype=np.complex128))
        if values.ndim != 1:
            raise SpectrumValidationError("eigenvalues must be a flat list")
        if values.size == 0:
            raise SpectrumValidationError("spectrum is empty")
        if not np.all(np.isfinite(values)):
            raise SpectrumValidationError("spectrum contains NaN or Inf")

        tol = RELATIVE_TOLERANCE * float(np.max(np.abs(values)))
        if np.any(values.real > tol):
            worst = values[np.argmax(values.real)]
            raise SpectrumValidationError(
                f"eigenvalue {worst} has positive real part"
            )
        values = np.where(values.real > 0.0, 1j * values.imag, values)
        values.setflags(write=False)
        object.__setattr__(self, "eigenvalues", values)

    @property
    def size(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def max_modulus(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))

    def scaled(self, dt: float) -> "ScaledSpectrum":
        return ScaledSpectrum(base=self, dt=dt)


@dataclass(frozen=True)
class ScaledSpectrum:
    """Spectrum multiplied by a timestep, ``values = dt * eigenvalues``."""

    base: Spectrum
    dt: float
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.dt > 0.0:
            raise SpectrumValidationError(f"timestep must be positive, got {self.dt}")
        values = self.dt * self.base.eigenvalues
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def min_real(self) -> float:
        return float(np.min(self.values.real))

    @property
    def max_imag(self) -> float:
        return float(np.max(np.abs(self.values.imag)))


# =============================================================================
# File I/O
# =============================================================================


def load_spectrum(path: str | Path, fmt: str = "csv") -> Spectrum:
    """Load a raw spectrum from a file.

    Args:
        path: CSV file with one ``re,im`` pair per line
        fmt: File format, only ``"csv"`` is supported

    Returns:
        Spectrum with ``source=file`` and no reduction applied

    Raises:
        SpectrumFormatError: On unparsable lines or a file without eigenvalues
        SpectrumValidationError: On eigenvalues with positive real part
    """
    if fmt != "csv":
        raise SpectrumFormatError(f"unsupported spectrum format '{fmt}'")

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SpectrumFormatError(f"cannot read file: {e}", path=str(path)) from e

    values: list[complex] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [part.strip() for part in line.split(",")]
        if len(parts) != 2:
            raise SpectrumFormatError(
                f"expected 're,im', got '{line}'", path=str(path), line=number
            )
        try:
            values.append(complex(float(parts[0]), float(parts[1])))
        except ValueError as e:
            raise SpectrumFormatError(
                f"cannot parse '{line}' as decimals", path=str(path), line=number
            ) from e

    if not values:
        raise SpectrumFormatError("file contains no eigenvalues", path=str(path))

    logger.info(f"Loaded {len(values)} eigenvalues from {path}")
    return Spectrum(np.array(values), label=path.stem, source=SpectrumSource.FILE)


def write_spectrum(spectrum: Spectrum, path: str | Path) -> Path:
    """Write a spectrum in the CSV format read by ``load_spectrum``."""
    path = Path(path)
    lines = [f"# {spectrum.label or 'spectrum'} ({spectrum.size} eigenvalues)"]
    lines.extend(f"{z.real!r},{z.imag!r}" for z in spectrum.eigenvalues.tolist())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# =============================================================================
# Generators
# =============================================================================


def generate_fv_advection_circle(
    cells: int, domain_length: float, velocity: float
) -> Spectrum:
    """Exact spectrum of first-order upwind finite volumes for linear advection.

    The circulant operator ``u_i' = -(a/Δx)(u_i - u_{i-1})`` has eigenvalues
    ``-(a/Δx)(1 - exp(-iθ_k))`` with ``θ_k = 2πk/cells``, which lie on the
    circle of radius ``a/Δx`` centred at ``-a/Δx``. The ordering ``k = 0..cells-1``
    matches ``numpy.fft``.
    """
    if cells < 2:
        raise SpectrumValidationError(f"cells must be at least 2, got {cells}")
    if domain_length <= 0.0 or velocity <= 0.0:
        raise SpectrumValidationError("domain length and velocity must be positive")

    radius = velocity * cells / domain_length
    theta = 2.0 * np.pi * np.arange(cells) / cells
    values = -radius * (1.0 - np.exp(-1j * theta))
    # sin(π) and friends leave round-off in the imaginary part of real modes
    tiny = np.abs(values.imag) <= 1e-14 * radius
    values = np.where(tiny, values.real + 0j, values)
    return Spectrum(
        values,
        label=f"fv-advection-{cells}",
        source=SpectrumSource.GENERATOR,
    )


def generate_negative_real_line(points: int, extent: float) -> Spectrum:
    """Equally spaced real eigenvalues on ``[-extent, 0]``."""
    if points < 2:
        raise SpectrumValidationError(f"points must be at least 2, got {points}")
    if extent <= 0.0:
        raise SpectrumValidationError("extent must be positive")
    values = np.linspace(-extent, 0.0, points) + 0j
    return Spectrum(values, label=f"real-line-{points}", source=SpectrumSource.GENERATOR)


# =============================================================================
# Reduction
# =============================================================================


def reduce_to_upper(s: Spectrum, dedup_tol: float | None = None) -> Spectrum:
    """Drop the lower half-plane and merge near-duplicate eigenvalues.

    Imaginary parts within ``dedup_tol`` of zero are snapped to the real axis so
    that round-off never drops a real eigenvalue. Points closer than
    ``dedup_tol`` to an already kept point are discarded.

    Args:
        s: Spectrum to reduce
        dedup_tol: Absolute merge distance, defaults to ``1e-12 * max|λ|``

    Returns:
        Reduced spectrum sorted by real part, then imaginary part
    """
    tol = RELATIVE_TOLERANCE * s.max_modulus if dedup_tol is None else dedup_tol
    if tol < 0.0:
        raise SpectrumValidationError("dedup_tol must be non-negative")

    values = s.eigenvalues
    values = np.where(np.abs(values.imag) <= tol, values.real + 0j, values)
    values = values[values.imag >= 0.0]
    values = values[np.lexsort((values.imag, values.real))]

    kept = np.empty_like(values)
    count = 0
    for z in values:
        if count and np.min(np.abs(kept[:count] - z)) <= tol:
            continue
        kept[count] = z
        count += 1

    reduced = kept[:count].copy()
    logger.debug(f"Reduced spectrum '{s.label}' from {s.size} to {count} eigenvalues")
    return Spectrum(reduced, label=s.label, source=s.source)
