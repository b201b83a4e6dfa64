"""
Pydantic Models for Configuration and Run Records

This module contains the optimizer configuration and every record stabopt
writes or prints. Records are serialized with ``model_dump_json`` and read
back with ``model_validate_json``.
"""

import logging
import tomllib
from enum import StrEnum
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from stabopt.exceptions import ConfigError

logger = logging.getLogger(__name__)

TABLEAU_VERSION = "stabopt-tableau/1"


# ============================================================================
# Optimizer Configuration
# ============================================================================


class OptimizeMode(StrEnum):
    FEASIBILITY = "feasibility"
    MAXIMIZE = "maximize"


class EnvelopeKind(StrEnum):
    HULL = "hull"
    ALPHA = "alpha"


class OptimizeConfig(BaseModel):
    """Settings of one pseudo-extrema optimization run"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    degree: int = Field(ge=3, description="Number of stages S of the polynomial")
    order: int = Field(default=1, ge=1, le=3, description="Linear order of accuracy p")
    eps: float = Field(
        default=0.02,
        ge=0.0,
        description="Half-width of the imaginary correction box as a fraction of max Im",
    )
    mode: OptimizeMode = Field(
        default=OptimizeMode.MAXIMIZE, description="Feasibility probe or timestep maximization"
    )
    dt: float | None = Field(default=None, gt=0.0, description="Explicit timestep to probe")
    dt_ref: float | None = Field(
        default=None, gt=0.0, description="Reference timestep reached with s_ref stages"
    )
    s_ref: int | None = Field(default=None, ge=2, description="Stage count of dt_ref")
    bisection_rtol: float = Field(
        default=1e-4, gt=0.0, lt=1.0, description="Relative bracket width ending the search"
    )
    constraint_tol: float = Field(
        default=1e-14, ge=0.0, description="Allowed max(|P(dt*lambda)|) - 1"
    )
    order_tol: float = Field(
        default=1e-10, gt=0.0, description="Allowed order-constraint residual"
    )
    max_iterations: int = Field(
        default=2000, ge=1, description="Inner quasi-Newton iteration cap per penalty round"
    )
    penalty_rounds: int = Field(
        default=5, ge=1, description="Outer penalty rounds, weight x10 per round"
    )
    seed: int = Field(default=0, description="Seed for jittered restarts")
    restarts: int = Field(default=0, ge=0, description="Jittered restarts per infeasible probe")
    envelope: EnvelopeKind = Field(
        default=EnvelopeKind.HULL, description="Enclosing curve used for initialization"
    )
    alpha: float | None = Field(
        default=None, ge=0.0, description="Alpha-shape parameter in eigenvalue units"
    )
    hull_plus_samples: int | None = Field(
        default=None,
        ge=0,
        description="Constrain hull vertices plus this many interior samples",
    )
    allow_odd: bool = Field(default=False, description="Permit odd stage counts")
    spectrum: str | None = Field(default=None, description="Path of the spectrum CSV")

    @model_validator(mode="after")
    def _check_consistency(self) -> "OptimizeConfig":
        if self.degree % 2 and not self.allow_odd:
            raise ValueError(f"degree must be even, got {self.degree} (set allow_odd)")
        if self.degree % 2 == 0 and self.degree < 4:
            raise ValueError(f"even degree must be at least 4, got {self.degree}")
        if self.degree < self.order:
            raise ValueError(f"degree {self.degree} cannot reach order {self.order}")
        if (self.dt_ref is None) != (self.s_ref is None):
            raise ValueError("dt_ref and s_ref must be given together")
        if self.mode == OptimizeMode.FEASIBILITY and self.dt is None and self.dt_ref is None:
            raise ValueError("feasibility mode needs dt or dt_ref with s_ref")
        if self.envelope == EnvelopeKind.ALPHA and self.alpha is None:
            raise ValueError("envelope 'alpha' needs an alpha value")
        return self

    @property
    def expected_dt(self) -> float | None:
        """Timestep to probe: explicit ``dt`` or linear scaling ``(S/S_ref) dt_ref``."""
        if self.dt is not None:
            return self.dt
        if self.dt_ref is not None and self.s_ref is not None:
            return self.degree / self.s_ref * self.dt_ref
        return None


def _first_error(e: ValidationError) -> tuple[str, str | None]:
    error = e.errors()[0]
    location = ".".join(str(part) for part in error["loc"])
    return error["msg"], location or None


def make_config(values: dict[str, Any]) -> OptimizeConfig:
    """Validate a mapping into an ``OptimizeConfig``.

    Raises:
        ConfigError: Naming the first offending field
    """
    try:
        return OptimizeConfig.model_validate(values)
    except ValidationError as e:
        message, location = _first_error(e)
        raise ConfigError(message, field=location) from e


def load_config(path: str | Path, base: dict[str, Any] | None = None) -> OptimizeConfig:
    """Load a TOML config file, overriding the values in ``base``.

    Keys may sit at the top level or under an ``[optimize]`` table.
    """
    path = Path(path)
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e

    table = data.get("optimize", data)
    merged = {**(base or {}), **table}
    logger.debug(f"Loaded config {path} with keys {sorted(table)}")
    return make_config(merged)


# ============================================================================
# Optimizer Records
# ============================================================================


class RunSummary(BaseModel):
    """Outcome of an optimization run"""

    degree: int = Field(description="Number of stages S")
    order: int = Field(description="Linear order of accuracy p")
    mode: OptimizeMode = Field(description="Search mode used")
    status: str = Field(description="optimal, feasible, infeasible or max_iter")
    achieved_dt: float = Field(description="Timestep of the returned pseudo-extrema")
    max_violation: float = Field(description="max(|P(dt*lambda)|) - 1 over the spectrum")
    iterations: int = Field(description="Inner iterations summed over all probes")
    order_residual: list[float] = Field(
        default=[], description="Order-constraint residuals of the result"
    )
    pe_file: str | None = Field(default=None, description="Written pseudo-extrema CSV")


# ============================================================================
# Tableau Records
# ============================================================================


class SubmethodRecord(BaseModel):
    """One Forward Euler, pair or quartic submethod inside a tableau"""

    kind: Literal["euler", "pair", "lebedev_quad"] = Field(description="Submethod type")
    pe_indices: list[int] = Field(description="Indices into the roots() listing")
    stage_start: int = Field(ge=1, description="First stage row (1-based) it writes")
    stage_stop: int = Field(description="Last stage row (1-based, inclusive)")


class TableauRecord(BaseModel):
    """File form of a Shu-Osher tableau with sparse triplets"""

    model_config = ConfigDict(extra="forbid")

    version: str = Field(description="Format tag, must equal TABLEAU_VERSION")
    S: int = Field(ge=1, description="Number of stages")
    p: int = Field(ge=1, le=3, description="Linear order of accuracy")
    dt: float = Field(gt=0.0, description="Timestep the tableau was built for")
    v: list[float] = Field(description="Weights of U_n per row, length S+1")
    alpha_triplets: list[tuple[int, int, float]] = Field(
        description="Nonzero (row, column, value) entries of alpha, 0-based"
    )
    beta_triplets: list[tuple[int, int, float]] = Field(
        description="Nonzero (row, column, value) entries of beta, 0-based"
    )
    c: list[float] = Field(description="Stage abscissae, length S")
    grouping: list[SubmethodRecord] = Field(default=[], description="Submethod layout")


class AmplificationSummary(BaseModel):
    """Internal stability figures next to the truncation scale"""

    degree: int = Field(description="Number of stages S")
    order: int = Field(description="Linear order of accuracy p")
    dt: float = Field(description="Timestep of the tableau")
    m_tilde: float = Field(description="max over samples of sum_k>=2 |Q_k|")
    per_stage_max: list[float] = Field(description="max |Q_k| per stage row")
    samples: int = Field(description="Number of boundary samples")
    truncation_scale: float = Field(description="dt**(p+1)")
    roundoff_scale: float = Field(description="m_tilde times machine epsilon")
    ratio: float = Field(description="roundoff_scale / truncation_scale")
    ssp_coefficient: float = Field(description="min alpha/beta, 0 when not SSP")
    max_abs_beta: float = Field(description="Largest |beta| entry")


# ============================================================================
# Integration Records
# ============================================================================


class IntegrationReport(BaseModel):
    """Single integration of a semidiscrete system"""

    system: str = Field(description="System label")
    dt: float = Field(description="Nominal step size")
    t0: float = Field(description="Start time")
    tf: float = Field(description="Requested end time")
    t_end: float = Field(description="Reached end time")
    steps: int = Field(description="Steps taken, including a truncated last step")
    error_linf: float | None = Field(default=None, description="Max-norm error at tf")
    error_l1: float | None = Field(default=None, description="Weighted L1 error at tf")
    tv_increase: float = Field(description="Periodic TV of final minus initial state")


class ConvergenceReport(BaseModel):
    """Result table of a timestep refinement study"""

    system: str = Field(description="System label")
    norm: str = Field(description="linf or weighted_l1")
    reference: str = Field(description="exact or fine")
    dts: list[float] = Field(description="Step sizes in descending order")
    errors: list[float | None] = Field(description="Error per step size, None if unstable")
    steps: list[int] = Field(description="Steps taken per step size")
    unstable: list[float] = Field(default=[], description="Step sizes that diverged")
    slope: float | None = Field(default=None, description="Least-squares log-log slope")
    slope_defined: bool = Field(description="False when too few positive errors remain")


# ============================================================================
# Manifest
# ============================================================================


class RunManifest(BaseModel):
    """Replay record written next to the artifacts of a CLI command"""

    command: str = Field(description="Subcommand that produced the artifacts")
    config: dict[str, Any] = Field(default={}, description="Effective settings")
    inputs: dict[str, str] = Field(default={}, description="Input path -> SHA-256 digest")
    outputs: list[str] = Field(default=[], description="Artifact paths written")
    wall_time: float = Field(description="Elapsed seconds")
    status: str = Field(description="ok, infeasible, construction_failed or unstable")
