#!/usr/bin/env python3
"""
stabopt CLI Entry Point
Runs the pipeline spectrum -> optimize -> construct -> verify/integrate/converge.

Every command prints one JSON document on stdout; logging goes to stderr.
Commands that write artifacts also write a ``<artifact>.manifest.json`` replay
record with the effective settings and SHA-256 digests of their inputs.
Exit codes: 0 ok, 2 usage or input error, 3 infeasible, 4 construction
failure, 5 instability.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

from stabopt import __version__
from stabopt.exceptions import (
    EXIT_INFEASIBLE,
    EXIT_INSTABILITY,
    EXIT_OK,
    ConfigError,
    StaboptError,
)
from stabopt.models import OptimizeMode, RunManifest, RunSummary, load_config, make_config
from stabopt.mol import (
    NORMS,
    PROFILES,
    REFERENCES,
    SemidiscreteSystem,
    advect_fv_system,
    burgers_manufactured_system,
    convergence_study,
    integration_report,
)
from stabopt.optimizer import find_max_dt, find_max_dt_doubling, verify_stability
from stabopt.polynomial import (
    StabilityPolynomial,
    chebyshev_pe,
    disk_polynomial_pe,
    load_pe,
    stability_boundary_samples,
    write_pe,
)
from stabopt.rk import (
    build_tableau,
    deserialize_tableau,
    internal_stability,
    serialize_tableau,
    summarize_amplification,
)
from stabopt.spectra import (
    generate_fv_advection_circle,
    generate_negative_real_line,
    load_spectrum,
    reduce_to_upper,
    write_spectrum,
)

logger = logging.getLogger(__name__)

# Flags that map one-to-one onto OptimizeConfig fields
_OPTIMIZE_FIELDS = (
    "degree",
    "order",
    "eps",
    "mode",
    "dt",
    "dt_ref",
    "s_ref",
    "bisection_rtol",
    "constraint_tol",
    "max_iterations",
    "penalty_rounds",
    "seed",
    "restarts",
    "envelope",
    "alpha",
    "hull_plus_samples",
    "spectrum",
)


def _create_parser() -> argparse.ArgumentParser:
    """
    Create and configure the argument parser.

    Returns:
        argparse.ArgumentParser: Configured argument parser with subcommands.
    """
    parser = argparse.ArgumentParser(
        prog="stabopt",
        description="Optimal stability polynomials and many-stage Runge-Kutta methods",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "Examples:\n"
            "  stabopt spectrum gen fv-advection --cells 500 --length 2 --output circle.csv\n"
            "  stabopt optimize --spectrum circle.csv --degree 16 --order 2 --output pe.csv\n"
            "  stabopt construct --pe pe.csv --output tableau.json\n"
            "  stabopt converge --system advection --tableau tableau.json --dts 5\n"
        ),
    )
    parser.add_argument("--version", action="version", version=f"stabopt {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
    subparsers = parser.add_subparsers(dest="command", help="Command to run", required=False)

    # Spectrum command
    spectrum_parser = subparsers.add_parser("spectrum", help="Generate or load a spectrum")
    spectrum_actions = spectrum_parser.add_subparsers(dest="action", required=True)
    gen_parser = spectrum_actions.add_parser("gen", help="Generate a model spectrum")
    gen_parser.add_argument("kind", choices=["fv-advection", "real-line"])
    gen_parser.add_argument("--cells", type=int, default=500, help="Cells (fv-advection)")
    gen_parser.add_argument("--length", type=float, default=2.0, help="Domain length")
    gen_parser.add_argument("--velocity", type=float, default=1.0, help="Advection speed")
    gen_parser.add_argument("--points", type=int, default=100, help="Points (real-line)")
    gen_parser.add_argument("--extent", type=float, default=1.0, help="Extent (real-line)")
    load_parser = spectrum_actions.add_parser("load", help="Load and rewrite a spectrum CSV")
    load_parser.add_argument("file", help="Spectrum CSV with re,im rows")
    for action_parser in (gen_parser, load_parser):
        action_parser.add_argument(
            "--reduce", action="store_true", help="Keep the upper half-plane only"
        )
        action_parser.add_argument(
            "--dedup-tol", type=float, default=None, help="Duplicate merge distance"
        )
        action_parser.add_argument("--output", default="spectrum.csv", help="Output CSV")

    # Optimize command
    opt_parser = subparsers.add_parser("optimize", help="Optimize pseudo-extrema")
    opt_parser.add_argument("--spectrum", help="Spectrum CSV")
    opt_parser.add_argument("--config", help="TOML file overriding the flags")
    opt_parser.add_argument("--degree", type=int, help="Number of stages S")
    opt_parser.add_argument("--order", type=int, help="Linear order p (1-3)")
    opt_parser.add_argument("--eps", type=float, help="Imaginary box half-width (default 0.02)")
    opt_parser.add_argument("--mode", choices=[m.value for m in OptimizeMode])
    opt_parser.add_argument("--dt", type=float, help="Timestep to probe")
    opt_parser.add_argument("--dt-ref", type=float, help="Reference timestep")
    opt_parser.add_argument("--s-ref", type=int, help="Stages of the reference timestep")
    opt_parser.add_argument("--bisection-rtol", type=float)
    opt_parser.add_argument("--constraint-tol", type=float)
    opt_parser.add_argument("--max-iterations", type=int)
    opt_parser.add_argument("--penalty-rounds", type=int)
    opt_parser.add_argument("--seed", type=int)
    opt_parser.add_argument("--restarts", type=int, help="Jittered restarts per probe")
    opt_parser.add_argument("--envelope", choices=["hull", "alpha"])
    opt_parser.add_argument("--alpha", type=float, help="Alpha-shape parameter")
    opt_parser.add_argument("--hull-plus-samples", type=int)
    opt_parser.add_argument("--allow-odd", action="store_true", help="Permit odd S")
    opt_parser.add_argument(
        "--double-from", type=int, help="Optimize S0, 2*S0, ... up to --degree"
    )
    opt_parser.add_argument("--output", default="pe.csv", help="Pseudo-extrema CSV")

    # Construct command
    con_parser = subparsers.add_parser("construct", help="Build a Shu-Osher tableau")
    con_parser.add_argument("--pe", required=True, help="Pseudo-extrema CSV")
    con_parser.add_argument("--dt", type=float, help="Timestep (default: from the pe file)")
    con_parser.add_argument("--order", type=int, help="Order (default: from the pe file)")
    con_parser.add_argument(
        "--negative-beta", action="store_true", help="Allow negative beta entries"
    )
    con_parser.add_argument(
        "--lebedev",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="Group small-Re pairs into four-stage submethods",
    )
    con_parser.add_argument("--grouping-threshold", type=float, default=-0.5)
    con_parser.add_argument("--rays", type=int, default=256, help="Boundary samples")
    con_parser.add_argument("--output", default="tableau.json", help="Tableau file")

    # Verify command
    ver_parser = subparsers.add_parser("verify", help="Check |P(dt*lambda)| <= 1")
    ver_parser.add_argument("--pe", required=True, help="Pseudo-extrema CSV")
    ver_parser.add_argument("--spectrum", required=True, help="Spectrum CSV")
    ver_parser.add_argument("--dt", type=float, help="Timestep (default: from the pe file)")
    ver_parser.add_argument("--order", type=int, help="Order (default: from the pe file)")
    ver_parser.add_argument("--tol", type=float, default=1e-14, help="Allowed violation")

    # Integrate and converge commands
    int_parser = subparsers.add_parser("integrate", help="Integrate a test system")
    int_parser.add_argument("--dt", type=float, help="Step size (default: tableau dt)")
    int_parser.add_argument("--tf", type=float, default=1.0, help="End time")
    int_parser.add_argument("--output", help="Report JSON")
    conv_parser = subparsers.add_parser("converge", help="Measure the convergence slope")
    conv_parser.add_argument("--dts", type=int, default=5, help="Number of halved timesteps")
    conv_parser.add_argument("--dt-max", type=float, help="Largest timestep (default: tableau dt)")
    conv_parser.add_argument("--tf", type=float, default=1.0, help="End time")
    conv_parser.add_argument("--norm", choices=NORMS, default="linf")
    conv_parser.add_argument(
        "--reference", choices=REFERENCES, help="Error reference (fine for burgers, else exact)"
    )
    conv_parser.add_argument("--output", default="convergence.csv", help="dt,error,steps CSV")
    for run_parser in (int_parser, conv_parser):
        run_parser.add_argument("--system", choices=["advection", "burgers"], required=True)
        run_parser.add_argument("--tableau", required=True, help="Tableau JSON")
        run_parser.add_argument("--cells", type=int, help="Cells (500 advection, 256 burgers)")
        run_parser.add_argument("--length", type=float, default=2.0, help="Advection domain")
        run_parser.add_argument("--velocity", type=float, default=1.0, help="Advection speed")
        run_parser.add_argument("--profile", choices=PROFILES, default="sine")

    # Oracle command
    ora_parser = subparsers.add_parser("oracle", help="Write closed-form pseudo-extrema")
    ora_parser.add_argument("family", choices=["disk", "chebyshev"])
    ora_parser.add_argument("--degree", type=int, required=True)
    ora_parser.add_argument("--order", type=int, default=1, help="Order (disk only)")
    ora_parser.add_argument("--output", default="pe.csv", help="Pseudo-extrema CSV")

    return parser


# ============================================================================
# Helpers
# ============================================================================


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2))


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(
    artifact: Path,
    command: str,
    config: dict[str, Any],
    inputs: list[str],
    outputs: list[Path],
    started: float,
    status: str,
) -> Path:
    manifest = RunManifest(
        command=command,
        config=config,
        inputs={path: _digest(path) for path in inputs},
        outputs=[str(path) for path in outputs],
        wall_time=time.perf_counter() - started,
        status=status,
    )
    path = artifact.with_name(artifact.name + ".manifest.json")
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.debug(f"Wrote manifest {path}")
    return path


def _pe_metadata(path: str | Path) -> dict[str, str]:
    """Key/value pairs from the ``# key value ...`` header lines of a pe file."""
    metadata: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if not raw.startswith("#"):
            continue
        tokens = raw[1:].split()
        metadata.update(zip(tokens[::2], tokens[1::2], strict=False))
    return metadata


def _load_polynomial(path: str, dt: float | None, order: int | None) -> StabilityPolynomial:
    pe = load_pe(path)
    metadata = _pe_metadata(path)
    if dt is None:
        if "dt" not in metadata:
            raise ConfigError(f"{path} records no timestep, pass --dt", field="dt")
        dt = float(metadata["dt"])
    if order is None:
        order = int(metadata.get("order", 1))
    return StabilityPolynomial(pe, order, dt)


def _make_system(args: argparse.Namespace) -> SemidiscreteSystem:
    if args.system == "advection":
        cells = args.cells if args.cells is not None else 500
        return advect_fv_system(cells, args.length, args.velocity, args.profile)
    return burgers_manufactured_system(args.cells if args.cells is not None else 256)


# ============================================================================
# Command handlers
# ============================================================================


def _handle_spectrum_command(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    inputs: list[str] = []
    if args.action == "gen":
        if args.kind == "fv-advection":
            spectrum = generate_fv_advection_circle(args.cells, args.length, args.velocity)
        else:
            spectrum = generate_negative_real_line(args.points, args.extent)
    else:
        spectrum = load_spectrum(args.file)
        inputs.append(args.file)
    if args.reduce:
        spectrum = reduce_to_upper(spectrum, args.dedup_tol)

    output = write_spectrum(spectrum, args.output)
    config = {key: value for key, value in vars(args).items() if key not in ("command", "verbose")}
    _write_manifest(output, "spectrum", config, inputs, [output], started, "ok")
    _emit(
        {
            "status": "success",
            "output": str(output),
            "label": spectrum.label,
            "eigenvalues": spectrum.size,
            "max_modulus": spectrum.max_modulus,
        }
    )
    return EXIT_OK


def _handle_optimize_command(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    base = {name: getattr(args, name) for name in _OPTIMIZE_FIELDS if getattr(args, name) is not None}
    if args.allow_odd:
        base["allow_odd"] = True
    cfg = load_config(args.config, base) if args.config else make_config(base)
    if cfg.spectrum is None:
        raise ConfigError("a spectrum file is required", field="spectrum")

    spectrum = load_spectrum(cfg.spectrum)
    if args.double_from is not None:
        result = find_max_dt_doubling(cfg, spectrum, args.double_from)
    else:
        result = find_max_dt(cfg, spectrum)

    output = write_pe(
        result.pe, args.output, header=f"dt {float(result.achieved_dt)!r} order {cfg.order}"
    )
    inputs = [cfg.spectrum] + ([args.config] if args.config else [])
    status = "ok" if result.feasible else "infeasible"
    config = cfg.model_dump(mode="json") | {"double_from": args.double_from}
    _write_manifest(output, "optimize", config, inputs, [output], started, status)

    summary = RunSummary(
        degree=cfg.degree,
        order=cfg.order,
        mode=cfg.mode,
        status=str(result.status),
        achieved_dt=result.achieved_dt,
        max_violation=result.max_violation,
        iterations=result.iterations,
        order_residual=result.order_residual.tolist(),
        pe_file=str(output),
    )
    print(summary.model_dump_json(indent=2))
    if not result.feasible:
        logger.error(f"No stable polynomial found (best violation: {float(result.max_violation)!r})")
        return EXIT_INFEASIBLE
    return EXIT_OK


def _handle_construct_command(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    poly = _load_polynomial(args.pe, args.dt, args.order)
    tableau = build_tableau(
        poly,
        allow_negative_beta=args.negative_beta,
        lebedev_grouping=args.lebedev,
        grouping_threshold=args.grouping_threshold,
    )
    output = serialize_tableau(tableau, args.output)

    samples = stability_boundary_samples(poly.pe, rays=args.rays)
    summary = summarize_amplification(tableau, internal_stability(tableau, samples))
    logger.info(
        f"M_tilde={summary.m_tilde:.3e}, M_tilde*eps={summary.roundoff_scale:.3e}, "
        f"dt^(p+1)={summary.truncation_scale:.3e}"
    )
    config = {
        "pe": args.pe,
        "dt": poly.dt,
        "order": poly.order,
        "negative_beta": args.negative_beta,
        "lebedev": args.lebedev,
        "grouping_threshold": args.grouping_threshold,
        "rays": args.rays,
    }
    _write_manifest(output, "construct", config, [args.pe], [output], started, "ok")
    _emit({"status": "success", "tableau": str(output), "amplification": summary.model_dump()})
    return EXIT_OK


def _handle_verify_command(args: argparse.Namespace) -> int:
    poly = _load_polynomial(args.pe, args.dt, args.order)
    violation = verify_stability(poly, load_spectrum(args.spectrum))
    stable = violation <= args.tol
    _emit(
        {
            "status": "success" if stable else "unstable",
            "dt": poly.dt,
            "max_violation": violation,
            "stable": stable,
        }
    )
    return EXIT_OK if stable else EXIT_INSTABILITY


def _handle_integrate_command(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    tableau = deserialize_tableau(args.tableau)
    system = _make_system(args)
    dt = args.dt if args.dt is not None else tableau.dt
    report = integration_report(system, tableau, dt, args.tf)
    if args.output:
        output = Path(args.output)
        output.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        config = {key: value for key, value in vars(args).items() if key not in ("command", "verbose")}
        _write_manifest(output, "integrate", config, [args.tableau], [output], started, "ok")
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def _handle_converge_command(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    if args.dts < 3:
        raise ConfigError(f"at least 3 timesteps are needed, got {args.dts}", field="dts")
    tableau = deserialize_tableau(args.tableau)
    system = _make_system(args)
    dt_max = args.dt_max if args.dt_max is not None else tableau.dt
    dts = [dt_max / 2**k for k in range(args.dts)]
    # first-order Godunov space error swamps the time error against the exact solution
    args.reference = args.reference or ("fine" if args.system == "burgers" else "exact")

    study = convergence_study(
        system, tableau, dts, norm=args.norm, tf=args.tf, reference=args.reference
    )
    output = study.write_csv(args.output)
    status = "unstable" if study.unstable else "ok"
    config = {key: value for key, value in vars(args).items() if key not in ("command", "verbose")}
    _write_manifest(output, "converge", config, [args.tableau], [output], started, status)
    print(study.to_report().model_dump_json(indent=2))
    if study.unstable:
        logger.error(f"{len(study.unstable)} run(s) diverged: {study.unstable}")
        return EXIT_INSTABILITY
    return EXIT_OK


def _handle_oracle_command(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    if args.family == "disk":
        pe = disk_polynomial_pe(args.degree, args.order)
        header = f"order {args.order}"
    else:
        pe = chebyshev_pe(args.degree)
        header = "order 1"
    output = write_pe(pe, args.output, header=header)
    config = {"family": args.family, "degree": args.degree, "order": args.order}
    _write_manifest(output, "oracle", config, [], [output], started, "ok")
    _emit({"status": "success", "output": str(output), "degree": pe.degree})
    return EXIT_OK


_HANDLERS = {
    "spectrum": _handle_spectrum_command,
    "optimize": _handle_optimize_command,
    "construct": _handle_construct_command,
    "verify": _handle_verify_command,
    "integrate": _handle_integrate_command,
    "converge": _handle_converge_command,
    "oracle": _handle_oracle_command,
}


def main(argv: list[str] | None = None) -> None:
    """
    Main CLI entry point for stabopt.

    Parses arguments, dispatches to the command handler and exits with the
    handler's code, or with the ``exit_code`` of a raised ``StaboptError``.
    """
    parser = _create_parser()
    args = parser.parse_args(argv)

    # Configure logging to stderr to avoid interfering with JSON output on stdout
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )

    if not args.command:
        parser.print_help()
        sys.exit(2)

    try:
        code = _HANDLERS[args.command](args)
    except StaboptError as e:
        logger.error(e.message)
        _emit({"status": "error", "error": type(e).__name__, "message": e.message})
        sys.exit(e.exit_code)
    sys.exit(code)


if __name__ == "__main__":
    main()
