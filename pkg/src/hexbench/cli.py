"""Scriptable pipeline driver.

Subcommands mirror the pipeline stages (deform, polycube-fit, voxelize,
pullback, optimize), plus report and run-all. Each consumes/produces session
archives; run-all chains every stage from a config file of weights, step
counts and seeds. Errors exit non-zero with a JSON error record on stderr.

Exit codes: 0 ok, 2 usage/config, 3 I/O, 4 invalid state/data, 5 internal.
Set HEXBENCH_THREADS to cap the compute thread count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, PipelineConfig, apply_setting, parse_config_file
from .formats import FileFormatError, load_tet_mesh, save_hex_mesh
from .meshes import MeshError
from .optim import OptimizationError
from .pipeline import (
    build_polycube_hex,
    final_positions,
    run_all,
    run_deform,
    run_polycube_fit,
    run_pullback,
    run_quality,
    run_report,
    run_voxelize,
    start_session,
)
from .session import Session, SessionError, load_session, save_session
from .voxelize import VoxelError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_STATE = 4
EXIT_INTERNAL = 5


def _apply_threads_env() -> None:
    raw = os.environ.get("HEXBENCH_THREADS")
    if not raw:
        return
    try:
        import numba

        numba.set_num_threads(max(1, int(raw)))
    except (ValueError, ImportError):
        pass


def _error(code: int, exc: Exception) -> int:
    record = {"error": {"code": code, "type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def _load_config(args) -> PipelineConfig:
    config = parse_config_file(args.config) if args.config else PipelineConfig()
    for item in args.set or []:
        key, _, value = item.partition("=")
        apply_setting(config, key.strip(), value)
    if args.seed is not None:
        config.seed = args.seed
    return config


def _open_session(args, config: PipelineConfig) -> Session:
    if getattr(args, "input", None):
        mesh, transform = load_tet_mesh(args.input)
        return start_session(mesh, transform, config)
    if not args.session:
        raise SessionError("either --input or --session is required")
    return load_session(args.session)


def _finish(args, session: Session) -> None:
    if args.session:
        save_session(args.session, session)


def _export_mesh(args, session: Session, config: PipelineConfig) -> None:
    if getattr(args, "out", None):
        if session.polycube_hex is None:
            build_polycube_hex(session, config)
        save_hex_mesh(args.out, session.polycube_hex,
                      transform=session.transform,
                      positions=final_positions(session))


def _cmd_deform(args):
    config = _load_config(args)
    session = _open_session(args, config)
    run_deform(session, config, n_steps=args.steps)
    _finish(args, session)
    return EXIT_OK


def _cmd_polycube_fit(args):
    config = _load_config(args)
    session = _open_session(args, config)
    run_polycube_fit(session, config)
    _finish(args, session)
    return EXIT_OK


def _cmd_voxelize(args):
    config = _load_config(args)
    if args.cell_size:
        config.voxel.cell_size = args.cell_size
    session = _open_session(args, config)
    run_voxelize(session, config)
    _finish(args, session)
    return EXIT_OK


def _cmd_pullback(args):
    config = _load_config(args)
    session = _open_session(args, config)
    if args.steps:
        config.pullback.steps = args.steps
    run_pullback(session, config)
    _finish(args, session)
    return EXIT_OK


def _cmd_optimize(args):
    config = _load_config(args)
    session = _open_session(args, config)
    run_quality(session, config, n_steps=args.steps)
    _finish(args, session)
    _export_mesh(args, session, config)
    return EXIT_OK


def _cmd_report(args):
    config = _load_config(args)
    session = _open_session(args, config)
    report = run_report(session, config)
    print(report.format_text())
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    return EXIT_OK


def _cmd_run_all(args):
    config = _load_config(args)
    session = _open_session(args, config)
    if args.cell_size:
        config.voxel.cell_size = args.cell_size
    result = run_all(session, config)
    _finish(args, session)
    _export_mesh(args, session, config)
    print(json.dumps(result, sort_keys=True, indent=1))
    if args.report_out:
        with open(args.report_out, "w") as fh:
            json.dump(result, fh, sort_keys=True, indent=1)
    return EXIT_OK


def _add_common(parser, with_input=True):
    parser.add_argument("--session", help="session archive to read/write")
    if with_input:
        parser.add_argument("--input", help="input tetrahedral mesh (.mesh/.vtk)")
    parser.add_argument("--config", help="key/value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config entry (repeatable)")
    parser.add_argument("--seed", type=int, help="override the pipeline seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hexbench",
        description="PolyCube-based all-hex meshing pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deform", help="run the deformation stage")
    _add_common(p)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=_cmd_deform)

    p = sub.add_parser("polycube-fit", help="automatic cuboid decomposition")
    _add_common(p, with_input=False)
    p.set_defaults(func=_cmd_polycube_fit)

    p = sub.add_parser("voxelize", help="snap and voxelize the polycube")
    _add_common(p, with_input=False)
    p.add_argument("--cell-size", type=float)
    p.set_defaults(func=_cmd_voxelize)

    p = sub.add_parser("pullback", help="two-phase inversion-free pullback")
    _add_common(p, with_input=False)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=_cmd_pullback)

    p = sub.add_parser("optimize", help="constrained quality optimization")
    _add_common(p, with_input=False)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="export the final hex mesh")
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("report", help="emit quality metrics")
    _add_common(p, with_input=False)
    p.add_argument("--out", help="write the machine-readable report")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("run-all", help="run the full pipeline")
    _add_common(p)
    p.add_argument("--cell-size", type=float)
    p.add_argument("--out", help="export the final hex mesh")
    p.add_argument("--report-out", help="write the machine-readable report")
    p.set_defaults(func=_cmd_run_all)
    return parser


def main(argv=None) -> int:
    _apply_threads_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, exc)
    except (FileFormatError, FileNotFoundError, OSError) as exc:
        return _error(EXIT_IO, exc)
    except (SessionError, MeshError, VoxelError, ValueError) as exc:
        return _error(EXIT_STATE, exc)
    except OptimizationError as exc:
        return _error(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
