"""Command-line wrappers around the library: artifact generation, fitting,
replay, log analysis, and the live session server.

Every subcommand is single-threaded and deterministic for a given
(config, seed), so outputs can be diffed byte-for-byte. Failures print a
one-line JSON error object to stderr and exit nonzero; stdout carries only
requested data.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .body import (FORMAT_VERSION, BodyError, BodyInstance, PoseParams,
                   ShapeParams, fit_body, generate_body, load_cloud, measure)
from .meshio import write_obj, write_ply
from .ribs import (FixtureConfig, build_all_fixtures, fixtures_to_json,
                   write_fixtures)
from .server import ServerOptions, SessionServer
from .session import (ScriptedOperator, SessionConfig, SessionError, analyze,
                      metrics_doc, run_replay, write_log)


class UsageError(ValueError):
    """Bad command line or malformed input document."""


class _Parser(argparse.ArgumentParser):
    """argparse with machine-readable errors on stderr."""

    def error(self, message):
        _print_error(UsageError(message))
        raise SystemExit(2)


def _print_error(exc: Exception) -> None:
    doc = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(doc), file=sys.stderr)


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def _session_config(args) -> SessionConfig:
    if getattr(args, "config", None) is None:
        return SessionConfig()
    return SessionConfig.from_doc(_read_json(args.config))


# ---------------------------------------------------------------------------
# body documents
# ---------------------------------------------------------------------------

def _body_doc(shape: ShapeParams, pose: PoseParams, resolution: int,
              body: BodyInstance) -> dict:
    return {"format_version": FORMAT_VERSION, "kind": "body_params",
            "shape": json.loads(shape.to_json()),
            "pose": json.loads(pose.to_json()),
            "resolution": resolution,
            "landmarks": {k: [float(x) for x in v]
                          for k, v in sorted(body.landmarks.items())},
            "measurements": {k: float(v) for k, v in measure(body).items()}}


def _params_from_body_doc(doc: dict) -> tuple[ShapeParams, PoseParams, int]:
    if doc.get("kind") not in ("body_params", "session"):
        raise UsageError(f"expected a body_params or session document, "
                         f"got kind {doc.get('kind')!r}")
    if doc.get("kind") == "session":
        cfg = SessionConfig.from_doc(doc)
        return cfg.shape, cfg.pose, cfg.resolution
    try:
        shape = ShapeParams.from_json(json.dumps(doc["shape"]))
        pose = PoseParams.from_json(json.dumps(doc["pose"]))
        resolution = int(doc.get("resolution", 96))
    except (KeyError, TypeError, BodyError) as exc:
        raise UsageError(f"malformed body document: {exc}") from exc
    return shape, pose, resolution


def _sample_subject(seed: int) -> tuple[ShapeParams, PoseParams]:
    """Deterministic plausible subject for a seed: shape scaled a few percent
    around the defaults, small joint angles, torso kept at the origin."""
    rng = np.random.default_rng(seed)
    vec = ShapeParams().as_vector() * rng.uniform(0.93, 1.07, 10)
    shape = ShapeParams.from_vector(vec)
    pose = PoseParams(flexion=float(rng.normal(0.0, 0.03)),
                      lateral=float(rng.normal(0.0, 0.03)),
                      twist=float(rng.normal(0.0, 0.03)),
                      shoulder_tilt=float(rng.normal(0.0, 0.02)))
    return shape, pose


def _write_mesh(path, mesh, object_names=None, face_groups=None) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(path, mesh, object_names=object_names, face_groups=face_groups)
    elif suffix == ".ply":
        write_ply(path, mesh)
    else:
        raise UsageError(f"unsupported mesh format {suffix!r} (use .obj or .ply)")


def _dump(doc: dict, out) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_generate_body(args) -> int:
    if args.config is not None:
        shape, pose, resolution = _params_from_body_doc(_read_json(args.config))
    elif args.seed is not None:
        shape, pose = _sample_subject(args.seed)
        resolution = args.resolution
    else:
        shape, pose, resolution = ShapeParams(), PoseParams(), args.resolution
    body = generate_body(shape, pose, resolution=resolution)
    suffix = Path(args.out).suffix.lower()
    if suffix == ".json":
        _dump(_body_doc(shape, pose, resolution, body), args.out)
    else:
        _write_mesh(args.out, body.skin)
    return 0


def _load_landmarks(path) -> dict:
    doc = _read_json(path)
    points = doc.get("landmarks", doc)   # accept a body_params doc or a bare map
    try:
        return {str(k): np.asarray(v, dtype=float).reshape(3)
                for k, v in points.items()}
    except (TypeError, ValueError) as exc:
        raise UsageError(f"malformed landmarks in {path}: {exc}") from exc


def _cmd_fit(args) -> int:
    cloud = load_cloud(args.cloud)
    landmarks = _load_landmarks(args.landmarks)
    init = PoseParams() if args.init is None else \
        PoseParams.from_json(Path(args.init).read_text(encoding="utf-8"))
    fit = fit_body(cloud, landmarks, init, resolution=args.resolution,
                   max_iter=args.max_iter)
    doc = {"format_version": FORMAT_VERSION, "kind": "fit",
           "shape": json.loads(fit.shape.to_json()),
           "pose": json.loads(fit.pose.to_json()),
           "residual": float(fit.residual),
           "converged": bool(fit.converged),
           "stages": fit.stages}
    _dump(doc, args.out)
    return 0


def _cmd_build_fixtures(args) -> int:
    shape, pose, resolution = _params_from_body_doc(_read_json(args.body))
    fixture_cfg = FixtureConfig()
    if args.config is not None:
        fixture_cfg = _session_config(args).fixture
    body = generate_body(shape, pose, resolution=resolution)
    fs = build_all_fixtures(body, fixture_cfg)
    if Path(args.out).suffix.lower() == ".json":
        Path(args.out).write_text(fixtures_to_json(fs), encoding="utf-8")
    else:
        write_fixtures(args.out, fs, sidecar_path=args.sidecar)
    return 0


def _cmd_export_mesh(args) -> int:
    if args.body is not None:
        shape, pose, resolution = _params_from_body_doc(_read_json(args.body))
    else:
        cfg = _session_config(args)
        shape, pose, resolution = cfg.shape, cfg.pose, cfg.resolution
    body = generate_body(shape, pose, resolution=resolution)
    if args.what == "skin":
        _write_mesh(args.out, body.skin)
    elif Path(args.out).suffix.lower() == ".obj":
        write_fixtures(args.out, build_all_fixtures(body))
    else:
        _write_mesh(args.out, build_all_fixtures(body).mesh)
    return 0


def _cmd_replay(args) -> int:
    config = _session_config(args)
    operator = ScriptedOperator() if args.operator is None else \
        ScriptedOperator.from_doc(_read_json(args.operator))
    if args.seed is not None:
        operator = replace(operator, seed=args.seed)
    metrics, log = run_replay(config, operator, vf_enabled=(args.vf == "on"))
    if args.out is not None:
        write_log(args.out, log)
    _dump({"format_version": FORMAT_VERSION, "kind": "metrics",
           "vf_enabled": args.vf == "on", **metrics_doc(metrics)},
          args.metrics)
    return 0


def _cmd_analyze(args) -> int:
    result = analyze(args.log)
    _dump({"format_version": FORMAT_VERSION, "kind": "analysis",
           "partial": bool(result.partial),
           "metrics": metrics_doc(result.metrics),
           "series": result.series}, args.out)
    return 0


async def _run_server(server: SessionServer) -> None:
    await server.start()
    print(json.dumps({"serving": {"host": server.options.host,
                                  "port": server.port}}),
          file=sys.stderr, flush=True)
    try:
        await asyncio.Event().wait()
    finally:
        await server.stop()


def _cmd_serve(args) -> int:
    config = _session_config(args)
    options = ServerOptions(host=args.host, port=args.port,
                            frame_rate=args.frame_rate, log_path=args.log)
    server = SessionServer(config, options)
    try:
        asyncio.run(_run_server(server))
    except KeyboardInterrupt:
        pass
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="ribfence",
                     description="Synthetic torso, rib fixtures, and "
                                 "constraint-filtered teleoperation sessions.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("generate-body", help="build a torso, write mesh or params")
    p.add_argument("--config", help="body_params or session JSON")
    p.add_argument("--seed", type=int, help="sample a subject deterministically")
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--out", required=True, help=".obj/.ply mesh or .json params")
    p.set_defaults(func=_cmd_generate_body)

    p = sub.add_parser("fit", help="recover shape+pose from a point cloud")
    p.add_argument("--cloud", required=True, help="scan file (.ply/.xyz/.txt)")
    p.add_argument("--landmarks", required=True,
                   help="JSON with named landmark points")
    p.add_argument("--init", help="initial pose JSON (default: neutral)")
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--max-iter", type=int, default=150)
    p.add_argument("--out", help="fit result JSON (default: stdout)")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("build-fixtures", help="rib tubes for a generated body")
    p.add_argument("--body", required=True, help="body_params JSON")
    p.add_argument("--config", help="session JSON supplying tube parameters")
    p.add_argument("--out", required=True, help=".obj (named tubes) or .json")
    p.add_argument("--sidecar", help="also write curve data JSON next to the OBJ")
    p.set_defaults(func=_cmd_build_fixtures)

    p = sub.add_parser("export-mesh", help="write skin or fixture mesh")
    p.add_argument("--body", help="body_params JSON")
    p.add_argument("--config", help="session JSON")
    p.add_argument("--what", choices=("skin", "fixtures"), default="skin")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_mesh)

    p = sub.add_parser("replay", help="run a scripted exam, write log + metrics")
    p.add_argument("--config", help="session JSON")
    p.add_argument("--operator", help="scripted operator JSON")
    p.add_argument("--vf", choices=("on", "off"), default="on")
    p.add_argument("--seed", type=int, help="override the operator seed")
    p.add_argument("--out", help="frame log (JSON-lines)")
    p.add_argument("--metrics", help="metrics JSON (default: stdout)")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("analyze", help="metrics + plot series from a log")
    p.add_argument("--log", required=True, help="frame log (JSON-lines)")
    p.add_argument("--out", help="analysis JSON (default: stdout)")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("serve", help="live session endpoint (WebSocket)")
    p.add_argument("--config", help="session JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--frame-rate", type=float, default=60.0)
    p.add_argument("--log", help="full-rate frame log (JSON-lines)")
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:   # noqa: BLE001 - boundary: report and exit nonzero
        _print_error(exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
