"""Live session endpoint: a WebSocket bridge between the follower loop and
browser clients.

One follower loop runs per server, paced against the wall clock at the
configured control period. Clients connect to receive `scene_init` (meshes +
config) and a decimated stream of `state_frame` messages; the first client to
send a `reference_update` becomes the driver (everyone else is read-only) and
steers the leader reference live. The endpoint conflates state snapshots and
never blocks the simulation; the full-rate JSON-lines log — when a path is
given — remains the source of truth.

Wire protocol (JSON text messages, all geometry in metres):

    server -> client:  scene_init, state_frame, error
    client -> server:  reference_update {position}, mode_set {vf | reset}

Every message carries ``protocol_version``; mismatches are answered with an
error frame and the message is ignored.
"""
from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import dataclass

import numpy as np

from .body import FORMAT_VERSION
from .follower import FollowerLoop, FollowerStep, ProbeState
from .geometry import mesh_closest_point
from .session import (SessionAssets, SessionConfig, SessionError, SessionFrame,
                      frame_doc, prepare_assets)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
START_AREA = "11"          # initial probe pose: standoff above this area
START_STANDOFF = 0.03      # metres above the skin
MIN_FRAME_RATE = 30.0      # spec floor for the decimated state stream


class ServeError(SessionError):
    """Invalid server configuration."""


def _error_doc(code: str, detail: str) -> str:
    return json.dumps({"type": "error", "protocol_version": PROTOCOL_VERSION,
                       "code": code, "detail": detail})


def _round3(v, nd=6):
    return [round(float(x), nd) for x in v]


def _mesh_doc(mesh, nd=6) -> dict:
    return {"vertices": [_round3(v, nd) for v in mesh.vertices],
            "faces": [[int(i) for i in f] for f in mesh.faces]}


@dataclass(frozen=True)
class ServerOptions:
    host: str = "127.0.0.1"
    port: int = 8765               # 0 = ephemeral (tests)
    frame_rate: float = 60.0       # state_frame stream, Hz (floor 30)
    log_path: str | None = None    # full-rate JSON-lines log
    max_batch: int = 32            # control cycles per scheduler wake
    slip_limit: float = 0.5        # seconds of sim lag before the clock slips

    def __post_init__(self):
        if self.frame_rate < MIN_FRAME_RATE:
            raise ServeError(f"frame_rate must be >= {MIN_FRAME_RATE} Hz")
        if self.max_batch < 1:
            raise ServeError("max_batch must be >= 1")
        if self.slip_limit <= 0.0:
            raise ServeError("slip_limit must be > 0")


class SessionServer:
    """One live follower loop exposed over a WebSocket endpoint."""

    def __init__(self, config: SessionConfig,
                 options: ServerOptions = ServerOptions(),
                 assets: SessionAssets | None = None):
        if assets is None:
            assets = prepare_assets(config)
        elif assets.config.to_json() != config.to_json():
            raise ServeError("assets were prepared for a different config")
        self.config = config
        self.options = options
        self.assets = assets
        area = assets.areas[START_AREA]
        self._start_state = ProbeState.at_rest(
            area.target + START_STANDOFF * area.outward)
        self.loop = FollowerLoop(assets.body.skin, assets.fixtures.mesh,
                                 config.follower, self._start_state)
        self.vf_enabled = True
        self.period = config.follower.impedance.period
        self.steps = 0
        self.clients: set = set()
        self.driver = None
        self.latest: FollowerStep | None = None
        self.port: int | None = None
        self._server = None
        self._tasks: list = []
        self._log_fh = None
        self._scene_init = self._build_scene_init()

    # ------------------------------------------------------------------ sim
    @property
    def sim_time(self) -> float:
        return self.steps * self.period

    def _build_scene_init(self) -> str:
        fixtures = [{"name": f"rib_{t.side}_{t.index}", **_mesh_doc(t.mesh)}
                    for t in self.assets.fixtures.tubes]
        doc = {
            "type": "scene_init",
            "protocol_version": PROTOCOL_VERSION,
            "format_version": FORMAT_VERSION,
            "config": self.config.to_doc(),
            "probe_radius": self.config.follower.probe_radius,
            "frame_rate": self.options.frame_rate,
            "skin": _mesh_doc(self.assets.body.skin),
            "fixtures": fixtures,
            "areas": {name: _round3(a.target)
                      for name, a in self.assets.areas.items()},
            "initial": {"position": _round3(self._start_state.position)},
        }
        return json.dumps(doc)

    def _state_frame_doc(self, step: FollowerStep) -> str:
        return json.dumps({
            "type": "state_frame",
            "protocol_version": PROTOCOL_VERSION,
            "t": round(step.t, 9),
            "leader": _round3(step.leader_ref, 9),
            "filtered": _round3(step.filtered_ref, 9),
            "probe": _round3(step.state.position, 9),
            "force": _round3(step.state.force, 9),
            "torque": _round3(step.state.torque, 9),
            "n_active": int(step.n_active),
            "clamped": bool(step.clamped),
            "holding": bool(step.holding),
            "vf_enabled": self.vf_enabled,
            "driver_connected": self.driver is not None,
        })

    def _log_event(self, kind: str, **extra) -> None:
        if self._log_fh is None:
            return
        doc = {"type": "event", "t": round(self.sim_time, 9), "event": kind}
        doc.update(extra)
        self._log_fh.write(json.dumps(doc, sort_keys=True) + "\n")

    def _log_frame(self, step: FollowerStep) -> None:
        if self._log_fh is None:
            return
        fr = SessionFrame(t=step.t, leader=step.leader_ref,
                          filtered=step.filtered_ref,
                          probe=step.state.position, force=step.state.force,
                          torque=step.state.torque, n_active=step.n_active,
                          clamped=step.clamped)
        self._log_fh.write(json.dumps(frame_doc(fr), sort_keys=True) + "\n")

    def _advance(self, n: int) -> None:
        """Run `n` control cycles synchronously (scheduler-bounded)."""
        for _ in range(n):
            self.steps += 1
            try:
                step = self.loop.step(self.sim_time)
            except SessionError:
                raise
            except Exception as exc:     # filter fault: drop to vf-off, warn
                log.warning("follower cycle failed (%s); disabling fixtures",
                            exc)
                self.loop.fixture = None
                self.vf_enabled = False
                self._log_event("vf_fault", detail=str(exc))
                self._broadcast(_error_doc("vf_fault", str(exc)))
                step = self.loop.step(self.sim_time)
            self.latest = step
            self._log_frame(step)

    async def _sim_task(self) -> None:
        origin = time.monotonic()
        while True:
            due = int((time.monotonic() - origin) / self.period)
            behind = due - self.steps
            if behind > self.options.slip_limit / self.period:
                # the sim cannot catch up (heavy contact, slow host): slip
                # the clock instead of spiralling into an ever-longer batch
                origin += (behind * self.period) - self.options.slip_limit
                behind = int(self.options.slip_limit / self.period)
            if behind > 0:
                self._advance(min(behind, self.options.max_batch))
            await asyncio.sleep(self.period)

    async def _broadcast_task(self) -> None:
        from websockets.asyncio.server import broadcast
        interval = 1.0 / self.options.frame_rate
        last_sent = -1
        while True:
            if self.latest is not None and self.steps != last_sent:
                last_sent = self.steps
                broadcast(self.clients, self._state_frame_doc(self.latest))
            await asyncio.sleep(interval)

    def _broadcast(self, message: str) -> None:
        from websockets.asyncio.server import broadcast
        broadcast(self.clients, message)

    # ------------------------------------------------------------- protocol
    def _snap_reference_clear(self) -> None:
        """Re-enabling fixtures with the reference inside the shell: hoist it
        to the offset surface so the next filter cycle starts feasible."""
        r = self.config.follower.vf.probe_radius
        mesh = self.assets.fixtures.mesh
        x = self.loop.x_f
        dist, cp, face = mesh_closest_point(mesh, x)
        if dist >= r:
            return
        n = x - cp
        nn = float(np.linalg.norm(n))
        if nn < 1e-12:
            n, nn = mesh.face_normals[face], 1.0
        if float(n @ mesh.face_normals[face]) < 0.0:
            n = -n               # centre buried: push out through the surface
        self.loop.x_f = cp + (r / nn) * n

    def _handle_reference(self, ws, doc) -> None:
        if self.driver is None:
            self.driver = ws
            self._log_event("driver_joined")
        if ws is not self.driver:
            raise _ProtocolError("read_only",
                                 "another client is already driving")
        pos = doc.get("position")
        if (not isinstance(pos, (list, tuple)) or len(pos) != 3
                or not all(isinstance(v, (int, float)) for v in pos)):
            raise _ProtocolError("bad_reference",
                                 "position must be [x, y, z] in metres")
        ref = np.array([float(v) for v in pos])
        if not np.all(np.isfinite(ref)):
            raise _ProtocolError("bad_reference", "position must be finite")
        self.loop.feed(self.sim_time, ref)

    def _handle_mode(self, ws, doc) -> None:
        if self.driver is None:
            self.driver = ws
            self._log_event("driver_joined")
        if ws is not self.driver:
            raise _ProtocolError("read_only",
                                 "another client is already driving")
        if "vf" in doc:
            enable = doc["vf"]
            if not isinstance(enable, bool):
                raise _ProtocolError("bad_mode", "vf must be a boolean")
            if enable and not self.vf_enabled:
                self._snap_reference_clear()
                self.loop.fixture = self.assets.fixtures.mesh
            elif not enable:
                self.loop.fixture = None
            self.vf_enabled = enable
            self._log_event("mode_set", vf=enable)
        if doc.get("reset"):
            self.loop.reset(self._start_state, self.sim_time)
            self._log_event("reset")
        if "vf" not in doc and not doc.get("reset"):
            raise _ProtocolError("bad_mode", "mode_set needs vf and/or reset")

    def _handle_message(self, ws, raw) -> None:
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise _ProtocolError("bad_json", str(exc)) from exc
        if not isinstance(doc, dict):
            raise _ProtocolError("bad_json", "message must be an object")
        if doc.get("protocol_version") != PROTOCOL_VERSION:
            raise _ProtocolError(
                "protocol_version",
                f"server speaks protocol_version {PROTOCOL_VERSION}")
        kind = doc.get("type")
        if kind == "reference_update":
            self._handle_reference(ws, doc)
        elif kind == "mode_set":
            self._handle_mode(ws, doc)
        else:
            raise _ProtocolError("unknown_type", f"unknown type {kind!r}")

    async def _handler(self, ws) -> None:
        self.clients.add(ws)
        try:
            await ws.send(self._scene_init)
            async for raw in ws:
                try:
                    self._handle_message(ws, raw)
                except _ProtocolError as exc:
                    await ws.send(_error_doc(exc.code, exc.detail))
        finally:
            self.clients.discard(ws)
            if ws is self.driver:
                # the hold rule freezes the reference hold_timeout (100 ms)
                # after the last update; nothing else to do here
                self.driver = None
                self._log_event("driver_disconnected")

    # ------------------------------------------------------------ lifecycle
    async def start(self) -> None:
        from websockets.asyncio.server import serve
        if self.options.log_path is not None:
            self._log_fh = open(self.options.log_path, "w", encoding="utf-8")
            header = {"kind": "session_log", "format_version": FORMAT_VERSION,
                      "config": self.config.to_doc(), "live": True,
                      "vf_enabled": True,
                      "areas": {n: [float(v) for v in a.target]
                                for n, a in self.assets.areas.items()}}
            self._log_fh.write(json.dumps(header, sort_keys=True) + "\n")
        self._server = await serve(self._handler, self.options.host,
                                   self.options.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._tasks = [asyncio.create_task(self._sim_task()),
                       asyncio.create_task(self._broadcast_task())]
        for task in self._tasks:
            task.add_done_callback(_log_task_failure)

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass
        self._tasks = []
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        if self._log_fh is not None:
            self._log_event("exam_complete")
            self._log_fh.close()
            self._log_fh = None

    async def run_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Future()
        finally:
            await self.stop()


class _ProtocolError(Exception):
    def __init__(self, code: str, detail: str):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}")


def _log_task_failure(task: asyncio.Task) -> None:
    if task.cancelled():
        return
    exc = task.exception()
    if exc is not None:
        log.error("server task %s failed", task.get_name(), exc_info=exc)


def serve_session(config: SessionConfig, options: ServerOptions = ServerOptions(),
                  assets: SessionAssets | None = None) -> None:
    """Blocking entry point: run a live session until interrupted."""
    server = SessionServer(config, options, assets=assets)
    try:
        asyncio.run(server.run_forever())
    except KeyboardInterrupt:
        pass
