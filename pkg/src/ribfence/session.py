"""Scripted-exam session engine: replay, logging, and metric extraction.

A session pairs a generated torso and its rib fixtures with a scripted
operator that visits named exam areas (intercostal skin targets). The
operator emits a leader reference stream with a configurable aiming error;
`run_follower` executes it; every control cycle is logged and the log is
reduced to exam metrics. Paired runs that differ only in the vf flag share
their pre-drawn aiming errors, so metric differences isolate the effect of
constraint filtering.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .body import (FORMAT_VERSION, BodyInstance, PoseParams, ShapeParams,
                   generate_body)
from .follower import (ContactModel, FollowerConfig, FollowerStep,
                       ImpedanceParams, ProbeState, run_follower)
from .geometry import TriMesh, mesh_closest_point, point_inside
from .ribs import FixtureConfig, FixtureSet, build_all_fixtures, polyval3
from .vf import FilterConfig


class SessionError(ValueError):
    """Invalid session configuration, operator script, or log."""


# exam areas: anterior intercostal windows, upper and lower on each side,
# visited in the order 11-12-14-13 (down the left side, back up the right)
AREA_GAPS = {
    "11": ("left", 2, 3),
    "12": ("left", 3, 4),
    "14": ("right", 3, 4),
    "13": ("right", 2, 3),
}
DEFAULT_WAYPOINTS = ("11", "12", "14", "13")


def _default_follower() -> FollowerConfig:
    # an 8 mm safety ball fits the default torso's intercostal channel with
    # clamp-free dwell margin; wider probes are exercised in the filter's
    # own stress tests
    return FollowerConfig(probe_radius=0.008,
                          vf=FilterConfig(probe_radius=0.008))


@dataclass(frozen=True)
class SessionConfig:
    """Everything needed to rebuild a session deterministically."""

    shape: ShapeParams = field(default_factory=ShapeParams)
    pose: PoseParams = field(default_factory=PoseParams)
    resolution: int = 64
    fixture: FixtureConfig = field(default_factory=FixtureConfig)
    follower: FollowerConfig = field(default_factory=_default_follower)
    seed: int = 0

    def to_doc(self) -> dict:
        f = self.follower
        return {
            "format_version": FORMAT_VERSION,
            "kind": "session",
            "shape": json.loads(self.shape.to_json()),
            "pose": json.loads(self.pose.to_json()),
            "resolution": self.resolution,
            "fixture": {"c_prop": self.fixture.c_prop,
                        "segments": self.fixture.segments,
                        "ring_sides": self.fixture.ring_sides},
            "follower": {
                "impedance": json.loads(f.impedance.to_json()),
                "contact": json.loads(f.contact.to_json()),
                "vf": {"probe_radius": f.vf.probe_radius,
                       "cull_radius": f.vf.cull_radius,
                       "n_max": f.vf.n_max, "tol": f.vf.tol},
                "probe_radius": f.probe_radius,
                "exam_orientation": [float(v) for v in f.exam_orientation],
                "hold_timeout": f.hold_timeout,
                "max_ref_speed": f.max_ref_speed,
            },
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True)

    @classmethod
    def from_doc(cls, doc: dict) -> "SessionConfig":
        if doc.get("format_version") != FORMAT_VERSION:
            raise SessionError(
                f"unsupported format_version {doc.get('format_version')!r}")
        if doc.get("kind") != "session":
            raise SessionError(f"expected kind 'session', got {doc.get('kind')!r}")
        try:
            fd = doc["follower"]
            follower = FollowerConfig(
                impedance=ImpedanceParams.from_json(json.dumps(fd["impedance"])),
                contact=ContactModel.from_json(json.dumps(fd["contact"])),
                vf=FilterConfig(**fd["vf"]),
                probe_radius=fd["probe_radius"],
                exam_orientation=np.asarray(fd["exam_orientation"], dtype=float),
                hold_timeout=fd["hold_timeout"],
                max_ref_speed=fd["max_ref_speed"],
            )
            return cls(shape=ShapeParams.from_json(json.dumps(doc["shape"])),
                       pose=PoseParams.from_json(json.dumps(doc["pose"])),
                       resolution=int(doc["resolution"]),
                       fixture=FixtureConfig(**doc["fixture"]),
                       follower=follower,
                       seed=int(doc["seed"]))
        except (KeyError, TypeError) as exc:
            raise SessionError(f"malformed session config: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "SessionConfig":
        return cls.from_doc(json.loads(text))


@dataclass(frozen=True)
class AreaFrame:
    """Local frame of one intercostal target: on-skin point and tangents."""

    name: str
    target: np.ndarray       # on the skin, centred in the gap
    outward: np.ndarray      # unit skin normal
    toward_rib: np.ndarray   # unit tangent crossing the gap (bias direction)
    along: np.ndarray        # unit tangent along the gap


@dataclass(frozen=True)
class SessionAssets:
    """Prebuilt geometry for a session config (expensive, reusable)."""

    config: SessionConfig
    body: BodyInstance
    fixtures: FixtureSet
    areas: dict  # name -> AreaFrame


def prepare_assets(config: SessionConfig) -> SessionAssets:
    """Generate the torso, build its fixtures, and locate the exam areas."""
    body = generate_body(config.shape, config.pose, resolution=config.resolution)
    fixtures = build_all_fixtures(body, config.fixture)
    tube_by_key = {(t.side, t.index): t for t in fixtures.tubes}
    curve_by_key = {(c.side, c.index): c for c in fixtures.curves}
    areas = {}
    for name, (side, lo, hi) in AREA_GAPS.items():
        try:
            c_lo, c_hi = curve_by_key[(side, lo)], curve_by_key[(side, hi)]
        except KeyError as exc:
            raise SessionError(f"exam area {name} needs rib {side} {exc}") from exc
        p_lo = polyval3(c_lo.central_poly, np.array([0.5]))[0]
        p_hi = polyval3(c_hi.central_poly, np.array([0.5]))[0]
        mid = 0.5 * (p_lo + p_hi)
        _, target, fid = mesh_closest_point(body.skin, mid)
        outward = body.skin.face_normals[fid].copy()
        toward = p_lo - target
        toward -= float(toward @ outward) * outward
        n = float(np.linalg.norm(toward))
        if n < 1e-9:
            raise SessionError(f"exam area {name}: degenerate gap frame")
        toward /= n
        along = np.cross(outward, toward)
        for tube in (tube_by_key[(side, lo)], tube_by_key[(side, hi)]):
            if point_inside(tube.mesh, target):
                raise SessionError(f"exam area {name}: target lies inside "
                                   f"rib_{tube.side}_{tube.index}")
        areas[name] = AreaFrame(name=name, target=target, outward=outward,
                                toward_rib=toward, along=along)
    return SessionAssets(config=config, body=body, fixtures=fixtures, areas=areas)


@dataclass(frozen=True)
class ScriptedOperator:
    """Deterministic stand-in for a human operator.

    Visits `waypoints` in order. Per area it aims at the gap centre plus a
    systematic `lateral_bias` toward the neighbouring rib and a Gaussian
    jitter (pre-drawn from `seed`, so paired runs consume identical error
    draws), presses in, and dwells. Success predicate: contact force of at
    least `min_force` while the probe stays within `patch_radius` of the
    true gap centre, held continuously for `dwell_time`. A press that never
    yields valid contact triggers the correction maneuver — back off along
    the skin normal, re-aim at the true centre, re-approach — up to
    `max_corrections` times before the area is recorded as failed.
    """

    waypoints: tuple = DEFAULT_WAYPOINTS
    approach_speed: float = 0.2    # m/s commanded reference speed
    lateral_bias: float = 0.0      # systematic first-attempt error, metres
    jitter_sigma: float = 0.0      # per-attempt aim noise, metres
    dwell_time: float = 1.0        # continuous valid contact required, seconds
    patch_radius: float = 0.008    # acceptance radius around the gap centre
    min_force: float = 0.5         # newtons
    press_depth: float = 0.004     # commanded indentation below the skin
    hover_height: float = 0.03     # standoff for approach and retreat
    ref_period: float = 0.02       # leader reference cadence, seconds
    contact_timeout: float = 1.5   # press arrival -> first contact
    assess_timeout: float = 1.5    # contact -> validity before correcting
    max_corrections: int = 2
    area_timeout: float = 12.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if not self.waypoints:
            raise SessionError("operator needs at least one waypoint")
        unknown = [w for w in self.waypoints if w not in AREA_GAPS]
        if unknown:
            raise SessionError(f"unknown exam areas: {unknown}")
        if self.jitter_sigma < 0.0:
            raise SessionError("jitter_sigma must be >= 0")
        if self.max_corrections < 0:
            raise SessionError("max_corrections must be >= 0")
        for fname in ("approach_speed", "dwell_time", "patch_radius",
                      "min_force", "press_depth", "hover_height", "ref_period",
                      "contact_timeout", "assess_timeout", "area_timeout"):
            if not getattr(self, fname) > 0.0:
                raise SessionError(f"{fname} must be > 0")

    def to_doc(self) -> dict:
        return {"waypoints": list(self.waypoints),
                "approach_speed": self.approach_speed,
                "lateral_bias": self.lateral_bias,
                "jitter_sigma": self.jitter_sigma,
                "dwell_time": self.dwell_time,
                "patch_radius": self.patch_radius,
                "min_force": self.min_force,
                "press_depth": self.press_depth,
                "hover_height": self.hover_height,
                "ref_period": self.ref_period,
                "contact_timeout": self.contact_timeout,
                "assess_timeout": self.assess_timeout,
                "max_corrections": self.max_corrections,
                "area_timeout": self.area_timeout,
                "seed": self.seed}

    @classmethod
    def from_doc(cls, doc: dict) -> "ScriptedOperator":
        doc = dict(doc)
        try:
            doc["waypoints"] = tuple(doc["waypoints"])
            return cls(**doc)
        except (TypeError, KeyError) as exc:
            raise SessionError(f"malformed operator: {exc}") from exc


@dataclass(frozen=True)
class SessionFrame:
    """One logged control cycle."""

    t: float
    leader: np.ndarray
    filtered: np.ndarray
    probe: np.ndarray
    force: np.ndarray
    torque: np.ndarray
    n_active: int
    clamped: bool


@dataclass(frozen=True)
class ExamMetrics:
    """Reduction of one replay log."""

    per_area_time: dict      # area name -> seconds from approach to verdict
    per_area_valid: dict     # area name -> bool (dwell criterion met)
    total_duration: float
    transit_time: float      # total minus the per-area times
    clamp_events: int        # rising edges of the clamped flag
    max_force_on_fixture: float   # largest |force| while clamped (0 if never)
    path_length: float       # metres travelled by the probe


@dataclass(frozen=True)
class SessionLog:
    header: dict
    frames: list
    events: list


@dataclass(frozen=True)
class AnalyzeResult:
    metrics: ExamMetrics
    series: dict
    partial: bool


# ---------------------------------------------------------------------------
# scripted operator runtime
# ---------------------------------------------------------------------------

_TRANSIT, _PRESS, _DWELL, _RETREAT = "transit", "press", "dwell", "retreat"


class _OperatorDriver:
    """State machine turning a ScriptedOperator into a reference stream.

    `reference_stream` advances the commanded reference every ref_period;
    `observe` consumes each simulated frame and drives phase transitions.
    All randomness is pre-drawn, so two runs that evolve differently still
    consume identical error draws.
    """

    def __init__(self, op: ScriptedOperator, areas: dict, frame_period: float,
                 skin: TriMesh | None = None):
        self.op = op
        self.areas = [areas[name] for name in op.waypoints]
        self.frame_period = frame_period
        self.skin = skin
        rng = np.random.default_rng(op.seed)
        self.draws = rng.normal(0.0, op.jitter_sigma,
                                size=(len(self.areas), op.max_corrections + 1, 2))
        self.idx = 0
        self.attempt = 0
        self.phase = _TRANSIT
        self.phase_entry_t = 0.0
        self.area_entry_t = None   # stamped when the first approach completes
        self.press_arrival_t = None
        self.dwell_frames = 0
        self.finished = False
        self.events = []
        self._retreat_target = None
        first = self._aim_point()
        self.start = first + (op.hover_height + 0.05) * self.areas[0].outward
        self.ref = self.start.copy()

    # -- geometry -----------------------------------------------------------
    def _aim_point(self) -> np.ndarray:
        a = self.areas[self.idx]
        jit = self.draws[self.idx, self.attempt]
        bias = self.op.lateral_bias if self.attempt == 0 else 0.0
        return a.target + (bias + jit[0]) * a.toward_rib + jit[1] * a.along

    def _hover(self) -> np.ndarray:
        return self._aim_point() + self.op.hover_height * self.areas[self.idx].outward

    def _press_target(self) -> np.ndarray:
        return self._aim_point() - self.op.press_depth * self.areas[self.idx].outward

    def _phase_target(self) -> np.ndarray:
        if self.phase == _TRANSIT:
            return self._hover()
        if self.phase == _PRESS:
            return self._press_target()
        if self.phase == _RETREAT:
            return self._retreat_target
        return self.ref  # dwell: hold position

    def _outward_at(self, p: np.ndarray):
        """(unit outward direction, signed clearance, skin point) at `p`."""
        dist, cp, face = mesh_closest_point(self.skin, p)
        n = p - cp
        nn = float(np.linalg.norm(n))
        fn = self.skin.face_normals[face]
        if nn < 1e-12:
            return fn, 0.0, cp
        if float(n @ fn) < 0.0:
            return fn, -dist, cp
        return n / nn, dist, cp

    def _transit_step(self, delta: np.ndarray, dist: float,
                      step: float) -> np.ndarray:
        """One reference step toward the next hover, held at standoff height.

        A straight step is taken when it keeps hover_height of skin
        clearance. When the goal lies behind the body's horizon (opposite
        flank), the step is redirected along the surface tangent and the
        result re-projected onto the standoff shell, so the reference crawls
        around the torso instead of cutting through it.
        """
        h = self.op.hover_height
        cand = self.ref + delta * (step / dist)
        out, clear, cp = self._outward_at(cand)
        if clear >= h * (1.0 - 1e-6):
            return cand
        n, _, _ = self._outward_at(self.ref)
        tang = delta - float(delta @ n) * n
        tn = float(np.linalg.norm(tang))
        if tn < 1e-12:               # goal exactly through the body: pick a
            tang = np.cross(n, delta / dist)   # deterministic circumnavigation
            tn = float(np.linalg.norm(tang))
        if tn < 1e-12:
            for axis in np.eye(3):
                tang = np.cross(n, axis)
                tn = float(np.linalg.norm(tang))
                if tn > 1e-6:
                    break
        cand = self.ref + tang * (step / tn)
        out, clear, cp = self._outward_at(cand)
        return cp + h * out

    # -- reference stream (pulled by run_follower) ----------------------------
    def reference_stream(self):
        t = 0.0
        while not self.finished:
            t += self.op.ref_period
            step = self.op.approach_speed * self.op.ref_period
            target = self._phase_target()
            delta = target - self.ref
            dist = float(np.linalg.norm(delta))
            if dist <= step:
                self.ref = target.copy()
            elif self.phase == _TRANSIT and self.skin is not None:
                self.ref = self._transit_step(delta, dist, step)
            else:
                self.ref = self.ref + delta * (step / dist)
            yield (t, self.ref.copy())

    # -- phase machine (driven by simulated frames) ---------------------------
    def _enter(self, phase: str, t: float):
        self.phase = phase
        self.phase_entry_t = t
        self.press_arrival_t = None
        if phase != _DWELL:
            self.dwell_frames = 0

    def _event(self, t: float, kind: str):
        self.events.append({"t": round(t, 9), "event": kind,
                            "area": self.op.waypoints[self.idx],
                            "attempt": self.attempt})

    def _advance_area(self, t: float, valid: bool):
        self._event(t, "area_valid" if valid else "area_failed")
        prev = self.areas[self.idx]
        self.idx += 1
        self.attempt = 0
        self.area_entry_t = None
        if self.idx >= len(self.areas):
            self.finished = True
            self.events.append({"t": round(t, 9), "event": "exam_complete"})
        else:
            # lift off the previous area before moving laterally, so the
            # probe crosses ribs at standoff height rather than through skin
            self._retreat_target = self._standoff_above(self.ref, prev.outward)
            self._enter(_RETREAT, t)

    def _begin_correction(self, t: float):
        if self.attempt >= self.op.max_corrections:
            self._advance_area(t, valid=False)
            return
        self.attempt += 1
        self._event(t, "correction")
        outward = self.areas[self.idx].outward
        self._retreat_target = self._standoff_above(self.ref, outward)
        self._enter(_RETREAT, t)

    def _standoff_above(self, p: np.ndarray, outward: np.ndarray) -> np.ndarray:
        """The point hover_height above the skin nearest `p`."""
        if self.skin is None:
            return p + self.op.hover_height * outward
        out, _, cp = self._outward_at(p)
        return cp + self.op.hover_height * out

    def observe(self, step: FollowerStep):
        if self.finished:
            return
        t = step.t
        op = self.op
        a = self.areas[self.idx]

        # validity accounting runs whenever the probe could be pressing
        if self.phase in (_PRESS, _DWELL):
            force = float(np.linalg.norm(step.state.force))
            in_patch = (float(np.linalg.norm(step.state.position - a.target))
                        <= op.patch_radius)
            if force >= op.min_force and in_patch:
                self.dwell_frames += 1
            else:
                self.dwell_frames = 0
            if self.dwell_frames * self.frame_period >= op.dwell_time:
                self._advance_area(t, valid=True)
                return

        at_target = float(np.linalg.norm(self.ref - self._phase_target())) < 1e-9

        if self.phase == _TRANSIT and at_target:
            if self.area_entry_t is None:
                self.area_entry_t = t
                self._event(t, "area_start")
            self._enter(_PRESS, t)
        elif self.phase == _PRESS:
            if at_target and self.press_arrival_t is None:
                self.press_arrival_t = t
            # the commanded press must complete before the assessment clock
            # starts: freezing the reference at first touch would strand a
            # constrained slide halfway to the target
            if at_target and float(np.linalg.norm(step.state.force)) >= op.min_force:
                self._enter(_DWELL, t)
            elif (self.press_arrival_t is not None
                  and t - self.press_arrival_t > op.contact_timeout):
                self._begin_correction(t)
        elif self.phase == _DWELL:
            if t - self.phase_entry_t > op.assess_timeout:
                self._begin_correction(t)
        elif self.phase == _RETREAT and at_target:
            self._enter(_TRANSIT, t)

        if (self.area_entry_t is not None
                and t - self.area_entry_t > op.area_timeout):
            self._advance_area(t, valid=False)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def run_replay(config: SessionConfig, operator: ScriptedOperator,
               vf_enabled: bool, assets: SessionAssets | None = None):
    """Execute one scripted exam; returns (ExamMetrics, SessionLog).

    With `vf_enabled` False the constraint filter is bypassed (the fixtures
    still exist for post-hoc audits). A failed area is recorded and the run
    continues with the next one.
    """
    if assets is None:
        assets = prepare_assets(config)
    elif assets.config.to_json() != config.to_json():
        raise SessionError("assets were prepared for a different config")
    period = config.follower.impedance.period
    driver = _OperatorDriver(operator, assets.areas, period,
                             skin=assets.body.skin)
    fixture = assets.fixtures.mesh if vf_enabled else None
    start = ProbeState.at_rest(driver.start)
    duration = len(operator.waypoints) * (operator.area_timeout + 10.0)

    frames = []
    for step in run_follower(assets.body.skin, fixture, config.follower,
                             driver.reference_stream(), duration, start):
        frames.append(SessionFrame(
            t=step.t, leader=step.leader_ref, filtered=step.filtered_ref,
            probe=step.state.position, force=step.state.force,
            torque=step.state.torque, n_active=step.n_active,
            clamped=step.clamped))
        driver.observe(step)
        if driver.finished:
            break
    if not driver.finished:
        driver.events.append({"t": round(frames[-1].t, 9),
                              "event": "exam_complete", "timed_out": True})

    header = {
        "kind": "session_log",
        "format_version": FORMAT_VERSION,
        "config": config.to_doc(),
        "operator": operator.to_doc(),
        "vf_enabled": bool(vf_enabled),
        "areas": {name: [float(v) for v in frame.target]
                  for name, frame in assets.areas.items()},
    }
    log = SessionLog(header=header, frames=frames, events=driver.events)
    return derive_metrics(log), log


def derive_metrics(log: SessionLog) -> ExamMetrics:
    """Reduce a log (in-memory or read back) to exam metrics."""
    frames, events = log.frames, log.events
    per_time, per_valid = {}, {}
    starts = {}
    total = frames[-1].t if frames else 0.0
    for ev in events:
        area = ev.get("area")
        if ev["event"] == "area_start":
            starts[area] = ev["t"]
        elif ev["event"] in ("area_valid", "area_failed"):
            per_time[area] = ev["t"] - starts.get(area, ev["t"])
            per_valid[area] = ev["event"] == "area_valid"
        elif ev["event"] == "exam_complete":
            total = ev["t"]
    # an area still open at truncation counts its elapsed time, not valid
    for area, t0 in starts.items():
        if area not in per_time:
            per_time[area] = total - t0
            per_valid[area] = False
    transit = total - sum(per_time.values())
    clamp_events = 0
    prev_clamped = False
    max_force = 0.0
    path = 0.0
    last_pos = None
    for fr in frames:
        if fr.clamped and not prev_clamped:
            clamp_events += 1
        prev_clamped = fr.clamped
        if fr.clamped:
            max_force = max(max_force, float(np.linalg.norm(fr.force)))
        if last_pos is not None:
            path += float(np.linalg.norm(fr.probe - last_pos))
        last_pos = fr.probe
    return ExamMetrics(per_area_time=per_time, per_area_valid=per_valid,
                       total_duration=total, transit_time=transit,
                       clamp_events=clamp_events,
                       max_force_on_fixture=max_force, path_length=path)


def metrics_doc(m: ExamMetrics) -> dict:
    """JSON-ready view of ExamMetrics."""
    return {"per_area_time": {k: float(v) for k, v in m.per_area_time.items()},
            "per_area_valid": {k: bool(v) for k, v in m.per_area_valid.items()},
            "total_duration": float(m.total_duration),
            "transit_time": float(m.transit_time),
            "clamp_events": int(m.clamp_events),
            "max_force_on_fixture": float(m.max_force_on_fixture),
            "path_length": float(m.path_length)}


# ---------------------------------------------------------------------------
# JSON-lines log I/O and analysis
# ---------------------------------------------------------------------------

def _vec(v) -> list:
    return [float(x) for x in v]


def frame_doc(fr: SessionFrame) -> dict:
    """JSON-ready record of one logged control cycle."""
    return {"type": "frame", "t": round(fr.t, 9),
            "leader": _vec(fr.leader), "filtered": _vec(fr.filtered),
            "probe": _vec(fr.probe), "force": _vec(fr.force),
            "torque": _vec(fr.torque), "n_active": int(fr.n_active),
            "clamped": bool(fr.clamped)}


def _log_lines(log: SessionLog):
    """Serialize a log: header, then frames and events merged by time."""
    yield json.dumps(log.header, sort_keys=True)
    pending = list(log.events)
    for fr in log.frames:
        yield json.dumps(frame_doc(fr), sort_keys=True)
        while pending and pending[0]["t"] <= fr.t + 1e-12:
            yield json.dumps({"type": "event", **pending.pop(0)}, sort_keys=True)
    for ev in pending:
        yield json.dumps({"type": "event", **ev}, sort_keys=True)


def log_to_text(log: SessionLog) -> str:
    return "\n".join(_log_lines(log)) + "\n"


def write_log(path, log: SessionLog) -> None:
    """Write a session log as JSON-lines (full control rate)."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in _log_lines(log):
            fh.write(line + "\n")


def read_log(path):
    """Read a JSON-lines log; returns (SessionLog, partial_flag).

    A truncated tail (half-written line, or a log that never reached
    exam_complete) is tolerated and flagged rather than rejected.
    """
    header = None
    frames, events = [], []
    partial = False
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError:
                partial = True
                break
            if header is None:
                if doc.get("kind") != "session_log":
                    raise SessionError("not a session log (missing header)")
                if doc.get("format_version") != FORMAT_VERSION:
                    raise SessionError(
                        f"unsupported format_version {doc.get('format_version')!r}")
                header = doc
            elif doc.get("type") == "frame":
                frames.append(SessionFrame(
                    t=float(doc["t"]), leader=np.array(doc["leader"]),
                    filtered=np.array(doc["filtered"]),
                    probe=np.array(doc["probe"]), force=np.array(doc["force"]),
                    torque=np.array(doc["torque"]),
                    n_active=int(doc["n_active"]), clamped=bool(doc["clamped"])))
            elif doc.get("type") == "event":
                events.append({k: v for k, v in doc.items() if k != "type"})
            else:
                raise SessionError(f"unknown log record: {doc.get('type')!r}")
    if header is None:
        raise SessionError("empty log")
    if not any(ev.get("event") == "exam_complete" for ev in events):
        partial = True
    return SessionLog(header=header, frames=frames, events=events), partial


def analyze(path) -> AnalyzeResult:
    """Reduce a log file to metrics plus plot-ready series."""
    log, partial = read_log(path)
    metrics = derive_metrics(log)
    frames = log.frames
    series = {
        "t": [fr.t for fr in frames],
        "probe": [_vec(fr.probe) for fr in frames],
        "filtered": [_vec(fr.filtered) for fr in frames],
        "leader": [_vec(fr.leader) for fr in frames],
        "force_norm": [float(np.linalg.norm(fr.force)) for fr in frames],
        "n_active": [int(fr.n_active) for fr in frames],
        "clamped": [bool(fr.clamped) for fr in frames],
    }
    return AnalyzeResult(metrics=metrics, series=series, partial=partial)


def min_fixture_distance(frames, fixture_mesh: TriMesh,
                         which: str = "filtered") -> float:
    """Safety audit: smallest distance from a logged point series to the
    fixture mesh (unsigned; use with a containment check if needed)."""
    best = math.inf
    for fr in frames:
        best = min(best, float(mesh_closest_point(fixture_mesh, getattr(fr, which))[0]))
    return best
