"""Virtual follower robot: Cartesian impedance tracking with skin contact.

The translational closed loop  Λ x̃'' + D x̃' + K x̃ = F_ext  (x̃ = x − x_d)
is advanced by the exact matrix exponential of its state-space form under a
zero-order hold on x_d and F_ext, so free-space trajectories reproduce the
continuous-time solution at the sample instants to machine precision.
Orientation tracks a fixed exam orientation through first-order smoothing
with the rotational stiffness as bandwidth. Contact against the skin is a
penalty law: linear spring + normal damping + Coulomb-capped viscous
friction at the closest surface point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation, Slerp

from .body import FORMAT_VERSION, _check_doc
from .geometry import TriMesh, as_vec3, mesh_closest_point
from .vf import FilterConfig, filter_step

_MAX_PERIOD = 0.002
_HOLD_TIMEOUT = 0.1


class FollowerError(ValueError):
    pass


class IntegrationFaultError(FollowerError):
    """The tracking error grew far beyond the commanded magnitude in one step."""


def _frozen_array(obj, name, value, shape):
    arr = np.asarray(value, dtype=np.float64).reshape(shape).copy()
    if not np.all(np.isfinite(arr)):
        raise FollowerError(f"{name} must be finite")
    arr.setflags(write=False)
    object.__setattr__(obj, name, arr)
    return arr


def _default_stiffness():
    return np.array([1000.0, 1000.0, 1000.0, 20.0, 20.0, 20.0])


@dataclass(frozen=True)
class ImpedanceParams:
    """Diagonal 6-axis gains; entries 0-2 translate, 3-5 rotate."""

    stiffness: np.ndarray = field(default_factory=_default_stiffness)
    damping: np.ndarray | None = None      # default: 2*sqrt(K) per axis
    inertia: np.ndarray | None = None      # 3x3 translational, default 1 kg
    period: float = 0.001

    def __post_init__(self):
        k = _frozen_array(self, "stiffness", self.stiffness, (6,))
        if np.any(k <= 0.0):
            raise FollowerError("stiffness entries must be > 0")
        d = self.damping if self.damping is not None else 2.0 * np.sqrt(k)
        d = _frozen_array(self, "damping", d, (6,))
        if np.any(d <= 0.0):
            raise FollowerError("damping entries must be > 0")
        lam = self.inertia if self.inertia is not None else np.eye(3)
        lam = _frozen_array(self, "inertia", lam, (3, 3))
        if (np.abs(lam - lam.T).max() > 1e-12
                or np.any(np.linalg.eigvalsh(lam) <= 0.0)):
            raise FollowerError("inertia must be symmetric positive definite")
        if not 0.0 < self.period <= _MAX_PERIOD:
            raise FollowerError(f"control period must be in (0, {_MAX_PERIOD}] s")

    def propagator(self) -> np.ndarray:
        """Exact one-period transition matrix for [x̃, x̃'] (6x6, cached)."""
        cached = self.__dict__.get("_phi")
        if cached is None:
            inv = np.linalg.inv(self.inertia)
            a = np.zeros((6, 6))
            a[:3, 3:] = np.eye(3)
            a[3:, :3] = -inv * self.stiffness[:3][None, :]
            a[3:, 3:] = -inv * self.damping[:3][None, :]
            cached = expm(a * self.period)
            object.__setattr__(self, "_phi", cached)
        return cached

    def to_json(self) -> str:
        return json.dumps({"format_version": FORMAT_VERSION, "kind": "impedance",
                           "fields": {"stiffness": self.stiffness.tolist(),
                                      "damping": self.damping.tolist(),
                                      "inertia": self.inertia.tolist(),
                                      "period": self.period}})

    @classmethod
    def from_json(cls, text: str) -> "ImpedanceParams":
        doc = json.loads(text)
        _check_doc(doc, "impedance")
        f = doc["fields"]
        return cls(stiffness=np.asarray(f["stiffness"]),
                   damping=np.asarray(f["damping"]),
                   inertia=np.asarray(f["inertia"]), period=f["period"])


@dataclass(frozen=True)
class ContactModel:
    k_skin: float = 500.0    # N/m
    damping: float = 5.0     # N*s/m, both normal and tangential-viscous
    mu: float = 0.4

    def __post_init__(self):
        if not (np.isfinite(self.k_skin) and self.k_skin > 0.0):
            raise FollowerError("k_skin must be > 0")
        if not (np.isfinite(self.damping) and self.damping >= 0.0):
            raise FollowerError("contact damping must be >= 0")
        if not (np.isfinite(self.mu) and self.mu >= 0.0):
            raise FollowerError("friction coefficient must be >= 0")

    def to_json(self) -> str:
        return json.dumps({"format_version": FORMAT_VERSION, "kind": "contact",
                           "fields": {"k_skin": self.k_skin,
                                      "damping": self.damping, "mu": self.mu}})

    @classmethod
    def from_json(cls, text: str) -> "ContactModel":
        doc = json.loads(text)
        _check_doc(doc, "contact")
        return cls(**doc["fields"])


_IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ProbeState:
    """End-effector snapshot; orientation is an (x, y, z, w) unit quaternion."""

    position: np.ndarray
    orientation: np.ndarray
    velocity: np.ndarray
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "position", self.position, (3,))
        q = _frozen_array(self, "orientation", self.orientation, (4,))
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise FollowerError("orientation quaternion must have unit norm")
        _frozen_array(self, "velocity", self.velocity, (3,))
        _frozen_array(self, "force", self.force, (3,))
        _frozen_array(self, "torque", self.torque, (3,))

    @classmethod
    def at_rest(cls, position, orientation=None) -> "ProbeState":
        q = _IDENTITY_QUAT if orientation is None else orientation
        z = np.zeros(3)
        return cls(position=position, orientation=q, velocity=z, force=z, torque=z)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def impedance_step(state: ProbeState, x_desired, params: ImpedanceParams,
                   f_ext=None, q_desired=None) -> ProbeState:
    """One exact-discretization step of the translational impedance loop.

    f_ext is the external force on the end effector (N); orientation slews
    toward q_desired (if given) with the rotational stiffness as first-order
    bandwidth.
    """
    x_d = as_vec3(x_desired)
    f = np.zeros(3) if f_ext is None else as_vec3(f_ext)
    if not (np.all(np.isfinite(x_d)) and np.all(np.isfinite(f))):
        raise FollowerError("non-finite impedance inputs")

    k = params.stiffness[:3]
    err0 = state.position - x_d
    eq = f / k  # static spring balance under the held force
    y = np.concatenate([err0 - eq, state.velocity])
    y = params.propagator() @ y
    err1 = y[:3] + eq

    scale = max(float(np.linalg.norm(err0)), float(np.linalg.norm(eq)),
                float(np.linalg.norm(state.velocity)) * params.period, 1e-9)
    grown = float(np.linalg.norm(err1))
    if not np.isfinite(grown) or grown > 10.0 * scale:
        raise IntegrationFaultError(
            f"tracking error grew to {grown:.3g} m from inputs of {scale:.3g} m")

    orientation = state.orientation
    if q_desired is not None:
        q_d = np.asarray(q_desired, dtype=np.float64)
        alpha = 1.0 - np.exp(-float(np.mean(params.stiffness[3:])) * params.period)
        pair = Rotation.from_quat(np.vstack([orientation, q_d]))
        orientation = Slerp([0.0, 1.0], pair)(alpha).as_quat()

    return ProbeState(position=x_d + err1, orientation=orientation,
                      velocity=y[3:], force=state.force, torque=state.torque)


def contact_wrench(state: ProbeState, skin: TriMesh, probe_radius: float,
                   cm: ContactModel):
    """(force, torque) of the skin on a spherical probe tip; zero when clear.

    Indentation uses the signed distance to the skin: a tip centre that has
    sunk below the surface keeps loading (depth = radius + burial) instead
    of popping free once the unsigned distance exceeds the radius.
    """
    dist, cp, face = mesh_closest_point(skin, state.position)
    if dist > 1e-9:
        radial = (state.position - cp) / dist
    else:  # centre on the surface: fall back to the face normal
        radial = skin.face_normals[face]
    if float(radial @ skin.face_normals[face]) < 0.0:
        depth = probe_radius + dist
        normal = -radial
    else:
        depth = probe_radius - dist
        normal = radial
    if depth <= 0.0:
        return np.zeros(3), np.zeros(3)
    v_n = float(state.velocity @ normal)
    f_n = max(cm.k_skin * depth - cm.damping * v_n, 0.0)
    v_t = state.velocity - v_n * normal
    speed_t = float(np.linalg.norm(v_t))
    force = f_n * normal
    if speed_t > 1e-12:
        force -= min(cm.mu * f_n, cm.damping * speed_t) * (v_t / speed_t)
    return force, np.zeros(3)


# ---------------------------------------------------------------------------
# follower loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FollowerConfig:
    impedance: ImpedanceParams = field(default_factory=ImpedanceParams)
    contact: ContactModel = field(default_factory=ContactModel)
    vf: FilterConfig = field(default_factory=FilterConfig)
    probe_radius: float = 0.01
    exam_orientation: np.ndarray = field(default_factory=lambda: _IDENTITY_QUAT)
    hold_timeout: float = _HOLD_TIMEOUT
    max_ref_speed: float = 0.25

    def __post_init__(self):
        q = _frozen_array(self, "exam_orientation", self.exam_orientation, (4,))
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise FollowerError("exam orientation must be a unit quaternion")
        if self.hold_timeout <= 0.0:
            raise FollowerError("hold timeout must be > 0")
        if self.probe_radius <= 0.0:
            raise FollowerError("probe radius must be > 0")
        if self.max_ref_speed <= 0.0:
            raise FollowerError("max reference speed must be > 0")


@dataclass(frozen=True)
class FollowerStep:
    """One control cycle of the follower loop."""

    t: float
    state: ProbeState
    leader_ref: np.ndarray
    filtered_ref: np.ndarray
    clamped: bool
    n_active: int
    holding: bool


class FollowerLoop:
    """Step-wise follower core: one control cycle per `step(t)` call.

    Owns the loop state — probe state, filtered reference, and the latest
    leader reference with its timestamp. The filtered reference walks toward
    the leader at a bounded speed, slides along fixture offset surfaces, and
    the impedance stage tracks it; bounding the walk keeps each filter step
    small so only genuinely reachable faces constrain it. `run_follower`
    wraps this for batch replays; a live endpoint drives it directly,
    feeding references as they arrive and swapping `fixture` between cycles.
    """

    def __init__(self, skin: TriMesh, fixture: TriMesh | None,
                 config: FollowerConfig, start: ProbeState, t0: float = 0.0):
        self.skin = skin
        self.fixture = fixture
        self.config = config
        self.state = start
        self.x_f = start.position.copy()
        self.leader = start.position.copy()
        self.last_ref_t = float(t0)
        self.reach = min(config.max_ref_speed * config.impedance.period,
                         0.5 * (config.vf.cull_radius - config.vf.probe_radius))

    def feed(self, t_ref: float, ref) -> None:
        """Latest leader reference; callers conflate (newest wins)."""
        self.leader = as_vec3(ref)
        self.last_ref_t = float(t_ref)

    def reset(self, start: ProbeState, t: float) -> None:
        """Drop loop state back to `start`; the hold clock restarts at `t`."""
        self.state = start
        self.x_f = start.position.copy()
        self.leader = start.position.copy()
        self.last_ref_t = float(t)

    def step(self, t: float) -> FollowerStep:
        config = self.config
        holding = (t - self.last_ref_t) > config.hold_timeout

        if holding:
            dx = np.zeros(3)
        else:
            dx = self.leader - self.x_f
            step_norm = float(np.linalg.norm(dx))
            if step_norm > self.reach:
                dx = dx * (self.reach / step_norm)
        if self.fixture is None or holding:
            self.x_f = self.x_f + dx
            clamped, n_active = False, 0
        else:
            self.x_f, res = filter_step(self.x_f, self.x_f + dx,
                                        self.fixture, config.vf)
            clamped, n_active = res.clamped, len(res.active)

        force, torque = contact_wrench(self.state, self.skin,
                                       config.probe_radius, config.contact)
        state = impedance_step(self.state, self.x_f, config.impedance,
                               f_ext=force, q_desired=config.exam_orientation)
        self.state = ProbeState(position=state.position,
                                orientation=state.orientation,
                                velocity=state.velocity, force=force,
                                torque=torque)
        return FollowerStep(t=t, state=self.state,
                            leader_ref=self.leader.copy(),
                            filtered_ref=self.x_f.copy(), clamped=clamped,
                            n_active=n_active, holding=holding)


def run_follower(skin: TriMesh, fixture: TriMesh | None, config: FollowerConfig,
                 references, duration: float, start: ProbeState):
    """Generate one FollowerStep per control period for `duration` seconds.

    `references` is an iterable of (timestamp, Vec3) leader references in
    ascending time; each cycle consumes everything that has arrived by the
    cycle's timestamp and keeps only the newest (conflation). A gap longer
    than the hold timeout freezes the filtered reference in place — a pressed
    probe stays pressed, a free probe stays still — until references resume.
    With `fixture` None the constraint filter is bypassed (teleoperation
    without virtual fixtures).
    """
    period = config.impedance.period
    n_steps = int(round(duration / period))
    ref_iter = iter(references)
    pending = next(ref_iter, None)
    loop = FollowerLoop(skin, fixture, config, start)

    for i in range(n_steps):
        t = (i + 1) * period
        while pending is not None and pending[0] <= t:
            loop.feed(pending[0], pending[1])
            pending = next(ref_iter, None)
        yield loop.step(t)
