"""Impedance dynamics, penalty contact, and the follower control loop."""
import json

import numpy as np
import pytest

from ribfence.follower import (
    ContactModel,
    FollowerConfig,
    FollowerError,
    FollowerStep,
    ImpedanceParams,
    IntegrationFaultError,
    ProbeState,
    contact_wrench,
    impedance_step,
    run_follower,
)
from ribfence.geometry import mesh_closest_point, point_inside
from ribfence.vf import FilterConfig

from conftest import make_cube
from oracles import critically_damped_response

_OMEGA = np.sqrt(1000.0)


def _unit_params(**kw):
    return ImpedanceParams(stiffness=np.array([1000.0] * 3 + [20.0] * 3), **kw)


def _simulate_free(params, x0, x_d, steps, v0=None):
    state = ProbeState.at_rest(x0)
    if v0 is not None:
        state = ProbeState(position=x0, orientation=state.orientation,
                           velocity=v0, force=np.zeros(3), torque=np.zeros(3))
    traj = [state]
    for _ in range(steps):
        state = impedance_step(state, x_d, params)
        traj.append(state)
    return traj


class TestImpedanceParams:
    def test_defaults_are_critically_damped(self):
        p = ImpedanceParams()
        assert np.allclose(p.stiffness, [1000, 1000, 1000, 20, 20, 20])
        assert np.allclose(p.damping, 2.0 * np.sqrt(p.stiffness))
        assert np.array_equal(p.inertia, np.eye(3))
        assert p.period == 0.001

    def test_json_round_trip(self):
        p = ImpedanceParams(stiffness=np.arange(1.0, 7.0), period=0.002)
        q = ImpedanceParams.from_json(p.to_json())
        assert np.array_equal(q.stiffness, p.stiffness)
        assert np.array_equal(q.damping, p.damping)
        assert np.array_equal(q.inertia, p.inertia)
        assert q.period == p.period
        assert json.loads(p.to_json())["kind"] == "impedance"

    @pytest.mark.parametrize("kw", [
        {"stiffness": np.array([0.0] + [1.0] * 5)},
        {"damping": np.zeros(6)},
        {"inertia": -np.eye(3)},
        {"inertia": np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]])},
        {"period": 0.003},
        {"period": 0.0},
    ])
    def test_invalid_parameters_rejected(self, kw):
        with pytest.raises(FollowerError):
            ImpedanceParams(**kw)

    def test_contact_model_validation(self):
        ContactModel(k_skin=100.0, damping=0.0, mu=0.0)
        with pytest.raises(FollowerError):
            ContactModel(k_skin=0.0)
        with pytest.raises(FollowerError):
            ContactModel(mu=-0.1)
        c = ContactModel.from_json(ContactModel(k_skin=321.0).to_json())
        assert c.k_skin == 321.0

    def test_probe_state_requires_unit_quaternion(self):
        with pytest.raises(FollowerError, match="unit"):
            ProbeState(position=np.zeros(3), orientation=np.array([1.0, 0, 0, 1.0]),
                       velocity=np.zeros(3), force=np.zeros(3), torque=np.zeros(3))


class TestImpedanceStep:
    def test_matches_closed_form_critically_damped_response(self):
        x_d = np.array([0.01, 0.0, 0.0])
        traj = _simulate_free(_unit_params(), np.zeros(3), x_d, 500)
        t = np.arange(501) * 0.001
        expected = 0.01 + critically_damped_response(-0.01, 0.0, _OMEGA, t)
        got = np.array([s.position[0] for s in traj])
        assert np.abs(got - expected).max() < 1e-5
        assert np.abs(got - expected).max() < 1e-12  # exact discretization

    def test_no_overshoot_and_settles(self):
        x_d = np.array([0.01, 0.0, 0.0])
        traj = _simulate_free(_unit_params(), np.zeros(3), x_d, 400)
        xs = np.array([s.position[0] for s in traj])
        assert xs.max() <= 0.01 + 1e-12
        k_settle = int(np.ceil(6.0 / _OMEGA / 0.001))
        assert abs(xs[k_settle] - 0.01) < 0.02 * 0.01

    def test_equilibrium_is_a_fixed_point(self):
        x = np.array([0.3, -0.1, 0.2])
        state = ProbeState.at_rest(x)
        nxt = impedance_step(state, x, _unit_params())
        assert np.array_equal(nxt.position, x)
        assert np.array_equal(nxt.velocity, np.zeros(3))

    def test_constant_force_reaches_spring_balance(self):
        f = np.array([0.0, 0.0, -1.0])
        state = ProbeState.at_rest(np.zeros(3))
        for _ in range(2000):
            state = impedance_step(state, np.zeros(3), _unit_params(), f_ext=f)
        assert abs(state.position[2] - (-1.0 / 1000.0)) < 1e-9
        assert abs(state.position[0]) < 1e-12 and abs(state.position[1]) < 1e-12

    @pytest.mark.parametrize("damping_scale", [2.0, 0.5])  # critical and under
    def test_lyapunov_energy_never_increases(self, damping_scale):
        k = np.array([1000.0] * 3 + [20.0] * 3)
        params = ImpedanceParams(stiffness=k, damping=damping_scale * np.sqrt(k))
        x_d = np.zeros(3)
        traj = _simulate_free(params, np.array([0.02, -0.01, 0.015]), x_d, 2000,
                              v0=np.array([0.1, 0.0, -0.2]))
        kt = params.stiffness[:3]
        v_fn = [0.5 * s.velocity @ params.inertia @ s.velocity
                + 0.5 * (s.position - x_d) @ (kt * (s.position - x_d))
                for s in traj]
        assert all(b <= a + 1e-9 for a, b in zip(v_fn, v_fn[1:]))

    def test_blowup_raises_integration_fault(self):
        # a numerically degenerate inertia overflows the transition matrix
        params = ImpedanceParams(inertia=np.diag([1e-300, 1.0, 1.0]))
        state = ProbeState.at_rest(np.array([0.01, 0.0, 0.0]))
        with pytest.raises(IntegrationFaultError):
            impedance_step(state, np.zeros(3), params)

    def test_orientation_slews_to_exam_orientation(self):
        q_d = np.array([0.0, 0.0, np.sin(np.pi / 4), np.cos(np.pi / 4)])
        state = ProbeState.at_rest(np.zeros(3))
        for _ in range(500):
            state = impedance_step(state, np.zeros(3), _unit_params(), q_desired=q_d)
        dot = abs(float(state.orientation @ q_d))
        assert np.arccos(min(dot, 1.0)) * 2.0 < 1e-3  # residual angle, rad

    def test_orientation_untouched_without_target(self):
        q0 = np.array([0.5, 0.5, 0.5, 0.5])
        state = ProbeState.at_rest(np.zeros(3), orientation=q0)
        nxt = impedance_step(state, np.ones(3) * 0.01, _unit_params())
        assert np.array_equal(nxt.orientation, q0)


class TestContactWrench:
    CM = ContactModel(k_skin=500.0, damping=5.0, mu=0.4)

    def _state(self, z, velocity=(0, 0, 0)):
        return ProbeState(position=np.array([0.0, 0.0, z]),
                          orientation=np.array([0, 0, 0, 1.0]),
                          velocity=np.asarray(velocity, dtype=np.float64),
                          force=np.zeros(3), torque=np.zeros(3))

    def test_clear_probe_sees_nothing(self, cube):
        force, torque = contact_wrench(self._state(0.5 + 0.0151), cube, 0.01, self.CM)
        assert np.array_equal(force, np.zeros(3))
        assert np.array_equal(torque, np.zeros(3))

    def test_static_spring_force(self, cube):
        force, _ = contact_wrench(self._state(0.5 + 0.008), cube, 0.01, self.CM)
        assert np.allclose(force, [0.0, 0.0, 1.0], atol=1e-12)

    def test_normal_damping_adds_and_subtracts(self, cube):
        push, _ = contact_wrench(self._state(0.508, (0, 0, -0.1)), cube, 0.01, self.CM)
        lift, _ = contact_wrench(self._state(0.508, (0, 0, +0.1)), cube, 0.01, self.CM)
        fast, _ = contact_wrench(self._state(0.508, (0, 0, +1.0)), cube, 0.01, self.CM)
        assert abs(push[2] - 1.5) < 1e-12
        assert abs(lift[2] - 0.5) < 1e-12
        assert np.array_equal(fast, np.zeros(3))  # adhesion never pulls

    def test_friction_viscous_then_coulomb_capped(self, cube):
        slow, _ = contact_wrench(self._state(0.508, (0.01, 0, 0)), cube, 0.01, self.CM)
        fast, _ = contact_wrench(self._state(0.508, (1.0, 0, 0)), cube, 0.01, self.CM)
        assert abs(slow[0] + 0.05) < 1e-12 and abs(slow[2] - 1.0) < 1e-12
        assert abs(fast[0] + 0.4) < 1e-12  # capped at mu * normal


class TestFollowerLoop:
    SKIN = make_cube()  # top face at z = 0.5

    def _config(self, **kw):
        return FollowerConfig(contact=ContactModel(k_skin=500.0, damping=5.0, mu=0.4),
                              probe_radius=0.01, **kw)

    def test_silent_leader_holds_position(self):
        start = ProbeState.at_rest(np.array([0.0, 0.0, 0.7]))
        steps = list(run_follower(self.SKIN, None, self._config(), [], 10.0, start))
        drift = max(np.linalg.norm(s.state.position - start.position) for s in steps)
        assert drift < 1e-6
        assert steps[-1].holding
        assert not steps[50].holding  # grace period before the timeout

    def test_starvation_flag_clears_when_references_resume(self):
        start = ProbeState.at_rest(np.array([0.0, 0.0, 0.7]))
        refs = [(0.05, np.array([0.0, 0.0, 0.7])), (1.0, np.array([0.0, 0.0, 0.69]))]
        steps = list(run_follower(self.SKIN, None, self._config(), refs, 1.5, start))
        by_t = {round(s.t, 4): s for s in steps}
        assert not by_t[0.1].holding
        assert by_t[0.5].holding
        assert not by_t[1.05].holding

    def test_conflation_keeps_only_the_newest_reference(self):
        start = ProbeState.at_rest(np.array([0.0, 0.0, 0.7]))
        refs = [(0.0001, np.array([0.0, 0.0, 0.71])),
                (0.0005, np.array([0.0, 0.0, 0.72])),
                (0.0009, np.array([0.0, 0.0, 0.73]))]
        first = next(iter(run_follower(self.SKIN, None, self._config(), refs, 0.01,
                                       start)))
        assert np.allclose(first.leader_ref, [0.0, 0.0, 0.73])

    def test_quasi_static_push_settles_to_spring_balance(self):
        # command the probe centre 4 mm below the contact threshold
        start = ProbeState.at_rest(np.array([0.0, 0.0, 0.6]))
        target = np.array([0.0, 0.0, 0.5 + 0.01 - 0.004])
        refs = [(0.05 * k, target) for k in range(60)]  # live stream, no starvation
        steps = list(run_follower(self.SKIN, None, self._config(), refs, 3.0, start))
        final = steps[-1]
        depth = 0.01 - (final.state.position[2] - 0.5)
        expected = self._config().contact.k_skin * depth
        measured = float(np.linalg.norm(final.state.force))
        assert measured > 0.5  # genuinely in contact
        assert abs(measured - expected) < 0.01 * expected
        # at rest the skin reaction balances the spring pulling the probe down
        spring = 1000.0 * (final.filtered_ref - final.state.position)
        assert np.allclose(final.state.force, -spring, rtol=0.01, atol=5e-3)

    def test_fixture_blocks_what_raw_teleoperation_allows(self):
        block = make_cube(0.1, (0.15, 0.0, 0.55))  # sits on the skin
        start = ProbeState.at_rest(np.array([0.15, 0.0, 0.7]))
        inside = np.array([0.15, 0.0, 0.55])
        cfg = self._config(vf=FilterConfig(probe_radius=0.01, cull_radius=0.05))
        refs = [(0.05 * k, inside) for k in range(40)]  # live stream, no starvation

        guarded = list(run_follower(self.SKIN, block, cfg, refs, 2.0, start))
        for s in guarded:
            assert not point_inside(block, s.state.position)
            assert mesh_closest_point(block, s.filtered_ref)[0] >= 0.01 - 1e-3
            assert mesh_closest_point(block, s.state.position)[0] >= 0.01 - 1e-3
        assert guarded[-1].clamped and guarded[-1].n_active >= 1
        # the guard clamps at the standoff surface, it does not stall at range
        dmin = min(mesh_closest_point(block, s.filtered_ref)[0] for s in guarded)
        assert dmin < 0.012
        # spring force against the clamped reference stays bounded
        gap = np.linalg.norm(guarded[-1].filtered_ref - guarded[-1].state.position)
        assert 1000.0 * gap < 1000.0 * np.linalg.norm(
            inside - guarded[-1].state.position)

        raw = list(run_follower(self.SKIN, None, cfg, refs, 2.0, start))
        assert point_inside(block, raw[-1].state.position)

    def test_steps_report_monotone_time(self):
        start = ProbeState.at_rest(np.array([0.0, 0.0, 0.7]))
        steps = list(run_follower(self.SKIN, None, self._config(), [], 0.05, start))
        ts = [s.t for s in steps]
        assert len(steps) == 50
        assert all(b > a for a, b in zip(ts, ts[1:]))
        assert isinstance(steps[0], FollowerStep)
