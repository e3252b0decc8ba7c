"""Deterministic toy environments with batched stepping.

States and frames are packed float vectors so that N instances can be
stepped as one ``(N, dim)`` array:

* ``point_mass_2d``: state ``[x, y, vx, vy, heading]``, frame
  ``[x, y, v_forward, v_lateral, cos heading, sin heading]``; actions are
  body-frame accelerations.
* ``planar_chain``: state ``[q_1..q_n, qd_1..qd_n, base_x, base_y]``, frame
  ``[q_1..q_n, qd_1..qd_n]`` (egocentric, base position excluded); actions
  are joint torques. Joint angles are relative, link lengths 1, the first
  joint sits at the base.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DimensionMismatch, InvalidState

DT = 1.0 / 30.0


class Termination(IntEnum):
    NONE = 0
    FELL = 1
    DEVIATED = 2
    HORIZON = 3

    def __str__(self):
        return self.name.lower()


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    observation: np.ndarray
    terminated: bool
    termination_reason: Termination


class Env:
    name = ""
    state_dim = 0
    obs_dim = 0
    action_dim = 0

    def __init__(self, dt=DT, eps_term=0.5):
        self.dt = dt
        self.eps_term = eps_term

    # -- subclasses fill these in -------------------------------------------------
    def observe_batch(self, states):
        raise NotImplementedError

    def state_from_frame(self, frame):
        raise NotImplementedError

    def tracked_points(self, frames):
        """(N, P, 2) Cartesian positions used by the tracking error."""
        raise NotImplementedError

    def policy_frame(self, frames):
        """Egocentric part of a frame batch fed to policies and value functions."""
        return np.asarray(frames, dtype=float)

    @property
    def policy_frame_dim(self):
        return self.obs_dim

    def _integrate(self, states, actions):
        raise NotImplementedError

    def _fell(self, states):
        raise NotImplementedError

    def _angle_slots(self):
        return []

    # -- shared machinery -----------------------------------------------------------
    def validate_state(self, state):
        s = np.asarray(state, dtype=float)
        if s.shape[-1] != self.state_dim:
            raise InvalidState(f"state has dim {s.shape[-1]}, expected {self.state_dim}")
        if not np.all(np.isfinite(s)):
            raise InvalidState("state contains non-finite values")
        s = s.copy()
        slots = self._angle_slots()
        if slots:
            s[..., slots] = wrap_angle(s[..., slots])
        return s

    def observe(self, state):
        return self.observe_batch(np.asarray(state, dtype=float)[None, :])[0]

    def reset(self, initial):
        """Set to ``initial`` (a state vector or an RSI sample carrying ``.state``)."""
        state = getattr(initial, "state", initial)
        state = self.validate_state(state)
        return state, self.observe(state)

    def cartesian_error(self, a, b):
        """Mean Euclidean distance between corresponding tracked points (row-wise)."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if a.shape[-1] != self.obs_dim or b.shape[-1] != self.obs_dim:
            raise DimensionMismatch(f"frames must have dim {self.obs_dim}")
        single = a.ndim == 1 and b.ndim == 1
        pa = self.tracked_points(np.atleast_2d(a))
        pb = self.tracked_points(np.atleast_2d(b))
        err = np.linalg.norm(pa - pb, axis=-1).mean(axis=-1)
        return float(err[0]) if single else err

    def step_batch(self, states, actions, reference_frames=None, eps_term=None, truncate=None):
        """Advance N instances; returns (next_states, observations, reasons)."""
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        if actions.shape[-1] != self.action_dim:
            raise DimensionMismatch(f"action dim {actions.shape[-1]} != {self.action_dim}")
        nxt = self._integrate(states, np.clip(actions, -1.0, 1.0))
        slots = self._angle_slots()
        if slots:
            nxt[:, slots] = wrap_angle(nxt[:, slots])
        obs = self.observe_batch(nxt)
        reasons = np.zeros(len(states), dtype=int)
        if truncate is not None:
            reasons[np.asarray(truncate, dtype=bool)] = Termination.HORIZON
        if reference_frames is not None:
            eps = self.eps_term if eps_term is None else eps_term
            ref = np.asarray(reference_frames, dtype=float)
            dev = self.cartesian_error(obs, ref) > eps
            mask = np.ones(len(states), dtype=bool) if ref.ndim == 1 else ~np.isnan(ref).any(axis=-1)
            reasons[dev & mask] = Termination.DEVIATED
        reasons[self._fell(nxt)] = Termination.FELL
        return nxt, obs, reasons

    def step(self, state, action, reference_frame=None, eps_term=None, truncate=False):
        state = np.asarray(state, dtype=float)
        ref = None if reference_frame is None else np.asarray(reference_frame, dtype=float)[None, :]
        nxt, obs, reasons = self.step_batch(state[None, :], np.asarray(action, dtype=float)[None, :],
                                            ref, eps_term, [truncate])
        reason = Termination(int(reasons[0]))
        return StepResult(nxt[0], obs[0], reason != Termination.NONE, reason)


class PointMass2D(Env):
    name = "point_mass_2d"
    state_dim = 5
    obs_dim = 6
    action_dim = 2

    def __init__(self, dt=DT, eps_term=0.5, max_accel=10.0, arena=10.0):
        super().__init__(dt, eps_term)
        self.max_accel = max_accel
        self.arena = arena

    def make_state(self, position=(0.0, 0.0), velocity=(0.0, 0.0), heading=0.0):
        return self.validate_state(np.array([*position, *velocity, heading], dtype=float))

    def _angle_slots(self):
        return [4]

    def observe_batch(self, states):
        pos, vel, h = states[:, 0:2], states[:, 2:4], states[:, 4]
        c, s = np.cos(h), np.sin(h)
        v_fwd = c * vel[:, 0] + s * vel[:, 1]
        v_lat = -s * vel[:, 0] + c * vel[:, 1]
        return np.column_stack([pos, v_fwd, v_lat, c, s])

    def state_from_frame(self, frame):
        f = np.asarray(frame, dtype=float)
        h = math.atan2(f[5], f[4])
        c, s = math.cos(h), math.sin(h)
        vel = (c * f[2] - s * f[3], s * f[2] + c * f[3])
        return self.make_state(f[0:2], vel, h)

    def body_to_world(self, heading, accel_body):
        c, s = np.cos(heading), np.sin(heading)
        return np.stack([c * accel_body[..., 0] - s * accel_body[..., 1],
                         s * accel_body[..., 0] + c * accel_body[..., 1]], axis=-1)

    def _integrate(self, states, actions):
        nxt = states.copy()
        acc = self.max_accel * self.body_to_world(states[:, 4], actions)
        nxt[:, 2:4] = states[:, 2:4] + self.dt * acc
        nxt[:, 0:2] = states[:, 0:2] + self.dt * nxt[:, 2:4]
        return nxt

    def _fell(self, states):
        return np.any(np.abs(states[:, 0:2]) > self.arena, axis=1)

    def tracked_points(self, frames):
        return frames[:, None, 0:2]

    def policy_frame(self, frames):
        return np.asarray(frames, dtype=float)[..., 2:]

    @property
    def policy_frame_dim(self):
        return self.obs_dim - 2

    def base_position(self, states):
        return np.asarray(states)[..., 0:2]


class PlanarChain(Env):
    name = "planar_chain"

    def __init__(self, n_links=3, dt=DT, eps_term=0.5, torque_scale=30.0, damping=0.5,
                 propulsion=0.5, fall_height=0.2):
        super().__init__(dt, eps_term)
        self.n_links = n_links
        self.state_dim = 2 * n_links + 2
        self.obs_dim = 2 * n_links
        self.action_dim = n_links
        self.torque_scale = torque_scale
        self.damping = damping
        self.propulsion = propulsion
        self.fall_height = fall_height

    def make_state(self, angles, velocities=None, base=(0.0, 0.0)):
        n = self.n_links
        vel = np.zeros(n) if velocities is None else velocities
        return self.validate_state(np.concatenate([np.asarray(angles, float).reshape(n),
                                                   np.asarray(vel, float).reshape(n), base]))

    def _angle_slots(self):
        return list(range(self.n_links))

    def observe_batch(self, states):
        return states[:, : 2 * self.n_links].copy()

    def state_from_frame(self, frame, base=(0.0, 0.0)):
        f = np.asarray(frame, dtype=float)
        return self.make_state(f[: self.n_links], f[self.n_links :], base)

    def joint_positions(self, angles):
        """Forward kinematics from relative angles: (N, n+1, 2) including the base at 0."""
        angles = np.atleast_2d(angles)
        absolute = np.cumsum(angles, axis=1)
        steps = np.stack([np.cos(absolute), np.sin(absolute)], axis=-1)
        pts = np.cumsum(steps, axis=1)
        return np.concatenate([np.zeros((angles.shape[0], 1, 2)), pts], axis=1)

    def tracked_points(self, frames):
        return self.joint_positions(frames[:, : self.n_links])

    def _tip_velocity(self, q, qd):
        absolute = np.cumsum(q, axis=1)
        abs_rate = np.cumsum(qd, axis=1)
        return np.stack([np.sum(-np.sin(absolute) * abs_rate, axis=1),
                         np.sum(np.cos(absolute) * abs_rate, axis=1)], axis=-1)

    def _integrate(self, states, actions):
        n = self.n_links
        q, qd = states[:, :n], states[:, n : 2 * n]
        qdd = self.torque_scale * actions - self.damping * qd
        new_qd = qd + self.dt * qdd
        new_q = q + self.dt * new_qd
        tip_v = self._tip_velocity(new_q, new_qd)
        nxt = states.copy()
        nxt[:, :n] = new_q
        nxt[:, n : 2 * n] = new_qd
        # Backward strokes of the tip push the base forward.
        nxt[:, 2 * n] = states[:, 2 * n] + self.dt * self.propulsion * np.maximum(0.0, -tip_v[:, 0])
        return nxt

    def _fell(self, states):
        tip = self.joint_positions(states[:, : self.n_links])[:, -1, 1]
        return tip < self.fall_height

    def base_position(self, states):
        return np.asarray(states)[..., 2 * self.n_links : 2 * self.n_links + 2]


ENV_NAMES = ("point_mass_2d", "planar_chain")


def make_env(name, **kwargs):
    if name == "point_mass_2d":
        return PointMass2D(**kwargs)
    if name == "planar_chain":
        return PlanarChain(**kwargs)
    raise KeyError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


def write_trajectory_csv(path, env, records, latent_dim):
    """Dump step records as CSV.

    Each record is a mapping with keys ``step, env_id, state, action, reward,
    z, c, termination_reason``.
    """
    header = (["step", "env_id"] + [f"state_{i}" for i in range(env.state_dim)]
              + [f"action_{i}" for i in range(env.action_dim)] + ["reward"]
              + [f"z_{i}" for i in range(latent_dim)] + ["c", "termination_reason"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            w.writerow([r["step"], r["env_id"], *[repr(float(x)) for x in r["state"]],
                        *[repr(float(x)) for x in r["action"]], repr(float(r["reward"])),
                        *[repr(float(x)) for x in r["z"]], int(r["c"]),
                        str(Termination(int(r["termination_reason"])))])
