"""Reference-motion datasets: file format, scripted generation, stacking, sampling."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import DT, make_env
from .errors import IndexOutOfRange, ParseError, UnknownMotion, UnknownRecipe, ValidationError

FORMAT_VERSION = 1
DEFAULT_N_STACK = 5
MIN_HORIZON = 8


@dataclass(frozen=True)
class Motion:
    id: str
    frames: np.ndarray  # (l, d_obs)
    dt: float = DT

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=float))

    @property
    def length(self):
        return self.frames.shape[0]


def stack_state(motion, t, n_stack=DEFAULT_N_STACK):
    """``[phase, o_{t-n+1}, ..., o_t]`` with indices before 0 clamped to frame 0."""
    l = motion.length
    if not 0 <= t < l:
        raise IndexOutOfRange(f"t={t} outside [0, {l})")
    idx = np.clip(np.arange(t - n_stack + 1, t + 1), 0, None)
    phase = t / (l - 1) if l > 1 else 1.0
    return np.concatenate([[phase], motion.frames[idx].ravel()])


def stack_window(frames, phase):
    """StackedState from an explicit window of frames (oldest first)."""
    return np.concatenate([[phase], np.asarray(frames, dtype=float).ravel()])


def split_stacked(stacked, n_stack, d_obs):
    """Inverse of :func:`stack_window`: (phase, (n_stack, d_obs) window)."""
    s = np.asarray(stacked)
    return s[..., 0], s[..., 1:].reshape(*s.shape[:-1], n_stack, d_obs)


@dataclass
class MotionDataset:
    motions: list
    n_stack: int = DEFAULT_N_STACK
    env_name: str = "point_mass_2d"
    dt: float = DT
    _stacked: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ids = [m.id for m in self.motions]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate motion ids")
        if not self.motions:
            raise ValidationError("dataset is empty")
        dims = {m.frames.shape[1] for m in self.motions}
        if len(dims) != 1:
            raise ValidationError(f"frames of differing dimension {sorted(dims)}")
        for m in self.motions:
            if m.length < self.n_stack:
                raise ValidationError(f"motion {m.id} shorter than n_stack={self.n_stack}")

    @property
    def d_obs(self):
        return self.motions[0].frames.shape[1]

    @property
    def state_dim(self):
        return 1 + self.n_stack * self.d_obs

    @property
    def ids(self):
        return [m.id for m in self.motions]

    def __len__(self):
        return len(self.motions)

    def index(self, motion_id):
        for i, m in enumerate(self.motions):
            if m.id == motion_id:
                return i
        raise UnknownMotion(motion_id)

    def get(self, motion_id):
        return self.motions[self.index(motion_id)]

    def stacked(self, i):
        """All StackedStates of motion ``i`` as an (l, state_dim) array (cached)."""
        if i not in self._stacked:
            m = self.motions[i]
            self._stacked[i] = np.stack([stack_state(m, t, self.n_stack) for t in range(m.length)])
        return self._stacked[i]

    def subset(self, motion_ids):
        return MotionDataset([self.get(i) for i in motion_ids], self.n_stack, self.env_name, self.dt)

    def make_env(self, **kwargs):
        return make_env(self.env_name, **kwargs)

    def to_jsonl(self):
        lines = [json.dumps({"format_version": FORMAT_VERSION, "d_obs": self.d_obs, "dt": _num(self.dt),
                             "n_stack": self.n_stack, "env": self.env_name}, sort_keys=True)]
        for m in self.motions:
            frames = "[" + ",".join("[" + ",".join(_num(x) for x in f) + "]" for f in m.frames) + "]"
            lines.append('{"frames":' + frames + ',"id":' + json.dumps(m.id) + "}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_jsonl())

    def content_hash(self):
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def _num(x):
    # + 0.0 maps -0.0 to 0.0 so a written file survives a reload byte for byte
    return format(float(x) + 0.0, ".17g")


def load_dataset(path):
    """Parse and validate a JSON-lines motion file."""
    text = Path(path).read_text()
    return parse_dataset(text)


def parse_dataset(text):
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc}", 1) from None
    for key in ("format_version", "d_obs", "dt", "n_stack"):
        if key not in header:
            raise ValidationError(f"header missing {key!r}", 1)
    if header["format_version"] != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {header['format_version']}", 1)
    d_obs = int(header["d_obs"])
    motions, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), lineno) from None
        if not isinstance(rec, dict) or "id" not in rec or "frames" not in rec:
            raise ValidationError("record needs 'id' and 'frames'", lineno)
        mid = str(rec["id"])
        if mid in seen:
            raise ValidationError(f"duplicate id {mid!r}", lineno)
        seen.add(mid)
        try:
            frames = np.array(rec["frames"], dtype=float)
        except (TypeError, ValueError):
            raise ValidationError(f"motion {mid!r}: ragged or non-numeric frames", lineno) from None
        if frames.ndim != 2 or frames.shape[1] != d_obs:
            raise ValidationError(f"motion {mid!r}: frames must be (l, {d_obs}), got {frames.shape}", lineno)
        bad = np.where(~np.all(np.isfinite(frames), axis=1))[0]
        if bad.size:
            raise ValidationError(f"motion {mid!r}: non-finite value in frame {int(bad[0])}", lineno)
        if frames.shape[0] < int(header["n_stack"]):
            raise ValidationError(f"motion {mid!r}: fewer frames than n_stack", lineno)
        motions.append(Motion(mid, frames, float(header["dt"])))
    if not motions:
        raise ValidationError("no motions", 1)
    return MotionDataset(motions, int(header["n_stack"]), header.get("env", "point_mass_2d"), float(header["dt"]))


# ---------------------------------------------------------------------------
# Scripted reference generation
# ---------------------------------------------------------------------------

def _rot(psi, xy):
    c, s = math.cos(psi), math.sin(psi)
    xy = np.asarray(xy, dtype=float)
    return np.stack([c * xy[..., 0] - s * xy[..., 1], s * xy[..., 0] + c * xy[..., 1]], axis=-1)


def _point_mass_targets(kind, p, length, dt):
    """Target positions for t = -1 .. length-1 (row 0 is t = -1)."""
    t = np.arange(-1, length, dtype=float)
    psi = p.get("heading", 0.0)
    if kind == "straight":
        local = np.stack([p["speed"] * dt * t, np.zeros_like(t)], axis=-1)
    elif kind == "backward":
        local = np.stack([-p["speed"] * dt * t, np.zeros_like(t)], axis=-1)
    elif kind in ("arc_left", "arc_right", "loop"):
        if kind == "loop":
            period = length - 1
            theta = 2.0 * math.pi * (np.mod(t, period) / period)
            radius = p["radius"]
        else:
            theta = p["rate"] * dt * t
            radius = p["speed"] / p["rate"]
        sign = -1.0 if kind == "arc_right" else 1.0
        local = np.stack([radius * np.sin(theta), sign * radius * (1.0 - np.cos(theta))], axis=-1)
    elif kind == "zigzag":
        local = np.stack([p["speed"] * dt * t, p["amplitude"] * np.sin(2.0 * math.pi * t / p["period"])], axis=-1)
    else:
        raise UnknownRecipe(kind)
    return _rot(psi, local)


def _chain_targets(kind, p, length, n_links):
    t = np.arange(-1, length, dtype=float)
    rest = np.asarray(p.get("rest", [math.pi / 2] + [0.0] * (n_links - 1)), dtype=float)
    if kind == "gait":
        period = p["period"]
        amp = np.asarray(p["amplitude"], dtype=float)
        phase = np.asarray(p["phase"], dtype=float)
        cyc = np.mod(t, period) / period
        return rest + amp * np.sin(2.0 * math.pi * cyc[:, None] + phase)
    if kind == "reach_hold":
        target = np.asarray(p["target"], dtype=float)
        u = np.clip(t / p["reach_frames"], 0.0, 1.0)
        smooth = u * u * (3.0 - 2.0 * u)
        return rest + smooth[:, None] * (target - rest)
    raise UnknownRecipe(kind)


POINT_MASS_RECIPES = [
    ("straight", "straight", {"heading": 0.0, "speed": 1.5}),
    ("arc_left", "arc_left", {"heading": math.pi / 3, "speed": 1.5, "rate": 0.8}),
    ("arc_right", "arc_right", {"heading": -math.pi / 3, "speed": 1.5, "rate": 0.8}),
    ("backward", "backward", {"heading": math.pi / 3 * 2, "speed": 1.0}),
    ("zigzag", "zigzag", {"heading": -math.pi / 3 * 2, "speed": 1.2, "amplitude": 0.2, "period": 30}),
    ("loop", "loop", {"heading": math.pi, "radius": 0.6}),
]

CHAIN_RECIPES = [
    ("gait_a", "gait", {"length": 61, "period": 30, "amplitude": [0.25, 0.35, 0.3], "phase": [0.0, math.pi / 2, math.pi]}),
    ("gait_b", "gait", {"length": 61, "period": 20, "amplitude": [0.15, 0.3, 0.2], "phase": [math.pi, 0.0, math.pi / 2]}),
    ("reach_a", "reach_hold", {"target": [1.1, 0.5, -0.4], "reach_frames": 20}),
    ("reach_b", "reach_hold", {"target": [2.0, -0.5, 0.3], "reach_frames": 25}),
]

DEFAULT_RECIPES = {"point_mass_2d": POINT_MASS_RECIPES, "planar_chain": CHAIN_RECIPES}
RECIPE_KINDS = {
    "point_mass_2d": {"straight", "backward", "arc_left", "arc_right", "zigzag", "loop"},
    "planar_chain": {"gait", "reach_hold"},
}


def scripted_rollout(env, kind, params, length):
    """Roll a recipe out open-loop; returns (frames, states, actions).

    The scripted controller picks, at every step, the action that lands the
    semi-implicit Euler update exactly on the next target configuration.
    """
    dt = env.dt
    if env.name == "point_mass_2d":
        targets = _point_mass_targets(kind, params, length, dt)
        heading = params.get("heading", 0.0)
        state = env.make_state(targets[1], (targets[1] - targets[0]) / dt, heading)
    else:
        targets = _chain_targets(kind, params, length, env.n_links)
        state = env.make_state(targets[1], (targets[1] - targets[0]) / dt)
    states, actions = [state], []
    for t in range(length - 1):
        nxt_target = targets[t + 2]
        if env.name == "point_mass_2d":
            vel_needed = (nxt_target - state[0:2]) / dt
            acc_world = (vel_needed - state[2:4]) / dt
            c, s = math.cos(state[4]), math.sin(state[4])
            action = np.array([c * acc_world[0] + s * acc_world[1], -s * acc_world[0] + c * acc_world[1]])
            action /= env.max_accel
        else:
            n = env.n_links
            q, qd = state[:n], state[n : 2 * n]
            # Relative angles are unwrapped against the target before differencing.
            dq = np.angle(np.exp(1j * (nxt_target - q)))
            vel_needed = dq / dt
            action = ((vel_needed - qd) / dt + env.damping * qd) / env.torque_scale
        if np.max(np.abs(action)) > 1.0 + 1e-9:
            raise ValueError(f"recipe {kind} needs action {np.max(np.abs(action)):.3f} > 1 at step {t}")
        res = env.step(state, action)
        state = res.next_state
        states.append(state)
        actions.append(action)
    states = np.array(states)
    return env.observe_batch(states), states, np.array(actions)


def generate_reference_set(env_name, recipe_list=None, seed=0, length=60, n_stack=DEFAULT_N_STACK, env=None):
    """Roll out each recipe and record it as a Motion.

    ``recipe_list`` items are ``(id, kind, params)``; ``None`` uses the
    default catalog for the environment. ``seed`` jitters nothing by default
    (the recipes are fully scripted) but is accepted so alternative catalogs
    can randomize parameters reproducibly.
    """
    if env_name not in DEFAULT_RECIPES:
        raise UnknownRecipe(f"unknown environment {env_name!r}")
    env = env or make_env(env_name)
    recipes = DEFAULT_RECIPES[env_name] if recipe_list is None else recipe_list
    rng = np.random.default_rng(seed)
    motions = []
    for rid, kind, params in recipes:
        if kind not in RECIPE_KINDS[env_name]:
            raise UnknownRecipe(kind)
        params = dict(params)
        if params.pop("jitter", 0.0):
            params["heading"] = params.get("heading", 0.0) + float(rng.uniform(-0.1, 0.1))
        n_frames = int(params.pop("length", length))
        frames, _, _ = scripted_rollout(env, kind, params, n_frames)
        motions.append(Motion(rid, frames, env.dt))
    return MotionDataset(motions, n_stack, env_name, env.dt)


def is_repetitive(motion, tol=1e-9):
    return bool(np.max(np.abs(motion.frames[0] - motion.frames[-1])) <= tol)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContrastiveBatch:
    anchors: np.ndarray      # (B, D)
    positives: np.ndarray    # (B, D)
    negatives: np.ndarray    # (B, K, D)
    motion_index: np.ndarray  # (B,)
    negative_motion_index: np.ndarray  # (B, K)


def sample_contrastive_batch(dataset, batch_size, negatives_per_anchor, seed, max_gap=None):
    """Anchor/positive from one uniformly drawn motion, negatives from the others."""
    if len(dataset) < 2:
        raise ValidationError("contrastive sampling needs at least 2 motions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_motions = len(dataset)
    m_idx = rng.integers(n_motions, size=batch_size)
    # Other motion: shift by 1..M-1 so the draw is uniform over M \ {m}.
    neg_m = (m_idx[:, None] + rng.integers(1, n_motions, size=(batch_size, negatives_per_anchor))) % n_motions
    lengths = np.array([m.length for m in dataset.motions])
    a_t = np.floor(rng.uniform(size=batch_size) * lengths[m_idx]).astype(int)
    if max_gap is None:
        p_t = np.floor(rng.uniform(size=batch_size) * lengths[m_idx]).astype(int)
    else:
        lo = np.maximum(a_t - max_gap, 0)
        hi = np.minimum(a_t + max_gap, lengths[m_idx] - 1)
        p_t = lo + np.floor(rng.uniform(size=batch_size) * (hi - lo + 1)).astype(int)
    n_t = np.floor(rng.uniform(size=neg_m.shape) * lengths[neg_m]).astype(int)
    table = [dataset.stacked(i) for i in range(n_motions)]
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    flat = np.concatenate(table, axis=0)
    return ContrastiveBatch(flat[offsets[m_idx] + a_t], flat[offsets[m_idx] + p_t],
                            flat[offsets[neg_m] + n_t], m_idx, neg_m)


@dataclass(frozen=True)
class RsiSample:
    motion_id: str
    frame_index: int
    state: np.ndarray


def rsi_sample(dataset, seed, env=None, min_horizon=MIN_HORIZON):
    """Uniform motion, uniform frame in [0, l-1-min_horizon], and the state reproducing it."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    env = env or dataset.make_env()
    i = int(rng.integers(len(dataset)))
    m = dataset.motions[i]
    hi = max(m.length - 1 - min_horizon, 0)
    t = int(rng.integers(hi + 1))
    return RsiSample(m.id, t, env.state_from_frame(m.frames[t]))
