"""Evaluation rollouts: imitation fidelity, discovery spread, downstream success.

Motion FID is computed on stacked-state windows with the phase stripped; the
numbers are relative to that feature space and not comparable across
feature choices.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .envs import Termination
from .errors import UnknownMotion
from .hypersphere import GaussianFeatureStats, VmfParams, frechet_distance, vmf_sample
from .skill_rl.downstream import rollout_hierarchy
from .skill_rl.ppo import act
from .skill_rl.train import policy_observation

FID_RIDGE = 1e-6
DEFAULT_IMITATION_EPISODES = 500
DEFAULT_DISCOVERY_EPISODES = 150


@dataclass
class SkillRollout:
    frames: np.ndarray   # (N, T+1, d_obs); rows past ``alive_steps`` repeat the last frame
    states: np.ndarray   # (N, T+1, state_dim)
    alive_steps: np.ndarray  # (N,) number of executed steps
    reasons: np.ndarray  # (N,) termination reason of each episode


def policy_actor(policy, deterministic):
    def actor(obs, rng):
        return act(policy, obs, rng, deterministic)[0]
    return actor


def random_actor(action_dim):
    def actor(obs, rng):
        return rng.uniform(-1.0, 1.0, size=(len(obs), action_dim))
    return actor


def rollout_skill(env, dataset, motion_index, z, actor, rng, steps=None, start_frame=0):
    """Run ``len(z)`` episodes from a reference frame, one latent per episode.

    Phase follows the reference clock; episodes stop early only on a fall.
    """
    m = dataset.motions[motion_index]
    z = np.atleast_2d(z)
    n = len(z)
    steps = m.length - 1 - start_frame if steps is None else steps
    stacked = dataset.stacked(motion_index)[start_frame]
    window = np.tile(stacked[1:].reshape(dataset.n_stack, dataset.d_obs), (n, 1, 1))
    state = np.tile(env.state_from_frame(m.frames[start_frame]), (n, 1))
    frames = np.zeros((n, steps + 1, dataset.d_obs))
    states = np.zeros((n, steps + 1, env.state_dim))
    frames[:, 0], states[:, 0] = window[:, -1], state
    alive = np.ones(n, dtype=bool)
    alive_steps = np.zeros(n, dtype=int)
    reasons = np.full(n, int(Termination.HORIZON))
    for k in range(steps):
        t = min(start_frame + k, m.length - 1)
        phase = np.full(n, t / (m.length - 1))
        actions = actor(policy_observation(env, window[:, -1], phase, z), rng)
        nxt, obs, why = env.step_batch(state, actions)
        fell = why == Termination.FELL
        state = np.where(alive[:, None], nxt, state)
        window = np.where(alive[:, None, None], np.concatenate([window[:, 1:], obs[:, None]], axis=1), window)
        alive_steps += alive
        reasons[alive & fell] = int(Termination.FELL)
        alive &= ~fell
        frames[:, k + 1], states[:, k + 1] = window[:, -1], state
    return SkillRollout(frames, states, alive_steps, reasons)


def window_features(frames, n_stack, alive_steps=None):
    """Phase-free stacked-state features along trajectories (clamped at the start)."""
    frames = np.atleast_3d(frames)
    n, length, _ = frames.shape
    feats = []
    for i in range(n):
        last = length - 1 if alive_steps is None else int(alive_steps[i])
        for t in range(last + 1):
            idx = np.clip(np.arange(t - n_stack + 1, t + 1), 0, None)
            feats.append(frames[i, idx].ravel())
    return np.array(feats)


def reference_features(dataset, motion_indices):
    return np.concatenate([dataset.stacked(i)[:, 1:] for i in motion_indices])


def motion_fid(dataset, motion_indices, frames, alive_steps=None):
    ref = GaussianFeatureStats.fit(reference_features(dataset, motion_indices), FID_RIDGE)
    gen = GaussianFeatureStats.fit(window_features(frames, dataset.n_stack, alive_steps), FID_RIDGE)
    return frechet_distance(ref, gen)


def path_length(env, frames):
    """Length of the tracked-point path (mean over points) of a frame sequence."""
    pts = env.tracked_points(np.asarray(frames))
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=-1).mean(axis=-1).sum())


def tracking_errors(env, motion, rollout):
    """Per-episode mean over executed steps of the error vs the time-aligned reference."""
    n, length = rollout.frames.shape[:2]
    per_episode = np.zeros(n)
    for i in range(n):
        steps = int(rollout.alive_steps[i])
        if steps == 0:
            continue
        t = np.minimum(np.arange(1, steps + 1), motion.length - 1)
        per_episode[i] = np.mean(env.cartesian_error(rollout.frames[i, 1 : steps + 1], motion.frames[t]))
    return per_episode


def eval_imitation(policy, dataset, motion_id, z, episodes=DEFAULT_IMITATION_EPISODES, seed=0,
                   deterministic=False, actor=None, env=None):
    """Track ``motion_id`` from its first frame with latent ``z``.

    ``actor`` overrides the policy (e.g. :func:`random_actor`). Returns the
    mean Cartesian error, its std over episodes, the motion FID, the per-step
    deviation rate and the reference path length.
    """
    if motion_id not in dataset.ids:
        raise UnknownMotion(motion_id)
    env = env or dataset.make_env()
    rng = np.random.default_rng(seed)
    mi = dataset.index(motion_id)
    motion = dataset.motions[mi]
    actor = actor or policy_actor(policy, deterministic)
    roll = rollout_skill(env, dataset, mi, np.tile(z, (episodes, 1)), actor, rng)
    errors = tracking_errors(env, motion, roll)
    deviated = _first_deviation(env, motion, roll)
    return {
        "motion_id": motion_id,
        "episodes": episodes,
        "cartesian_error": float(errors.mean()),
        "cartesian_error_std": float(errors.std()),
        "fid": float(motion_fid(dataset, [mi], roll.frames, roll.alive_steps)),
        "deviated_fraction": float(np.mean(deviated < np.inf)),
        "path_length": path_length(env, motion.frames),
        "per_episode_error": errors,
        "rollout": roll,
    }


def _first_deviation(env, motion, roll, eps_term=None):
    """Index of the first step whose error exceeds the termination threshold (inf if none)."""
    eps = env.eps_term if eps_term is None else eps_term
    first = np.full(len(roll.frames), np.inf)
    for i in range(len(roll.frames)):
        steps = int(roll.alive_steps[i])
        t = np.minimum(np.arange(1, steps + 1), motion.length - 1)
        err = env.cartesian_error(roll.frames[i, 1 : steps + 1], motion.frames[t])
        over = np.flatnonzero(np.atleast_1d(err) > eps)
        if over.size:
            first[i] = over[0] + 1
    return first


def eval_discovery(policy, dataset, motion_id, z_m, kappa, episodes=DEFAULT_DISCOVERY_EPISODES, seed=0,
                   deterministic=True, env=None):
    """Roll out latents drawn from vMF(z_m, kappa) from the motion's first frame."""
    if motion_id not in dataset.ids:
        raise UnknownMotion(motion_id)
    env = env or dataset.make_env()
    rng = np.random.default_rng(seed)
    mi = dataset.index(motion_id)
    zs = vmf_sample(VmfParams(np.asarray(z_m, dtype=float), kappa), episodes, rng)
    roll = rollout_skill(env, dataset, mi, zs, policy_actor(policy, deterministic), rng)
    base = env.base_position(roll.states)
    endpoints = base[np.arange(episodes), roll.alive_steps]
    return {
        "motion_id": motion_id,
        "kappa": float(kappa),
        "episodes": episodes,
        "latents": zs,
        "latent_mean_cosine": float(np.mean(zs @ (z_m / np.linalg.norm(z_m)))),
        "dispersion": endpoint_dispersion(endpoints),
        "fid": float(motion_fid(dataset, [mi], roll.frames, roll.alive_steps)),
        "traces": base,
        "alive_steps": roll.alive_steps,
    }


def goal_success(traces, goals, r_goal, alive_steps=None):
    """Per episode: did the trace come within ``r_goal`` of its goal before stopping?"""
    traces = np.asarray(traces, dtype=float)
    d = np.linalg.norm(traces - np.asarray(goals, dtype=float)[:, None], axis=-1)
    if alive_steps is not None:
        d = np.where(np.arange(d.shape[1])[None] <= np.asarray(alive_steps)[:, None], d, np.inf)
    return d.min(axis=1) <= r_goal


def eval_downstream(high_policy, low_policy, dataset, latents, style, config, episodes=100, seed=0):
    """Success rate of the hierarchy; styled tasks also get FID against the style motion."""
    res = rollout_hierarchy(dataset, high_policy, low_policy, latents, style, config, episodes, seed)
    out = {
        "style": style or "freestyle",
        "episodes": episodes,
        "success_rate": float(np.mean(res["success"])),
        "fell_rate": float(np.mean(res["fell"])),
        "min_distance": res["min_distance"],
        "traces": res["traces"],
        "alive_steps": res["alive_steps"],
    }
    if style not in (None, "freestyle"):
        out["fid"] = float(motion_fid(dataset, [dataset.index(style)], res["frames"], res["alive_steps"]))
    return out


def endpoint_dispersion(points):
    """Mean pairwise Euclidean distance between endpoints."""
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        return 0.0
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    return float(d[np.triu_indices(len(p), 1)].mean())


def write_traces_csv(path, traces, alive_steps, extra=None):
    """Top-view traces: one row per (episode, step) with base x, y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "step", "x", "y"] + sorted(extra or {}))
        for i, trace in enumerate(traces):
            for t in range(int(alive_steps[i]) + 1):
                w.writerow([i, t, repr(float(trace[t, 0])), repr(float(trace[t, 1])),
                            *[extra[k] for k in sorted(extra or {})]])


def report_json(path, metrics, header=None):
    """Write ``{metric: value}`` (scalars, or ``{"mean", "std"}`` dicts)."""
    body = {"feature_space": "stacked-state windows without phase", **(header or {}), "metrics": metrics}
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
