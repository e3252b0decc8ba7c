"""Temporal-distance representations and why they cannot reward repetition.

A representation ``phi`` of single frames is trained so adjacent frames sit
about one unit apart (bounded by 1 through a dual variable) while the
directions of latent steps separate motions contrastively. The per-step
reward ``<phi(s') - phi(s), z>`` telescopes, so a motion whose last frame
equals its first earns exactly zero in total for every ``z``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import losses
from .approximator import Adam, Mlp, MlpSpec, backward, forward_with_cache
from .errors import DimensionMismatch
from .motions import is_repetitive

COLLAPSE_TOL = 1e-9


@dataclass(frozen=True)
class MetraConfig:
    latent_dim: int = 2
    dual_lambda_init: float = 1.0
    dual_lr: float = 0.05
    epsilon_slack: float = 0.02
    time_augmented: bool = False
    time_scale: float = 1.0
    epochs: int = 3000
    batch_size: int = 128
    negatives_per_anchor: int = 8
    learning_rate: float = 3e-3
    temperature: float = 0.2
    hidden_layers: tuple = (64, 64)
    hidden_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.latent_dim < 1 or self.dual_lambda_init < 0 or self.dual_lr <= 0 or self.epsilon_slack <= 0:
            raise ValueError("latent_dim >= 1, dual_lambda_init >= 0, dual_lr > 0, epsilon_slack > 0 required")
        if self.epochs < 0 or self.batch_size < 1 or self.temperature <= 0 or self.learning_rate <= 0:
            raise ValueError("invalid optimisation settings")

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d


@dataclass
class Representation:
    """phi(x) = net((x - offset) * scale); inputs are frames, optionally with time."""

    net: Mlp
    offset: np.ndarray
    scale: np.ndarray
    time_augmented: bool = False
    time_scale: float = 1.0

    def inputs(self, frames, phase=None):
        frames = np.atleast_2d(np.asarray(frames, dtype=float))
        if not self.time_augmented:
            return frames
        phase = np.broadcast_to(np.asarray(phase, dtype=float), (len(frames),))
        return np.concatenate([frames, self.time_scale * phase[:, None]], axis=1)

    def __call__(self, x):
        return self.net((np.asarray(x, dtype=float) - self.offset) * self.scale)

    def motion_inputs(self, motion):
        phase = np.arange(motion.length) / max(motion.length - 1, 1)
        return self.inputs(motion.frames, phase)


def metra_reward(phi, s, s_next, z):
    """<phi(s') - phi(s), z>, row-wise."""
    d = phi(s_next) - phi(s)
    z = np.asarray(z, dtype=float)
    if d.shape[-1] != z.shape[-1]:
        raise DimensionMismatch(f"latent dim {d.shape[-1]} != {z.shape[-1]}")
    return np.sum(d * z, axis=-1)


def _pairs(rep, dataset):
    """Adjacent (x_t, x_{t+1}) inputs per motion."""
    out = []
    for m in dataset.motions:
        x = rep.motion_inputs(m)
        out.append((x[:-1], x[1:]))
    return out


def _normalizer(dataset, config):
    """Per-coordinate standardization over all frames (constant coordinates left unscaled)."""
    probe = Representation(None, 0.0, 1.0, config.time_augmented, config.time_scale)
    xs = np.concatenate([probe.motion_inputs(m) for m in dataset.motions])
    std = xs.std(axis=0)
    return xs.mean(axis=0), 1.0 / np.where(std > 1e-6, std, 1.0)


def ground_metra_latent(dataset, config, seed, on_epoch=None):
    """Train phi; returns ``(representation, log rows)``.

    The loss is InfoNCE on unit latent-step directions (positives from the
    same motion, negatives from others) plus ``(|d| - 1)^2`` on adjacent
    steps ``d``, with the constraint ``|d| <= 1`` enforced by a dual
    variable ``lambda >= 0`` on ``min(eps, 1 - |d|^2) >= 0``.
    """
    rng = np.random.default_rng(seed)
    offset, scale = _normalizer(dataset, config)
    in_dim = dataset.d_obs + (1 if config.time_augmented else 0)
    spec = MlpSpec(in_dim, config.hidden_layers, config.latent_dim, config.hidden_activation, "linear")
    rep = Representation(Mlp.create(spec, rng), offset, scale, config.time_augmented, config.time_scale)
    pairs = _pairs(rep, dataset)
    n_motions = len(pairs)
    counts = np.array([len(p[0]) for p in pairs])
    opt = Adam(config.learning_rate)
    lam = config.dual_lambda_init
    log = []
    b, k_neg = config.batch_size, config.negatives_per_anchor if n_motions > 1 else 0
    for epoch in range(config.epochs):
        m = rng.integers(n_motions, size=b)
        picks = [m, m]
        if k_neg:
            picks.append(((m[:, None] + rng.integers(1, n_motions, size=(b, k_neg))) % n_motions).ravel())
        m_all = np.concatenate(picks)
        t_all = np.floor(rng.uniform(size=m_all.size) * counts[m_all]).astype(int)
        x0 = np.array([pairs[i][0][t] for i, t in zip(m_all, t_all)])
        x1 = np.array([pairs[i][1][t] for i, t in zip(m_all, t_all)])
        x = np.concatenate([x0, x1])
        out, cache = forward_with_cache(rep.net.params, spec, (x - offset) * scale)
        n = len(x0)
        d = out[n:] - out[:n]
        norm = np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-8)
        u = d / norm
        g_d = np.zeros_like(d)
        nce = 0.0
        if k_neg and config.latent_dim > 1:
            nce, g_a, g_p, g_n = losses.info_nce(u[:b], u[b : 2 * b], u[2 * b :].reshape(b, k_neg, -1),
                                                 config.temperature)
            g_u = np.concatenate([g_a, g_p, g_n.reshape(-1, config.latent_dim)])
            g_d += (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / norm
        gap = norm[:, 0] - 1.0
        adjacency = float(np.mean(gap**2))
        g_d += (2.0 * gap / n)[:, None] * u
        slack = np.minimum(config.epsilon_slack, 1.0 - norm[:, 0] ** 2)
        tight = (1.0 - norm[:, 0] ** 2) < config.epsilon_slack
        g_d += np.where(tight[:, None], 2.0 * lam * d / n, 0.0)
        grads = backward(rep.net.params, spec, cache, np.concatenate([-g_d, g_d]))
        rep.net.params = opt.step(rep.net.params, grads)
        lam = max(0.0, lam - config.dual_lr * float(slack.mean()))
        row = {"epoch": epoch, "infonce": float(nce), "adjacency": adjacency, "dual_lambda": lam,
               "step_norm_mean": float(norm.mean()), "step_norm_max": float(norm.max())}
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return rep, log


def adjacency_distances(rep, motion):
    z = rep(rep.motion_inputs(motion))
    return np.linalg.norm(np.diff(z, axis=0), axis=1)


def wraparound_jump(rep, motion):
    """Latent distance from the cycle's last frame to the next cycle's frame 1.

    Without time input this equals an ordinary adjacent step; with it the
    clock resets and the step is a discontinuity.
    """
    x = rep.motion_inputs(motion)
    end = x[-1:]
    restart = rep.inputs(motion.frames[1:2], 1.0 / max(motion.length - 1, 1))
    return float(np.linalg.norm(rep(end) - rep(restart)))


def line_residual(rep, motion):
    """Fraction of the latent image's spread off its principal line."""
    z = rep(rep.motion_inputs(motion))
    centred = z - z.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    extent = float(np.ptp(centred @ np.linalg.svd(centred)[2][0]))
    residual = float(np.sqrt(np.sum(sv[1:] ** 2) / len(z))) if len(sv) > 1 else 0.0
    return residual / extent if extent > 0 else 0.0


def telescoping_report(dataset, phi, z_samples):
    """Per motion: cumulative step rewards for every ``z`` and the endpoint identity."""
    z_samples = np.atleast_2d(z_samples)
    rows = []
    for m in dataset.motions:
        x = phi.motion_inputs(m) if hasattr(phi, "motion_inputs") else m.frames
        z_path = phi(x)
        steps = np.diff(z_path, axis=0) @ z_samples.T          # (l-1, n_z)
        cumulative = steps.sum(axis=0)
        endpoint = (z_path[-1] - z_path[0]) @ z_samples.T
        rows.append({
            "motion_id": m.id,
            "repetitive": is_repetitive(m),
            "cumulative": cumulative,
            "endpoint": endpoint,
            "identity_gap": float(np.max(np.abs(cumulative - endpoint))),
            "collapsed": bool(np.all(np.abs(cumulative) < COLLAPSE_TOL)),
        })
    return rows


def write_diagnostics_csv(path, dataset, rep, report):
    n_z = len(report[0]["cumulative"]) if report else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["motion_id", "repetitive", "collapsed"] + [f"cumulative_z{i}" for i in range(n_z)]
                   + ["adjacency_mean", "adjacency_min", "adjacency_max", "wraparound_jump"])
        for m, row in zip(dataset.motions, report):
            adj = adjacency_distances(rep, m)
            jump = wraparound_jump(rep, m) if row["repetitive"] else float("nan")
            w.writerow([m.id, int(row["repetitive"]), int(row["collapsed"]),
                        *[repr(float(c)) for c in row["cumulative"]],
                        repr(float(adj.mean())), repr(float(adj.min())), repr(float(adj.max())), repr(jump)])
