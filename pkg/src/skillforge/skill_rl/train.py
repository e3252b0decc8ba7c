"""Parallel imitation / discovery training.

``num_envs`` persistent environments are stepped together for ``horizon``
steps per epoch. Each finished episode is replaced by a fresh context from
:func:`sample_skill`, so imitation and discovery share every batch.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..approximator import Adam, Mlp
from ..envs import Termination
from .ppo import PpoLearner, PpoSettings, act, compute_gae, make_policy, make_value, normalize_advantages
from .skills import context_rewards, discovery_encoder_loss, motion_latents, sample_skill

LOG_FIELDS = ["epoch", "mean_reward_imitation", "mean_reward_discovery", "mean_cartesian_error",
              "episode_len_mean", "encoder_kl", "policy_loss", "value_loss", "entropy"]


@dataclass(frozen=True)
class TrainConfig:
    imitation_ratio: float = 0.7
    kl_coefficient: float = 0.5
    entropy_coefficient: float = 0.1
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    ppo_epochs: int = 5
    horizon: int = 32
    minibatch_size: int = 2048
    num_envs: int = 64
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    encoder_lr: float = 3e-4
    epochs: int = 500
    kappa: float = 5.0
    eps_term: float = 0.5
    init_log_std: float = -0.5
    hidden_layers: tuple = (64, 64)
    max_grad_norm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        checks = {
            "imitation_ratio": 0.0 <= self.imitation_ratio <= 1.0,
            "kl_coefficient": self.kl_coefficient >= 0.0,
            "entropy_coefficient": self.entropy_coefficient >= 0.0,
            "gamma": 0.0 < self.gamma <= 1.0,
            "gae_lambda": 0.0 < self.gae_lambda <= 1.0,
            "clip": 0.0 < self.clip < 1.0,
            "kappa": self.kappa > 0.0,
            "eps_term": self.eps_term > 0.0,
        }
        for name in ("ppo_epochs", "horizon", "minibatch_size", "num_envs", "epochs"):
            checks[name] = getattr(self, name) >= (0 if name == "epochs" else 1)
        for name in ("actor_lr", "critic_lr", "encoder_lr"):
            checks[name] = getattr(self, name) > 0.0
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"out of range: {', '.join(bad)}")

    def ppo_settings(self):
        return PpoSettings(self.clip, self.entropy_coefficient, self.ppo_epochs, self.minibatch_size)

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d


def policy_observation(env, frames, phase, z):
    """Egocentric single frame, phase and latent, row-wise."""
    return np.concatenate([env.policy_frame(frames), np.asarray(phase)[:, None], z], axis=1)


def config_hash(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


class SkillTrainer:
    """State of one training run; :meth:`run_epoch` does rollout plus updates."""

    def __init__(self, dataset, frozen_encoder, config, seed):
        self.dataset = dataset
        self.frozen = frozen_encoder
        self.live = frozen_encoder.copy()
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.env = dataset.make_env(eps_term=config.eps_term)
        self.latents = motion_latents(frozen_encoder, dataset)
        self.k = frozen_encoder.spec.output_dim
        obs_dim = self.env.policy_frame_dim + 1 + self.k
        policy = make_policy(obs_dim, self.env.action_dim, self.rng, config.hidden_layers, config.init_log_std)
        value = make_value(obs_dim, self.rng, config.hidden_layers)
        self.learner = PpoLearner(policy, value, config.actor_lr, config.critic_lr, config.max_grad_norm)
        self.encoder_opt = Adam(config.encoder_lr, max_grad_norm=config.max_grad_norm)
        self.lengths = np.array([m.length for m in dataset.motions])
        self.epoch = 0
        self.last_update = None
        n = config.num_envs
        self.states = np.zeros((n, self.env.state_dim))
        self.motion = np.zeros(n, dtype=int)
        self.t = np.zeros(n, dtype=int)
        self.z = np.zeros((n, self.k))
        self.imitation = np.zeros(n, dtype=bool)
        self.window = np.zeros((n, dataset.n_stack, dataset.d_obs))
        self.ep_len = np.zeros(n, dtype=int)
        for i in range(n):
            self._reset(i)

    @property
    def policy(self):
        return self.learner.policy

    @property
    def value(self):
        return self.learner.value

    def _reset(self, i):
        ctx, start = sample_skill(self.dataset, self.frozen, self.config.imitation_ratio, self.rng,
                                  self.env, self.latents)
        mi = self.dataset.index(start.motion_id)
        self.states[i] = start.state
        self.motion[i] = mi
        self.t[i] = start.frame_index
        self.z[i] = ctx.z
        self.imitation[i] = ctx.imitation
        stacked = self.dataset.stacked(mi)[start.frame_index]
        self.window[i] = stacked[1:].reshape(self.dataset.n_stack, self.dataset.d_obs)
        self.ep_len[i] = 0

    def _phase(self):
        return self.t / (self.lengths[self.motion] - 1)

    def _stacked(self):
        return np.concatenate([self._phase()[:, None], self.window.reshape(len(self.t), -1)], axis=1)

    def _obs(self):
        return policy_observation(self.env, self.window[:, -1], self._phase(), self.z)

    def _reference(self):
        """Next reference frame for imitation rows, NaN for discovery rows."""
        ref = np.full((len(self.t), self.dataset.d_obs), np.nan)
        for i in np.flatnonzero(self.imitation):
            ref[i] = self.dataset.motions[self.motion[i]].frames[self.t[i] + 1]
        return ref

    def rollout(self):
        cfg = self.config
        n, h = cfg.num_envs, cfg.horizon
        buf = {"obs": [], "s": [], "s_next": [], "actions": [], "logp": [], "rewards": [],
               "values": [], "dones": [], "z": [], "imitation": []}
        errors, episode_lengths = [], []
        for _ in range(h):
            obs = self._obs()
            s = self._stacked()
            actions, logp = act(self.policy, obs, self.rng)
            values = self.value(obs)[:, 0]
            ref = self._reference()
            truncate = self.t + 1 >= self.lengths[self.motion] - 1
            nxt, frames, reasons = self.env.step_batch(self.states, actions, ref, cfg.eps_term, truncate)
            self.states = nxt
            self.window = np.concatenate([self.window[:, 1:], frames[:, None]], axis=1)
            self.t = self.t + 1
            s_next = self._stacked()
            rewards = context_rewards(self.live, self.frozen, s_next, self.z, self.imitation)
            if self.imitation.any():
                errors.extend(self.env.cartesian_error(frames[self.imitation], ref[self.imitation]).tolist())
            dones = reasons != Termination.NONE
            for key, val in (("obs", obs), ("s", s), ("s_next", s_next), ("actions", actions), ("logp", logp),
                             ("rewards", rewards), ("values", values), ("dones", dones),
                             ("z", self.z.copy()), ("imitation", self.imitation.copy())):
                buf[key].append(val)
            self.ep_len += 1
            for i in np.flatnonzero(dones):
                episode_lengths.append(int(self.ep_len[i]))
                self._reset(i)
        batch = {k: np.array(v) for k, v in buf.items()}
        batch["last_values"] = self.value(self._obs())[:, 0]
        return batch, errors, episode_lengths

    def update(self, batch):
        cfg = self.config
        dones = batch["dones"]
        values = batch["values"]
        # Every episode end (motion end, fall, deviation) is terminal.
        next_values = np.concatenate([values[1:], batch["last_values"][None]]) * (~dones)
        adv, returns = compute_gae(batch["rewards"], values, cfg.gamma, cfg.gae_lambda, dones, next_values)
        flat = lambda a: a.reshape(-1, *a.shape[2:])
        adv = normalize_advantages(flat(adv))
        stats = self.learner.update(flat(batch["obs"]), flat(batch["actions"]), flat(batch["logp"]), adv,
                                    flat(returns), cfg.ppo_settings(), self.rng)
        enc_loss, enc_grads, kl = discovery_encoder_loss(
            self.live, self.frozen, flat(batch["s"]), flat(batch["s_next"]), flat(batch["z"]),
            flat(batch["imitation"]), cfg.kappa, cfg.kl_coefficient)
        self.live = Mlp(self.live.spec, self.encoder_opt.step(self.live.params, enc_grads))
        stats["encoder_loss"] = enc_loss
        stats["encoder_kl"] = kl
        self.last_update = stats
        return stats

    def run_epoch(self):
        batch, errors, episode_lengths = self.rollout()
        stats = self.update(batch)
        imit = batch["imitation"]
        row = {
            "epoch": self.epoch,
            "mean_reward_imitation": _mean(batch["rewards"][imit]),
            "mean_reward_discovery": _mean(batch["rewards"][~imit]),
            "mean_cartesian_error": _mean(errors),
            "episode_len_mean": _mean(episode_lengths),
            "encoder_kl": stats["encoder_kl"],
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
        }
        self.epoch += 1
        return row

    def save(self, out_dir, seed):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.policy.save(out / "policy", seed, self.epoch)
        self.value.save(out / "value", seed, self.epoch)
        self.live.save(out / "discovery_encoder", seed, self.epoch)
        manifest = {"config": self.config.to_dict(), "config_hash": config_hash(self.config.to_dict()),
                    "seed": int(seed), "epochs_completed": self.epoch,
                    "dataset_hash": self.dataset.content_hash()}
        (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _mean(values):
    values = np.asarray(values, dtype=float)
    return float(values.mean()) if values.size else math.nan


def write_log_csv(path, rows, fields=LOG_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([r[fields[0]], *[repr(float(r[f])) for f in fields[1:]]])


def train(dataset, frozen_encoder, config, seed, out_dir=None, on_epoch=None):
    """Run ``config.epochs`` epochs; returns ``(trainer, log rows)``.

    With ``out_dir`` the log and checkpoints are written at the end, and also
    when the run is interrupted.
    """
    trainer = SkillTrainer(dataset, frozen_encoder, config, seed)
    log = []
    try:
        for _ in range(config.epochs):
            row = trainer.run_epoch()
            log.append(row)
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if out_dir is not None:
            trainer.save(out_dir, seed)
            write_log_csv(Path(out_dir) / "train_log.csv", log)
    return trainer, log
