"""Goal reaching with a high-level policy that picks skill latents.

The high level emits a Gaussian sample that is normalized to a latent ``z``
and held for ``h_low`` steps of the frozen low-level policy. Reward per
low-level step is ``exp(-0.25 d_goal)`` plus, for styled tasks,
``exp(-8 (1 - <z, z_m>))``; a decision's reward is the mean over its steps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..envs import Termination
from ..errors import UnknownStyle
from .ppo import PpoLearner, PpoSettings, act, compute_gae, make_policy, make_value, normalize_advantages
from .train import _mean, policy_observation

LOG_FIELDS = ["epoch", "mean_reward", "success_rate", "final_distance_mean", "episodes_finished",
              "policy_loss", "value_loss", "entropy"]


@dataclass(frozen=True)
class DownstreamConfig:
    epochs: int = 300
    num_envs: int = 64
    horizon: int = 32          # high-level decisions per rollout
    h_low: int = 5
    episode_steps: int = 600   # low-level steps per episode
    r_goal: float = 0.5
    goal_extent: float = 8.0   # goals uniform in [-extent, extent]^2
    cycle_length: int = 60     # low-level phase wraps every cycle_length - 1 steps
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coefficient: float = 0.0
    ppo_epochs: int = 5
    minibatch_size: int = 512
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    init_log_std: float = 0.0
    hidden_layers: tuple = (64, 64)
    max_grad_norm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        ints = ("num_envs", "horizon", "h_low", "episode_steps", "cycle_length", "ppo_epochs", "minibatch_size")
        bad = [n for n in ints if getattr(self, n) < 1]
        if self.epochs < 0:
            bad.append("epochs")
        if not (self.r_goal > 0 and self.goal_extent > 0):
            bad.append("r_goal/goal_extent")
        if bad:
            raise ValueError(f"out of range: {', '.join(bad)}")

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d


def downstream_reward(position, goal, z, z_m=None):
    """exp(-0.25 ||goal - position||) [+ exp(-8 (1 - <z, z_m>))], row-wise."""
    d = np.linalg.norm(np.asarray(goal, dtype=float) - np.asarray(position, dtype=float), axis=-1)
    r = np.exp(-0.25 * d)
    if z_m is not None:
        r = r + np.exp(-8.0 * (1.0 - np.sum(np.asarray(z) * np.asarray(z_m), axis=-1)))
    return r


def resolve_style(style, latents):
    """``None`` / ``"freestyle"`` -> None, otherwise the motion embedding."""
    if style in (None, "freestyle"):
        return None
    if style not in latents:
        raise UnknownStyle(style)
    return np.asarray(latents[style], dtype=float)


def latent_from_action(a):
    return a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-8)


class GoalTask:
    """Batched goal-reaching episodes driven by the frozen low-level policy."""

    def __init__(self, dataset, low_policy, config, rng, env=None):
        self.dataset = dataset
        self.low = low_policy
        self.config = config
        self.rng = rng
        self.env = env or dataset.make_env()
        if not hasattr(self.env, "arena"):
            raise ValueError("goal tasks need an environment with an arena")
        self.k = low_policy.spec.input_dim - self.env.policy_frame_dim - 1

    @property
    def obs_dim(self):
        return 2 + self.env.policy_frame_dim

    def reset(self, n):
        """Start states (first frame of a uniformly drawn motion) and goals."""
        idx = self.rng.integers(len(self.dataset), size=n)
        states = np.array([self.env.state_from_frame(self.dataset.motions[i].frames[0]) for i in idx])
        goals = self.rng.uniform(-self.config.goal_extent, self.config.goal_extent, size=(n, 2))
        return states, goals

    def observe(self, states, goals):
        """Goal offset in the body frame (scaled by the arena) plus the egocentric frame."""
        frames = self.env.observe_batch(states)
        offset = goals - self.env.base_position(states)
        h = states[:, 4]
        c, s = np.cos(h), np.sin(h)
        body = np.stack([c * offset[:, 0] + s * offset[:, 1], -s * offset[:, 0] + c * offset[:, 1]], axis=1)
        return np.concatenate([body / self.env.arena, self.env.policy_frame(frames)], axis=1)

    def run_latent(self, states, goals, z, clock, z_m=None, record=None):
        """Hold ``z`` for h_low low-level steps.

        Returns (states, mean reward, fell mask, min goal distance seen, steps taken).
        If ``record`` is a list, the per-step states are appended to it.
        """
        cfg = self.config
        n = len(states)
        rewards = np.zeros(n)
        alive = np.ones(n, dtype=bool)
        min_dist = np.full(n, np.inf)
        taken = np.zeros(n, dtype=int)
        for j in range(cfg.h_low):
            phase = ((clock + j) % (cfg.cycle_length - 1)) / (cfg.cycle_length - 1)
            obs = policy_observation(self.env, self.env.observe_batch(states), phase, z)
            actions = act(self.low, obs, self.rng, deterministic=True)[0]
            nxt, _, why = self.env.step_batch(states, actions)
            states = np.where(alive[:, None], nxt, states)
            r = downstream_reward(self.env.base_position(states), goals, z, z_m)
            rewards += np.where(alive, r, 0.0)
            taken += alive
            dist = np.linalg.norm(goals - self.env.base_position(states), axis=1)
            min_dist = np.where(alive, np.minimum(min_dist, dist), min_dist)
            alive &= why != Termination.FELL
            if record is not None:
                record.append(states)
        return states, rewards / cfg.h_low, ~alive, min_dist, taken


class DownstreamTrainer:
    def __init__(self, dataset, low_policy, latents, style, config, seed):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.z_m = resolve_style(style, latents)
        self.style = style or "freestyle"
        self.task = GoalTask(dataset, low_policy, config, self.rng)
        policy = make_policy(self.task.obs_dim, self.task.k, self.rng, config.hidden_layers, config.init_log_std)
        value = make_value(self.task.obs_dim, self.rng, config.hidden_layers)
        self.learner = PpoLearner(policy, value, config.actor_lr, config.critic_lr, config.max_grad_norm)
        n = config.num_envs
        self.states, self.goals = self.task.reset(n)
        self.clock = np.zeros(n, dtype=int)
        self.best = np.full(n, np.inf)
        self.epoch = 0

    @property
    def policy(self):
        return self.learner.policy

    def _z_m(self, n):
        return None if self.z_m is None else np.tile(self.z_m, (n, 1))

    def run_epoch(self):
        cfg = self.config
        n = cfg.num_envs
        buf = {k: [] for k in ("obs", "actions", "logp", "rewards", "values", "next_values", "dones")}
        successes, finals = [], []
        for _ in range(cfg.horizon):
            obs = self.task.observe(self.states, self.goals)
            actions, logp = act(self.policy, obs, self.rng)
            values = self.learner.value(obs)[:, 0]
            z = latent_from_action(actions)
            self.states, rewards, fell, min_dist, taken = self.task.run_latent(
                self.states, self.goals, z, self.clock, self._z_m(n))
            self.clock += taken
            self.best = np.minimum(self.best, min_dist)
            timeout = self.clock >= cfg.episode_steps
            next_values = self.learner.value(self.task.observe(self.states, self.goals))[:, 0] * ~fell
            dones = fell | timeout
            for key, val in (("obs", obs), ("actions", actions), ("logp", logp), ("rewards", rewards),
                             ("values", values), ("next_values", next_values), ("dones", dones)):
                buf[key].append(val)
            ended = np.flatnonzero(dones)
            if ended.size:
                successes.extend((self.best[ended] <= cfg.r_goal).tolist())
                finals.extend(np.linalg.norm(self.goals[ended] - self.task.env.base_position(self.states[ended]),
                                             axis=1).tolist())
                new_states, new_goals = self.task.reset(ended.size)
                self.states[ended], self.goals[ended] = new_states, new_goals
                self.clock[ended] = 0
                self.best[ended] = np.inf
        batch = {k: np.array(v) for k, v in buf.items()}
        adv, returns = compute_gae(batch["rewards"], batch["values"], cfg.gamma, cfg.gae_lambda,
                                   batch["dones"], batch["next_values"])
        flat = lambda a: a.reshape(-1, *a.shape[2:])
        settings = PpoSettings(cfg.clip, cfg.entropy_coefficient, cfg.ppo_epochs, cfg.minibatch_size)
        stats = self.learner.update(flat(batch["obs"]), flat(batch["actions"]), flat(batch["logp"]),
                                    normalize_advantages(flat(adv)), flat(returns), settings, self.rng)
        row = {"epoch": self.epoch, "mean_reward": float(batch["rewards"].mean()),
               "success_rate": _mean(successes), "final_distance_mean": _mean(finals),
               "episodes_finished": len(successes), "policy_loss": stats["policy_loss"],
               "value_loss": stats["value_loss"], "entropy": stats["entropy"]}
        self.epoch += 1
        return row


def train_downstream(dataset, low_policy, latents, style, config, seed, on_epoch=None):
    """Train the high-level policy; the low-level policy is never updated."""
    trainer = DownstreamTrainer(dataset, low_policy, latents, style, config, seed)
    log = []
    for _ in range(config.epochs):
        row = trainer.run_epoch()
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return trainer, log


def rollout_hierarchy(dataset, high_policy, low_policy, latents, style, config, episodes, seed,
                      deterministic=True):
    """Full-length goal episodes with per-step traces and frames.

    An episode succeeds if the base comes within ``r_goal`` of the goal at
    any step before it falls or runs out of ``episode_steps``.
    """
    rng = np.random.default_rng(seed)
    task = GoalTask(dataset, low_policy, config, rng)
    z_m = resolve_style(style, latents)
    states, goals = task.reset(episodes)
    best = np.full(episodes, np.inf)
    fell_any = np.zeros(episodes, dtype=bool)
    clock = np.zeros(episodes, dtype=int)
    record = [states]
    chosen = []
    for _ in range(math.ceil(config.episode_steps / config.h_low)):
        obs = task.observe(states, goals)
        z = latent_from_action(act(high_policy, obs, rng, deterministic)[0])
        chosen.append(z)
        live = ~fell_any
        states, _, fell, min_dist, taken = task.run_latent(
            states, goals, z, clock, None if z_m is None else np.tile(z_m, (episodes, 1)), record)
        best = np.where(live, np.minimum(best, min_dist), best)
        fell_any |= fell
        clock += taken
    path = np.stack(record[: config.episode_steps + 1], axis=1)
    flat = path.reshape(-1, path.shape[-1])
    traces = task.env.base_position(flat).reshape(episodes, len(record[: config.episode_steps + 1]), 2)
    frames = task.env.observe_batch(flat).reshape(episodes, traces.shape[1], -1)
    return {"success": best <= config.r_goal, "min_distance": best, "goals": goals, "fell": fell_any,
            "alive_steps": np.minimum(clock, config.episode_steps), "traces": traces, "frames": frames,
            "latents": np.stack(chosen, axis=1)}
