"""Gaussian policies, GAE, and the clipped PPO update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import losses
from ..approximator import Adam, Mlp, MlpSpec, backward, forward_with_cache
from ..errors import LengthMismatch


def make_policy(obs_dim, action_dim, rng, hidden=(64, 64), init_log_std=-0.5):
    spec = MlpSpec(obs_dim, hidden, action_dim, "tanh", "gaussian_mean_logstd")
    bias = np.concatenate([np.zeros(action_dim), np.full(action_dim, init_log_std)])
    return Mlp.create(spec, rng, final_scale=0.01, final_bias=bias)


def make_value(obs_dim, rng, hidden=(64, 64)):
    return Mlp.create(MlpSpec(obs_dim, hidden, 1, "tanh", "linear"), rng, final_scale=1.0)


def act(policy, obs, rng, deterministic=False):
    """Sample (or take the mean) action; returns ``(actions, log_probs)``."""
    mean, log_std = losses.split_gaussian(np.atleast_2d(policy(obs)))
    if deterministic:
        actions = mean
    else:
        actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return actions, losses.gaussian_log_prob(mean, log_std, actions)


def compute_gae(rewards, values, gamma, lam, dones=None, next_values=None):
    """Generalized advantage estimates and returns along axis 0.

    ``values`` has one more entry than ``rewards`` (the bootstrap) unless
    ``next_values`` is given, in which case ``values[t]`` and
    ``next_values[t]`` bracket step ``t``; this lets episodes that end inside
    the window bootstrap from their own final state. ``next_values`` should be 0
    after a terminal (fall/deviation) step. ``dones`` cuts the recursion.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(rewards)
    if next_values is None:
        if len(values) != n + 1:
            raise LengthMismatch(f"need {n + 1} values for {n} rewards, got {len(values)}")
        next_values = values[1:]
        values = values[:-1]
    else:
        next_values = np.asarray(next_values, dtype=float)
        if len(values) != n or len(next_values) != n:
            raise LengthMismatch("values and next_values must match rewards")
    dones = np.zeros_like(rewards, dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    if len(dones) != n:
        raise LengthMismatch("dones must match rewards")
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0]) if n else 0.0
    for t in reversed(range(n)):
        delta = rewards[t] + gamma * next_values[t] - values[t]
        running = delta + gamma * lam * np.where(dones[t], 0.0, running)
        adv[t] = running
    return adv, adv + values


def normalize_advantages(adv):
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


@dataclass
class PpoSettings:
    clip: float = 0.2
    entropy_coefficient: float = 0.1
    ppo_epochs: int = 5
    minibatch_size: int = 2048
    value_coefficient: float = 1.0


class PpoLearner:
    """Owns the optimizers for a policy/value pair."""

    def __init__(self, policy, value, actor_lr, critic_lr, max_grad_norm=1.0):
        self.policy = policy
        self.value = value
        self.actor_opt = Adam(actor_lr, max_grad_norm=max_grad_norm)
        self.critic_opt = Adam(critic_lr, max_grad_norm=max_grad_norm)

    def update(self, obs, actions, old_log_probs, advantages, returns, settings, rng):
        return ppo_update(self, obs, actions, old_log_probs, advantages, returns, settings, rng)


def ppo_update(learner, obs, actions, old_log_probs, advantages, returns, settings, rng):
    """Clipped-surrogate, value and entropy updates over shuffled minibatches.

    Mutates ``learner.policy`` / ``learner.value`` params; returns mean stats
    and ``first_ratio`` (the ratios of the very first minibatch).
    """
    n = len(obs)
    mb = min(settings.minibatch_size, n)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": [], "approx_kl": []}
    first_ratio = None
    policy, value = learner.policy, learner.value
    for _ in range(settings.ppo_epochs):
        order = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = order[start : start + mb]
            out, cache = forward_with_cache(policy.params, policy.spec, obs[idx])
            p_loss, g_pol, p_stats = losses.ppo_surrogate(out, actions[idx], old_log_probs[idx],
                                                          advantages[idx], settings.clip)
            _, g_ent = losses.entropy_bonus(out, settings.entropy_coefficient)
            if first_ratio is None:
                mean, log_std = losses.split_gaussian(out)
                first_ratio = np.exp(losses.gaussian_log_prob(mean, log_std, actions[idx]) - old_log_probs[idx])
            grads = backward(policy.params, policy.spec, cache, g_pol + g_ent)
            policy.params = learner.actor_opt.step(policy.params, grads)

            v_out, v_cache = forward_with_cache(value.params, value.spec, obs[idx])
            v_loss, g_v = losses.value_mse(v_out, returns[idx])
            v_grads = backward(value.params, value.spec, v_cache, settings.value_coefficient * g_v)
            value.params = learner.critic_opt.step(value.params, v_grads)

            stats["policy_loss"].append(p_loss)
            stats["value_loss"].append(v_loss)
            stats["entropy"].append(float(np.mean(losses.gaussian_entropy(losses.split_gaussian(out)[1]))))
            stats["clip_fraction"].append(p_stats["clip_fraction"])
            stats["approx_kl"].append(p_stats["approx_kl"])
    summary = {k: float(np.mean(v)) for k, v in stats.items()}
    summary["first_ratio"] = first_ratio
    return summary
