"""Loss catalog. Every loss returns ``(value, gradient(s) w.r.t. its inputs)``.

Values are batch means; gradients are already divided by the batch size so
they can be handed straight to :func:`skillforge.approximator.backward`.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionMismatch
from .hypersphere import mean_resultant_length, vmf_log_normalizer

LOG_2PI = math.log(2.0 * math.pi)


def _logsumexp(x, axis=-1):
    top = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(top, axis) + np.log(np.sum(np.exp(x - top), axis=axis))


def info_nce(anchor, positive, negatives, temperature, negative_mask=None):
    """Batched InfoNCE with cosine logits.

    anchor, positive: (B, k); negatives: (B, K, k); ``negative_mask`` (B, K)
    drops negatives where False.
    Returns (mean loss, d/d anchor, d/d positive, d/d negatives).
    """
    a = np.asarray(anchor, dtype=float)
    p = np.asarray(positive, dtype=float)
    n = np.asarray(negatives, dtype=float)
    if a.shape != p.shape or n.shape[0] != a.shape[0] or n.shape[2] != a.shape[1]:
        raise DimensionMismatch(f"anchor {a.shape}, positive {p.shape}, negatives {n.shape}")
    batch = a.shape[0]
    logits = np.concatenate([np.sum(a * p, axis=1)[:, None], np.einsum("bk,bjk->bj", a, n)], axis=1) / temperature
    if negative_mask is not None:
        logits[:, 1:] = np.where(negative_mask, logits[:, 1:], -np.inf)
    lse = _logsumexp(logits, axis=1)
    loss = lse - logits[:, 0]
    probs = np.exp(logits - lse[:, None])
    coef = probs.copy()
    coef[:, 0] -= 1.0
    coef /= temperature * batch
    grad_a = coef[:, :1] * p + np.einsum("bj,bjk->bk", coef[:, 1:], n)
    grad_p = coef[:, :1] * a
    grad_n = coef[:, 1:, None] * a[:, None, :]
    return float(loss.mean()), grad_a, grad_p, grad_n


def vmf_kl_loss(mu_live, mu_frozen, kappa, coefficient=1.0):
    """coefficient * mean KL(vMF(mu_live) || vMF(mu_frozen)); gradient w.r.t. mu_live."""
    mu_live = np.atleast_2d(mu_live)
    mu_frozen = np.atleast_2d(mu_frozen)
    scale = coefficient * kappa * mean_resultant_length(mu_live.shape[1], kappa)
    kl = scale * (1.0 - np.sum(mu_live * mu_frozen, axis=1))
    return float(kl.mean()), -scale * mu_frozen / mu_live.shape[0]


def vmf_nll(mu, z, kappa):
    """Mean of -log q(z|s) = -(log C_d(kappa) + kappa <mu, z>); gradient w.r.t. mu."""
    mu = np.atleast_2d(mu)
    z = np.atleast_2d(z)
    log_c = vmf_log_normalizer(mu.shape[1], kappa)
    nll = -(log_c + kappa * np.sum(mu * z, axis=1))
    return float(nll.mean()), -kappa * z / mu.shape[0]


def split_gaussian(out):
    k = out.shape[-1] // 2
    return out[..., :k], out[..., k:]


def gaussian_log_prob(mean, log_std, actions):
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std):
    return np.sum(log_std + 0.5 * (LOG_2PI + 1.0), axis=-1)


def ppo_surrogate(out, actions, old_log_prob, advantages, clip):
    """Clipped PPO surrogate (to minimize) on gaussian-head outputs.

    At the clip boundary the clipped branch is taken, so the ratio receives no
    gradient there. Returns (loss, d/d out, stats).
    """
    mean, log_std = split_gaussian(out)
    log_prob = gaussian_log_prob(mean, log_std, actions)
    ratio = np.exp(log_prob - old_log_prob)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_obj = ratio * advantages
    clipped_obj = clipped * advantages
    loss = -np.minimum(unclipped_obj, clipped_obj)
    active = ((ratio > 1.0 - clip) & (ratio < 1.0 + clip)) | (unclipped_obj < clipped_obj)
    batch = out.shape[0]
    d_logp = np.where(active, -advantages * ratio, 0.0) / batch
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    grad_mean = d_logp[:, None] * diff * inv_var
    grad_log_std = d_logp[:, None] * (diff * diff * inv_var - 1.0)
    stats = {
        "clip_fraction": float(np.mean(~active)),
        "approx_kl": float(np.mean(old_log_prob - log_prob)),
        "ratio_mean": float(ratio.mean()),
    }
    return float(loss.mean()), np.concatenate([grad_mean, grad_log_std], axis=1), stats


def entropy_bonus(out, coefficient):
    """-coefficient * mean entropy of the gaussian head (a loss term)."""
    _, log_std = split_gaussian(out)
    ent = gaussian_entropy(log_std)
    grad = np.concatenate([np.zeros_like(log_std), np.full_like(log_std, -coefficient / out.shape[0])], axis=1)
    return float(-coefficient * ent.mean()), grad


def value_mse(values, returns):
    """Mean squared error for a (B, 1) value head."""
    v = np.asarray(values, dtype=float).reshape(-1)
    diff = v - np.asarray(returns, dtype=float).reshape(-1)
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size).reshape(-1, 1)
