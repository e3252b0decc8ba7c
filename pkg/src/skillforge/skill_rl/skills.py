"""Skill contexts, the shared skill reward, and the discovery-encoder loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import losses
from ..approximator import backward, forward_with_cache
from ..errors import DimensionMismatch
from ..hypersphere import motion_embedding, uniform_sphere_sample
from ..motions import rsi_sample


@dataclass(frozen=True)
class SkillContext:
    z: np.ndarray
    imitation: bool
    source_motion_id: str | None = None

    def __post_init__(self):
        if self.imitation and self.source_motion_id is None:
            raise ValueError("imitation contexts need a source motion")


def motion_latents(encoder, dataset):
    """z_m for every motion, keyed by id, from the given (frozen) encoder."""
    return {m.id: motion_embedding(encoder(dataset.stacked(i))) for i, m in enumerate(dataset.motions)}


def sample_skill(dataset, frozen_encoder, p, seed, env=None, latents=None):
    """Draw a context and an RSI start; returns ``(SkillContext, RsiSample)``.

    With probability ``p`` the context imitates the RSI motion with its
    embedding; otherwise ``z`` is a uniform draw on the sphere. ``latents``
    may carry precomputed motion embeddings.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    imitation = bool(rng.random() < p)
    start = rsi_sample(dataset, rng, env)
    if imitation:
        if latents is None:
            z = motion_embedding(frozen_encoder(dataset.stacked(dataset.index(start.motion_id))))
        else:
            z = latents[start.motion_id]
        return SkillContext(np.asarray(z, dtype=float), True, start.motion_id), start
    k = frozen_encoder.spec.output_dim
    return SkillContext(uniform_sphere_sample(rng, k, 1)[0], False, None), start


def skill_reward(encoder, s_next, z, kappa=None):
    """<mu(s'), z> in [-1, 1]; batched over rows of ``s_next`` / ``z``.

    The affine constants of the vMF log-likelihood (log-normalizer, prior and
    the ``kappa`` scale) are dropped, so ``kappa`` is accepted but unused.
    """
    mu = encoder(s_next)
    z = np.asarray(z, dtype=float)
    if mu.shape[-1] != z.shape[-1]:
        raise DimensionMismatch(f"latent dim {mu.shape[-1]} != {z.shape[-1]}")
    return np.sum(mu * z, axis=-1)


def context_rewards(live, frozen, s_next, z, imitation):
    """Per-row reward routing imitation rows to ``frozen`` and discovery rows to ``live``.

    Both branches go through :func:`skill_reward`; only the encoder differs.
    """
    s_next = np.atleast_2d(s_next)
    z = np.atleast_2d(z)
    imitation = np.asarray(imitation, dtype=bool)
    r = np.empty(len(s_next))
    for mask, enc in ((imitation, frozen), (~imitation, live)):
        if mask.any():
            r[mask] = skill_reward(enc, s_next[mask], z[mask])
    return r


def discovery_encoder_loss(live, frozen, s, s_next, z, imitation, kappa, alpha):
    """Mean over the batch of the discovery NLL and the alpha-weighted KL anchor.

    Discovery rows contribute ``-log q(z | s')``; imitation rows contribute
    ``alpha * KL(q_live(.|s) || q_frozen(.|s))`` in closed form. Returns
    ``(loss, parameter gradients, mean KL over imitation rows)``.
    """
    s = np.atleast_2d(s)
    s_next = np.atleast_2d(s_next)
    z = np.atleast_2d(z)
    imitation = np.asarray(imitation, dtype=bool)
    n = len(s)
    if not (len(s_next) == len(z) == len(imitation) == n):
        raise DimensionMismatch("batch fields have different lengths")
    # Row i feeds s' for discovery and s for imitation.
    x = np.where(imitation[:, None], s, s_next)
    mu, cache = forward_with_cache(live.params, live.spec, x)
    grad = np.zeros_like(mu)
    total, kl_mean = 0.0, 0.0
    disc = ~imitation
    if disc.any():
        val, g = losses.vmf_nll(mu[disc], z[disc], kappa)
        total += val * disc.sum() / n
        grad[disc] = g * disc.sum() / n
    if imitation.any():
        target = frozen(s[imitation])
        val, g = losses.vmf_kl_loss(mu[imitation], target, kappa, alpha)
        total += val * imitation.sum() / n
        grad[imitation] = g * imitation.sum() / n
        kl_mean = val / alpha if alpha > 0 else float(
            losses.vmf_kl_loss(mu[imitation], target, kappa, 1.0)[0])
    return total, backward(live.params, live.spec, cache, grad), kl_mean
