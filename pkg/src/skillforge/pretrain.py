"""Contrastive grounding of the latent sphere and its diagnostics.

The encoder maps a stacked state to a unit vector (the vMF mean). Training
pulls states of the same motion together and pushes other motions away with
InfoNCE at temperature ``1 / kappa``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import losses
from .approximator import Adam, Mlp, MlpSpec, backward, forward_with_cache
from .errors import DimensionMismatch
from .hypersphere import motion_embedding
from .motions import sample_contrastive_batch


@dataclass(frozen=True)
class PretrainConfig:
    kappa: float = 5.0
    epochs: int = 2000
    batch_size: int = 256
    negatives_per_anchor: int = 16
    learning_rate: float = 1e-3
    latent_dim: int = 8
    hidden_layers: tuple = (64, 64)
    # Reuse the other anchors' positives as negatives instead of fresh draws.
    in_batch_negatives: bool = False
    max_gap: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if not (self.kappa > 0 and self.learning_rate > 0):
            raise ValueError("kappa and learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.negatives_per_anchor < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and negatives_per_anchor >= 1 required")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")

    @property
    def temperature(self):
        return 1.0 / self.kappa

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d


def encoder_spec(input_dim, config):
    return MlpSpec(input_dim, config.hidden_layers, config.latent_dim, "relu", "normalize_to_sphere")


def info_nce_loss(anchor_emb, positive_emb, negative_embs, temperature):
    """InfoNCE for one anchor; always positive."""
    a = np.asarray(anchor_emb, dtype=float)
    p = np.asarray(positive_emb, dtype=float)
    n = np.atleast_2d(np.asarray(negative_embs, dtype=float))
    if a.shape != p.shape or n.shape[1] != a.shape[0]:
        raise DimensionMismatch(f"anchor {a.shape}, positive {p.shape}, negatives {n.shape}")
    value, *_ = losses.info_nce(a[None], p[None], n[None], temperature)
    return value


def _in_batch_negatives(batch, z_pos):
    """Every other positive in the batch, masked to those from a different motion."""
    b = len(z_pos)
    negatives = np.broadcast_to(z_pos[None], (b, b, z_pos.shape[1]))
    mask = batch.motion_index[None, :] != batch.motion_index[:, None]
    return negatives, mask


def contrastive_step(encoder, batch, config, optimizer):
    """One gradient step on a sampled batch; returns (new encoder, loss)."""
    b, k = len(batch.anchors), config.latent_dim
    if config.in_batch_negatives:
        x = np.concatenate([batch.anchors, batch.positives])
    else:
        x = np.concatenate([batch.anchors, batch.positives, batch.negatives.reshape(-1, batch.anchors.shape[1])])
    out, cache = forward_with_cache(encoder.params, encoder.spec, x)
    z_a, z_p = out[:b], out[b : 2 * b]
    if config.in_batch_negatives:
        negatives, mask = _in_batch_negatives(batch, z_p)
        value, g_a, g_p, g_n = losses.info_nce(z_a, z_p, negatives, config.temperature, mask)
        g_p = g_p + np.nan_to_num(g_n).sum(axis=0)
        g_out = np.concatenate([g_a, g_p])
    else:
        negatives = out[2 * b :].reshape(b, -1, k)
        value, g_a, g_p, g_n = losses.info_nce(z_a, z_p, negatives, config.temperature)
        g_out = np.concatenate([g_a, g_p, g_n.reshape(-1, k)])
    grads = backward(encoder.params, encoder.spec, cache, g_out)
    return Mlp(encoder.spec, optimizer.step(encoder.params, grads)), value


def pretrain_encoder(dataset, config, seed, encoder=None, on_epoch=None):
    """Run the contrastive epoch loop; returns ``(encoder, log rows)``.

    One epoch is one sampled batch. ``on_epoch(row)`` is called after each.
    """
    rng = np.random.default_rng(seed)
    if encoder is None:
        encoder = Mlp.create(encoder_spec(dataset.state_dim, config), rng)
    optimizer = Adam(config.learning_rate)
    log = []
    for epoch in range(config.epochs):
        batch = sample_contrastive_batch(dataset, config.batch_size, config.negatives_per_anchor, rng,
                                         config.max_gap)
        encoder, value = contrastive_step(encoder, batch, config, optimizer)
        stats = alignment_score(encoder, dataset)
        row = {"epoch": epoch, "loss": value, "alignment_mean": stats["mean"],
               "alignment_std": stats["std"], "max_between_cosine": stats["max_between_cosine"]}
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return encoder, log


def embed_motions(encoder, dataset):
    """Per-motion state embeddings (list of (l, k) arrays)."""
    lengths = [m.length for m in dataset.motions]
    flat = encoder(np.concatenate([dataset.stacked(i) for i in range(len(dataset))]))
    return np.split(flat, np.cumsum(lengths)[:-1])


def alignment_score(encoder, dataset):
    """Within-motion alignment per motion plus aggregate and separation stats."""
    per_motion, embeddings = {}, {}
    for m, z in zip(dataset.motions, embed_motions(encoder, dataset)):
        z_m = motion_embedding(z)
        embeddings[m.id] = z_m
        per_motion[m.id] = float(np.mean(z @ z_m))
    scores = np.array(list(per_motion.values()))
    zs = np.array(list(embeddings.values()))
    if len(zs) > 1:
        gram = zs @ zs.T
        max_between = float(np.max(gram[~np.eye(len(zs), dtype=bool)]))
    else:
        max_between = float("nan")
    return {"per_motion": per_motion, "embeddings": embeddings, "mean": float(scores.mean()),
            "std": float(scores.std()), "max_between_cosine": max_between}


def infonce_profile(s, c, temperature):
    """l(s) = -s/T + log(exp(s/T) + C), written as log1p(C exp(-s/T))."""
    return np.log1p(c * np.exp(-np.asarray(s, dtype=float) / temperature))


def infonce_profile_slope(s, c, temperature):
    return -(1.0 / temperature) * c / (np.exp(np.asarray(s, dtype=float) / temperature) + c)


def monotonicity_check(anchor, negatives, temperature, grid):
    """Is the InfoNCE loss strictly decreasing in the positive logit on ``grid``?

    ``C`` is the negatives' partition sum for ``anchor``. Returns
    ``(strictly_decreasing, max_violation)`` where the violation is the largest
    non-negative step between consecutive grid points.
    """
    anchor = np.asarray(anchor, dtype=float)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=float))
    c = float(np.sum(np.exp(negatives @ anchor / temperature))) if negatives.size else 0.0
    values = infonce_profile(np.sort(np.asarray(grid, dtype=float)), c, temperature)
    steps = np.diff(values)
    return bool(np.all(steps < 0.0)), float(max(0.0, steps.max(initial=0.0)))


def write_log_csv(path, rows):
    fields = ["epoch", "loss", "alignment_mean", "alignment_std", "max_between_cosine"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([r["epoch"], *[repr(float(r[f])) for f in fields[1:]]])


def write_latents_csv(path, encoder, dataset):
    """One row per (motion, frame) with the state's latent coordinates."""
    k = encoder.spec.output_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["motion_id", "frame_index"] + [f"z_{i}" for i in range(k)])
        for m, z in zip(dataset.motions, embed_motions(encoder, dataset)):
            for t, row in enumerate(z):
                w.writerow([m.id, t, *[repr(float(v)) for v in row]])


def simplex_cosine(n_motions):
    """Pairwise cosine of a regular simplex with ``n_motions`` vertices."""
    return -1.0 / (n_motions - 1) if n_motions > 1 else 1.0
