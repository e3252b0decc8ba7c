"""Property suites behind ``skillforge verify``.

Each suite returns a :class:`Check`; ``run_suites`` collects them for the
pass/fail table. The constructions here (aligned encoders, linear encoders)
are also used by the acceptance tests.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import losses
from .approximator import Mlp, MlpSpec, flatten, forward, gradient, init_params, unflatten
from .hypersphere import (VmfParams, mean_resultant_length, motion_embedding, normalize, uniform_sphere_sample,
                          vmf_log_density, vmf_sample)
from .metra_lab import MetraConfig, ground_metra_latent, telescoping_report, wraparound_jump
from .motions import generate_reference_set, is_repetitive
from .pretrain import infonce_profile, infonce_profile_slope, monotonicity_check
from .skill_rl.skills import skill_reward


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name, fn):
    start = time.perf_counter()
    passed, detail = fn()
    return Check(name, bool(passed), detail, time.perf_counter() - start)


# -- vMF / InfoNCE equivalence -------------------------------------------------

def infonce_vmf_gap(rng, k=8, n_neg=16):
    """|InfoNCE probability - vMF softmax probability| for one random configuration."""
    kappa = float(rng.uniform(0.5, 50.0))
    anchor = normalize(rng.standard_normal(k))
    positive = normalize(rng.standard_normal(k))
    negatives = normalize(rng.standard_normal((n_neg, k)))
    cands = np.vstack([positive, negatives])
    log_dens = vmf_log_density(VmfParams(anchor, kappa), cands)
    soft = np.exp(log_dens - log_dens.max())
    p_vmf = soft[0] / soft.sum()
    loss, *_ = losses.info_nce(anchor[None], positive[None], negatives[None], 1.0 / kappa)
    return abs(math.exp(-loss) - p_vmf)


def suite_infonce_vmf(n=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = max(infonce_vmf_gap(rng) for _ in range(n))
    return worst <= 1e-12, f"max |p_infonce - p_vmf| = {worst:.2e} over {n} configs"


# -- monotonicity ----------------------------------------------------------------

def suite_monotonicity(n=50, seed=0, grid_points=1000):
    rng = np.random.default_rng(seed)
    grid = np.linspace(-1.0, 1.0, grid_points)
    worst_slope = 0.0
    for _ in range(n):
        temperature = float(rng.uniform(0.05, 2.0))
        anchor = normalize(rng.standard_normal(8))
        negatives = normalize(rng.standard_normal((int(rng.integers(1, 32)), 8)))
        strict, violation = monotonicity_check(anchor, negatives, temperature, grid)
        if not strict or violation > 0:
            return False, f"non-monotone profile (violation {violation:.2e})"
        c = float(np.sum(np.exp(negatives @ anchor / temperature)))
        h = 1e-6
        s = grid[1:-1]
        fd = (infonce_profile(s + h, c, temperature) - infonce_profile(s - h, c, temperature)) / (2 * h)
        worst_slope = max(worst_slope, float(np.max(np.abs(fd - infonce_profile_slope(s, c, temperature)))))
    return worst_slope <= 1e-6, f"strictly decreasing for {n} C; slope error {worst_slope:.2e}"


# -- reward optimality / quasi-concavity ----------------------------------------------

def aligned_linear_encoder(states, z_m, rng, rank_tol=1e-9):
    """Linear+normalize encoder sending every row of ``states`` exactly to ``z_m``.

    The weights live in the orthogonal complement of the states' affine span
    and map into the complement of ``z_m``, so other states get a strictly
    smaller cosine.
    """
    states = np.asarray(states, dtype=float)
    k = len(z_m)
    centre = states.mean(axis=0)
    _, sv, vt = np.linalg.svd(states - centre)
    rank = int(np.sum(sv > rank_tol * max(sv.max(initial=0.0), 1.0)))
    null = vt[rank:]                                  # (D - rank, D)
    if len(null) == 0:
        raise ValueError("states span the whole input space; no aligned linear encoder exists")
    z_perp = np.linalg.svd(np.eye(k) - np.outer(z_m, z_m))[0][:, : k - 1]   # (k, k-1)
    mix = rng.standard_normal((len(null), k - 1))
    weight = null.T @ mix @ z_perp.T                   # (D, k)
    bias = z_m - centre @ weight
    spec = MlpSpec(states.shape[1], (), k, "relu", "normalize_to_sphere")
    return Mlp(spec, [weight, bias])


def suite_reward_optimality(dataset=None, motion_id="straight", n_perturbed=1000, seed=0):
    rng = np.random.default_rng(seed)
    dataset = dataset or generate_reference_set("point_mass_2d")
    states = dataset.stacked(dataset.index(motion_id))
    z_m = normalize(rng.standard_normal(8))
    enc = aligned_linear_encoder(states, z_m, rng)
    on = skill_reward(enc, states, np.tile(z_m, (len(states), 1)))
    picks = states[rng.integers(len(states), size=n_perturbed)]
    off = skill_reward(enc, picks + 0.05 * rng.standard_normal(picks.shape), np.tile(z_m, (n_perturbed, 1)))
    worst_on = float(np.max(np.abs(on - 1.0)))
    ok = worst_on <= 1e-9 and bool(np.all(off < on.min()))
    return ok, f"max |r - 1| on motion {worst_on:.1e}; max perturbed r {off.max():.9f}"


def quasi_concavity_violations(rng, dim=31, k=8, n_pairs=1000, radius=0.5, level_drop=0.05):
    """Count convex combinations that leave the superlevel set of a linear+normalize reward."""
    spec = MlpSpec(dim, (), k, "relu", "normalize_to_sphere")
    enc = Mlp(spec, [rng.standard_normal((dim, k)) / math.sqrt(dim), rng.standard_normal(k)])
    s_star = rng.standard_normal(dim)
    z = enc(s_star)
    alpha = 1.0 - level_drop
    pool = s_star + radius * rng.uniform(-1, 1, size=(20 * n_pairs, dim)) / math.sqrt(dim)
    inside = pool[skill_reward(enc, pool, np.tile(z, (len(pool), 1))) >= alpha]
    if len(inside) < 2:
        raise ValueError("superlevel sample too small; shrink the radius")
    a = inside[rng.integers(len(inside), size=n_pairs)]
    b = inside[rng.integers(len(inside), size=n_pairs)]
    lam = rng.uniform(size=(n_pairs, 1))
    r = skill_reward(enc, lam * a + (1 - lam) * b, np.tile(z, (n_pairs, 1)))
    return int(np.sum(r < alpha - 1e-9)), len(inside)


def suite_quasi_concavity(n_refs=20, n_pairs=1000, seed=0):
    rng = np.random.default_rng(seed)
    total = 0
    for _ in range(n_refs):
        bad, _ = quasi_concavity_violations(rng, n_pairs=n_pairs)
        total += bad
    return total == 0, f"{total} violations over {n_refs} x {n_pairs} combinations"


# -- gradients -------------------------------------------------------------------

def gradcheck_catalog(seed, h=1e-5):
    """Worst relative error per loss for one seeded set of small nets."""
    rng = np.random.default_rng(seed)
    k, b, n_neg = 4, 3, 2
    enc = MlpSpec(3, (6,), k, "tanh", "normalize_to_sphere")
    pol = MlpSpec(3, (6,), 2, "tanh", "gaussian_mean_logstd")
    val = MlpSpec(3, (6,), 1, "tanh", "linear")
    x_enc = rng.standard_normal((b * (2 + n_neg), 3))
    x_small = rng.standard_normal((6, 3))
    frozen = normalize(rng.standard_normal((6, k)))
    actions, adv = rng.standard_normal((6, 2)), rng.standard_normal(6)
    old_logp, returns = rng.standard_normal(6) - 2.0, rng.standard_normal(6)

    def nce(out):
        v, ga, gp, gn = losses.info_nce(out[:b], out[b : 2 * b], out[2 * b :].reshape(b, n_neg, k), 0.5)
        return v, np.concatenate([ga, gp, gn.reshape(-1, k)])

    cases = {
        "info_nce": (enc, x_enc, nce),
        "vmf_kl": (enc, x_small, lambda o: losses.vmf_kl_loss(o, frozen, 5.0, 0.5)),
        "ppo_surrogate": (pol, x_small, lambda o: losses.ppo_surrogate(o, actions, old_logp, adv, 0.2)[:2]),
        "value_mse": (val, x_small, lambda o: losses.value_mse(o, returns)),
        "entropy": (pol, x_small, lambda o: losses.entropy_bonus(o, 0.1)),
    }
    out = {}
    for name, (spec, x, fn) in cases.items():
        params = [p + 0.3 * rng.standard_normal(p.shape) for p in init_params(spec, rng)]
        _, grads = gradient(params, spec, x, fn)
        flat = flatten(params)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (fn(forward(unflatten(up, spec), spec, x))[0] - fn(forward(unflatten(dn, spec), spec, x))[0]) / (2 * h)
        an = flatten(grads)
        out[name] = float(np.max(np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-6)))
    return out


def suite_gradients(seeds=20):
    worst = {}
    for seed in range(seeds):
        for name, err in gradcheck_catalog(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return max(worst.values()) <= 1e-4, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


# -- sampler ---------------------------------------------------------------------

def suite_vmf_sampler(seed=0, count=20_000):
    rng = np.random.default_rng(seed)
    mu = normalize(np.ones(8))
    means = []
    for kappa in (20.0, 100.0, 1000.0):
        cos = vmf_sample(VmfParams(mu, kappa), count, rng) @ mu
        se = cos.std(ddof=1) / math.sqrt(count)
        if abs(cos.mean() - mean_resultant_length(8, kappa)) > 3 * se:
            return False, f"kappa={kappa}: mean cosine {cos.mean():.5f} vs {mean_resultant_length(8, kappa):.5f}"
        means.append(cos.mean())
    return bool(means[0] < means[1] < means[2]), "mean cosine " + " < ".join(f"{m:.4f}" for m in means)


# -- telescoping collapse ----------------------------------------------------------

def suite_telescoping(train_epochs=0, seed=0):
    """``train_epochs=None`` trains for the config default."""
    worst, flagged, repetitive = 0.0, 0, 0
    for env in ("point_mass_2d", "planar_chain"):
        dataset = generate_reference_set(env)
        rep, _ = ground_metra_latent(dataset, MetraConfig() if train_epochs is None
                                 else MetraConfig(epochs=train_epochs), seed)
        zs = uniform_sphere_sample(np.random.default_rng(seed), rep.net.spec.output_dim, 100)
        for row in telescoping_report(dataset, rep, zs):
            worst = max(worst, row["identity_gap"])
            if row["repetitive"]:
                repetitive += 1
                flagged += row["collapsed"]
    ok = flagged == repetitive > 0 and worst <= 1e-9
    return ok, f"{flagged}/{repetitive} repetitive motions collapsed; identity gap {worst:.1e}"


def suite_wraparound(seed=0):
    dataset = generate_reference_set("point_mass_2d")
    rep, _ = ground_metra_latent(dataset, MetraConfig(time_augmented=True), seed)
    jumps = {m.id: wraparound_jump(rep, m) for m in dataset.motions if is_repetitive(m)}
    return all(j > 1.0 for j in jumps.values()), ", ".join(f"{k} jump {v:.2f}" for k, v in jumps.items())


def run_suites(fast=False):
    suites = [
        ("infonce-vmf equivalence", lambda: suite_infonce_vmf()),
        ("infonce monotonicity", lambda: suite_monotonicity()),
        ("reward optimality", lambda: suite_reward_optimality()),
        ("quasi-concavity", lambda: suite_quasi_concavity(n_refs=5 if fast else 20)),
        ("gradient checks", lambda: suite_gradients(seeds=5 if fast else 20)),
        ("vmf sampler concentration", lambda: suite_vmf_sampler()),
        ("telescoping collapse (untrained)", lambda: suite_telescoping(0)),
    ]
    if not fast:
        suites += [
            ("telescoping collapse (trained)", lambda: suite_telescoping(None)),
            ("time-augmented wrap-around jump", lambda: suite_wraparound()),
        ]
    return [_timed(name, fn) for name, fn in suites]


def format_table(checks):
    width = max(len(c.name) for c in checks)
    lines = [f"{'check'.ljust(width)}  result  seconds  detail"]
    for c in checks:
        lines.append(f"{c.name.ljust(width)}  {'PASS' if c.passed else 'FAIL':6}  {c.seconds:7.2f}  {c.detail}")
    return "\n".join(lines)
