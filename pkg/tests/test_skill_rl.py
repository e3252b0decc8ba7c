import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillforge import losses
from skillforge.approximator import Mlp, MlpSpec
from skillforge.errors import DimensionMismatch, LengthMismatch, UnknownStyle
from skillforge.evaluation import eval_imitation
from skillforge.hypersphere import VmfParams, mean_resultant_length, vmf_kl, vmf_log_normalizer, vmf_sample
from skillforge.motions import generate_reference_set
from skillforge.pretrain import PretrainConfig, encoder_spec
from skillforge.skill_rl.downstream import (
    DownstreamConfig,
    GoalTask,
    downstream_reward,
    latent_from_action,
    resolve_style,
    train_downstream,
)
from skillforge.skill_rl.ppo import (
    PpoLearner,
    PpoSettings,
    act,
    compute_gae,
    make_policy,
    make_value,
    normalize_advantages,
)
from skillforge.skill_rl.skills import (
    context_rewards,
    discovery_encoder_loss,
    motion_latents,
    sample_skill,
    skill_reward,
)
from skillforge.skill_rl.train import LOG_FIELDS, SkillTrainer, TrainConfig, train, write_log_csv

DESK = dict(entropy_coefficient=0.01, eps_term=0.1, minibatch_size=512)


@pytest.fixture(scope="module")
def small_encoder(point_mass_set):
    return Mlp.create(encoder_spec(point_mass_set.state_dim, PretrainConfig()), np.random.default_rng(7))


class Lookup:
    """Encoder stub returning fixed unit vectors for the first input column."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)
        self.spec = MlpSpec(1, (), self.table.shape[1], "tanh", "normalize_to_sphere")

    def __call__(self, x):
        return self.table[np.asarray(x, dtype=int)[:, 0]]


# -- skill sampling -----------------------------------------------------------------


def test_sample_skill_p1_always_imitates(point_mass_set, small_encoder):
    rng = np.random.default_rng(0)
    latents = motion_latents(small_encoder, point_mass_set)
    for _ in range(200):
        ctx, start = sample_skill(point_mass_set, small_encoder, 1.0, rng, latents=latents)
        assert ctx.imitation and ctx.source_motion_id == start.motion_id
        np.testing.assert_array_equal(ctx.z, latents[start.motion_id])


def test_sample_skill_without_precomputed_latents(point_mass_set, small_encoder):
    latents = motion_latents(small_encoder, point_mass_set)
    ctx, start = sample_skill(point_mass_set, small_encoder, 1.0, 3)
    np.testing.assert_allclose(ctx.z, latents[start.motion_id], atol=1e-15)


def test_sample_skill_p0_is_uniform(point_mass_set, small_encoder):
    rng = np.random.default_rng(1)
    zs = []
    for _ in range(100_000):
        ctx, start = sample_skill(point_mass_set, small_encoder, 0.0, rng, latents={})
        assert not ctx.imitation and ctx.source_motion_id is None
        zs.append(ctx.z)
    zs = np.array(zs)
    np.testing.assert_allclose(np.linalg.norm(zs, axis=1), 1.0, atol=1e-12)
    assert np.linalg.norm(zs.mean(axis=0)) <= 0.02


def test_sample_skill_imitation_fraction(point_mass_set, small_encoder):
    rng = np.random.default_rng(2)
    latents = motion_latents(small_encoder, point_mass_set)
    n, p = 100_000, 0.7
    hits = sum(sample_skill(point_mass_set, small_encoder, p, rng, latents=latents)[0].imitation for _ in range(n))
    assert abs(hits - n * p) <= 3 * math.sqrt(n * p * (1 - p))


# -- rewards ------------------------------------------------------------------------


def test_skill_reward_examples():
    z = np.array([0.6, 0.8])
    enc = Lookup([z, [-0.8, 0.6], -z])
    s = np.array([[0], [1], [2]])
    np.testing.assert_allclose(skill_reward(enc, s, np.tile(z, (3, 1))), [1.0, 0.0, -1.0], atol=1e-15)
    with pytest.raises(DimensionMismatch):
        skill_reward(enc, s, np.ones((3, 3)))


def test_context_rewards_route_by_flag():
    live = Lookup([[1.0, 0.0]])
    frozen = Lookup([[0.0, 1.0]])
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    r = context_rewards(live, frozen, np.zeros((2, 1)), z, [True, False])
    np.testing.assert_array_equal(r, [0.0, 1.0])


# -- discovery encoder loss ---------------------------------------------------------


def test_discovery_loss_identical_encoders_have_zero_kl(point_mass_set, small_encoder):
    s = point_mass_set.stacked(0)[:10]
    z = np.tile(np.eye(8)[0], (10, 1))
    loss, grads, kl = discovery_encoder_loss(small_encoder, small_encoder, s, s, z, np.ones(10, bool), 5.0, 0.5)
    assert loss == pytest.approx(0.0, abs=1e-12) and kl == pytest.approx(0.0, abs=1e-12)


def test_discovery_loss_at_mode(point_mass_set, small_encoder):
    s = point_mass_set.stacked(1)[3:4]
    z = small_encoder(s)
    loss, _, _ = discovery_encoder_loss(small_encoder, small_encoder, s, s, z, [False], 5.0, 0.5)
    assert loss == pytest.approx(-vmf_log_normalizer(8, 5.0) - 5.0, abs=1e-12)


def test_discovery_loss_mixes_rows(point_mass_set, small_encoder):
    s = point_mass_set.stacked(2)[:4]
    s_next = point_mass_set.stacked(2)[1:5]
    z = np.tile(np.eye(8)[1], (4, 1))
    other = Mlp.create(small_encoder.spec, np.random.default_rng(99))
    imitation = np.array([True, False, True, False])
    loss, _, kl = discovery_encoder_loss(other, small_encoder, s, s_next, z, imitation, 5.0, 0.5)
    nll, _ = losses.vmf_nll(other(s_next[~imitation]), z[~imitation], 5.0)
    kl_ref = vmf_kl(other(s[imitation]), small_encoder(s[imitation]), 5.0).mean()
    assert loss == pytest.approx(0.5 * nll + 0.5 * 0.5 * kl_ref, rel=1e-12)
    assert kl == pytest.approx(kl_ref, rel=1e-12)
    with pytest.raises(DimensionMismatch):
        discovery_encoder_loss(other, small_encoder, s, s_next[:3], z, imitation, 5.0, 0.5)


def test_vmf_kl_closed_form_matches_monte_carlo():
    rng = np.random.default_rng(3)
    k, kappa = 8, 5.0
    mu_p = rng.standard_normal(k)
    mu_p /= np.linalg.norm(mu_p)
    mu_q = mu_p + 0.8 * rng.standard_normal(k)
    mu_q /= np.linalg.norm(mu_q)
    samples = vmf_sample(VmfParams(mu_p, kappa), 1_000_000, rng)
    mc = float(np.mean(kappa * samples @ (mu_p - mu_q)))
    closed = float(vmf_kl(mu_p, mu_q, kappa))
    assert abs(mc - closed) / closed <= 0.01
    assert closed == pytest.approx(kappa * mean_resultant_length(k, kappa) * (1 - mu_p @ mu_q), rel=1e-12)


# -- GAE --------------------------------------------------------------------------------


def _gae_double_loop(r, v, gamma, lam):
    n = len(r)
    deltas = [r[t] + gamma * v[t + 1] - v[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** j * deltas[t + j] for j in range(n - t)) for t in range(n)])


def test_gae_one_step_and_monte_carlo_cases():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    adv, _ = compute_gae(r, np.zeros(5), 0.9, 0.0)
    np.testing.assert_array_equal(adv, r)
    adv, ret = compute_gae(r, np.zeros(5), 1.0, 1.0)
    np.testing.assert_array_equal(adv, [10.0, 9.0, 7.0, 4.0])
    np.testing.assert_array_equal(ret, adv)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.5, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_double_loop(seed, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v = rng.standard_normal(10), rng.standard_normal(11)
    adv, ret = compute_gae(r, v, gamma, lam)
    np.testing.assert_allclose(adv, _gae_double_loop(r, v, gamma, lam), atol=1e-10)
    np.testing.assert_allclose(ret, adv + v[:-1], atol=1e-12)


def test_gae_terminal_cuts_bootstrap():
    r = np.array([1.0, 1.0, 1.0])
    v = np.array([0.5, 0.5, 0.5])
    nv = np.array([0.5, 0.0, 0.5])
    adv, _ = compute_gae(r, v, 0.9, 0.8, dones=[False, True, False], next_values=nv)
    d2 = 1.0 + 0.9 * 0.5 - 0.5
    d1 = 1.0 - 0.5
    d0 = 1.0 + 0.9 * 0.5 - 0.5
    np.testing.assert_allclose(adv, [d0 + 0.72 * d1, d1, d2], atol=1e-15)


def test_gae_length_errors():
    with pytest.raises(LengthMismatch):
        compute_gae(np.ones(3), np.ones(3), 0.9, 0.9)
    with pytest.raises(LengthMismatch):
        compute_gae(np.ones(3), np.ones(3), 0.9, 0.9, dones=np.zeros(2), next_values=np.ones(3))


def test_normalize_advantages():
    a = normalize_advantages(np.array([1.0, 2.0, 3.0, 4.0]))
    assert a.mean() == pytest.approx(0.0, abs=1e-12) and a.std() == pytest.approx(1.0, abs=1e-6)


# -- PPO ----------------------------------------------------------------------------------


def _learner(rng, obs_dim=3, action_dim=2, log_std=-0.5):
    return PpoLearner(make_policy(obs_dim, action_dim, rng, (16,), log_std), make_value(obs_dim, rng, (16,)),
                      3e-4, 1e-3)


def test_first_ratio_is_one():
    rng = np.random.default_rng(0)
    learner = _learner(rng)
    obs = rng.standard_normal((256, 3))
    actions, logp = act(learner.policy, obs, rng)
    stats = learner.update(obs, actions, logp, rng.standard_normal(256), rng.standard_normal(256),
                           PpoSettings(minibatch_size=64, ppo_epochs=2), rng)
    np.testing.assert_allclose(stats["first_ratio"], 1.0, atol=1e-12)


def test_zero_advantage_leaves_only_the_entropy_term():
    rng = np.random.default_rng(1)
    obs = rng.standard_normal((64, 3))
    for coef in (0.0, 0.1):
        learner = _learner(np.random.default_rng(2))
        before = [p.copy() for p in learner.policy.params]
        actions, logp = act(learner.policy, obs, rng)
        _, log_std0 = losses.split_gaussian(learner.policy(obs))
        learner.update(obs, actions, logp, np.zeros(64), np.zeros(64),
                       PpoSettings(entropy_coefficient=coef, minibatch_size=64, ppo_epochs=1), rng)
        unchanged = all(np.array_equal(a, b) for a, b in zip(before, learner.policy.params))
        _, log_std1 = losses.split_gaussian(learner.policy(obs))
        if coef == 0.0:
            assert unchanged
        else:
            assert not unchanged and log_std1.mean() > log_std0.mean()


def test_clipped_branch_has_no_ratio_gradient():
    out = np.array([[0.0, 0.0]])
    action = np.array([[0.1]])
    logp = losses.gaussian_log_prob(out[:, :1], out[:, 1:], action)
    for r, expect_zero in ((1.2, True), (1.25, True), (1.1, False)):
        _, grad, _ = losses.ppo_surrogate(out, action, logp - math.log(r), np.array([1.0]), 0.2)
        assert np.all(grad == 0) == expect_zero


def test_bandit_learns_rewarded_arm():
    rng = np.random.default_rng(4)
    learner = PpoLearner(make_policy(1, 1, rng, (8,), 0.0), make_value(1, rng, (8,)), 3e-3, 1e-2)
    settings_ = PpoSettings(clip=0.2, entropy_coefficient=0.0, ppo_epochs=1, minibatch_size=128)
    obs = np.ones((128, 1))
    for _ in range(300):
        actions, logp = act(learner.policy, obs, rng)
        rewards = (actions[:, 0] > 0).astype(float)
        adv = normalize_advantages(rewards - learner.value(obs)[:, 0])
        learner.update(obs, actions, logp, adv, rewards, settings_, rng)
    mean, log_std = losses.split_gaussian(learner.policy(obs[:1]))
    p_right = 0.5 * (1 + math.erf(float(mean[0, 0]) / (math.exp(float(log_std[0, 0])) * math.sqrt(2))))
    assert p_right >= 0.95


# -- training loop --------------------------------------------------------------------------


def test_two_epoch_runs_are_identical(tmp_path, point_mass_set, small_encoder):
    cfg = TrainConfig(epochs=2, num_envs=8, horizon=8, minibatch_size=32)
    _, a = train(point_mass_set, small_encoder, cfg, seed=5, out_dir=tmp_path / "a")
    _, b = train(point_mass_set, small_encoder, cfg, seed=5, out_dir=tmp_path / "b")
    write_log_csv(tmp_path / "a.csv", a)
    write_log_csv(tmp_path / "b.csv", b)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for name in ("policy.bin", "value.bin", "discovery_encoder.bin", "run.json", "policy.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(LOG_FIELDS)


def test_discovery_only_never_computes_kl_and_drifts(point_mass_set, small_encoder):
    cfg = TrainConfig(imitation_ratio=0.0, epochs=5, num_envs=16, horizon=16, minibatch_size=64)
    trainer, log = train(point_mass_set, small_encoder, cfg, seed=1)
    assert all(row["encoder_kl"] == 0.0 for row in log)
    assert all(math.isnan(row["mean_reward_imitation"]) for row in log)
    x = np.concatenate([point_mass_set.stacked(i) for i in range(len(point_mass_set))])
    assert np.mean(np.sum(trainer.live(x) * small_encoder(x), axis=1)) < 1.0


def test_deviation_ends_imitation_episodes(point_mass_set, small_encoder):
    cfg = TrainConfig(imitation_ratio=1.0, epochs=1, num_envs=16, horizon=16, minibatch_size=64, eps_term=0.05)
    trainer = SkillTrainer(point_mass_set, small_encoder, cfg, seed=2)
    batch, errors, _ = trainer.rollout()
    errors = np.array(errors)
    assert np.all(batch["dones"].reshape(-1)[errors > 0.05])


def test_interrupt_still_writes_checkpoint(tmp_path, point_mass_set, small_encoder):
    cfg = TrainConfig(epochs=10, num_envs=4, horizon=4, minibatch_size=16)

    def stop(row):
        if row["epoch"] == 1:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(point_mass_set, small_encoder, cfg, seed=0, out_dir=tmp_path, on_epoch=stop)
    assert (tmp_path / "policy.bin").exists() and '"epochs_completed": 2' in (tmp_path / "run.json").read_text()


def test_config_ranges():
    with pytest.raises(ValueError):
        TrainConfig(imitation_ratio=1.5)
    with pytest.raises(ValueError):
        TrainConfig(clip=1.0)
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)


def test_single_motion_imitation_within_path_budget(pretrained, point_mass_set):
    enc, _ = pretrained(0)
    one = point_mass_set.subset(["straight"])
    trainer, _ = train(one, enc, TrainConfig(imitation_ratio=1.0, epochs=200, **DESK), seed=11)
    z = motion_latents(enc, one)["straight"]
    res = eval_imitation(trainer.policy, one, "straight", z, episodes=10, seed=0, deterministic=True)
    assert res["cartesian_error"] <= 0.2 * res["path_length"]


# -- downstream -----------------------------------------------------------------------------


def test_downstream_reward_examples():
    z = np.array([0.0, 1.0])
    g = np.array([1.0, 2.0])
    assert downstream_reward(g, g, z, z) == 2.0
    assert downstream_reward([0.0, 0.0], [4.0, 0.0], z) == pytest.approx(math.exp(-1.0), abs=1e-15)
    assert downstream_reward(g, g, z, np.array([1.0, 0.0])) == pytest.approx(1.0 + math.exp(-8.0), abs=1e-15)


def test_style_resolution():
    latents = {"straight": np.array([1.0, 0.0])}
    assert resolve_style("freestyle", latents) is None and resolve_style(None, latents) is None
    np.testing.assert_array_equal(resolve_style("straight", latents), [1.0, 0.0])
    with pytest.raises(UnknownStyle):
        resolve_style("moonwalk", latents)


def test_latent_from_action_is_unit():
    z = latent_from_action(np.array([[3.0, 4.0], [0.0, -2.0]]))
    np.testing.assert_allclose(z, [[0.6, 0.8], [0.0, -1.0]], atol=1e-15)


def test_low_level_policy_stays_frozen(point_mass_set, small_encoder):
    low, _ = train(point_mass_set, small_encoder, TrainConfig(epochs=1, num_envs=4, horizon=4, minibatch_size=16), 0)
    before = [p.copy() for p in low.policy.params]
    latents = motion_latents(small_encoder, point_mass_set)
    cfg = DownstreamConfig(epochs=2, num_envs=4, horizon=4, minibatch_size=16)
    trainer, log = train_downstream(point_mass_set, low.policy, latents, "straight", cfg, seed=0)
    assert len(log) == 2
    for a, b in zip(before, low.policy.params):
        np.testing.assert_array_equal(a, b)
    assert trainer.policy.spec.output_dim == small_encoder.spec.output_dim


def test_goal_task_reset_and_observation(point_mass_set, small_encoder):
    low, _ = train(point_mass_set, small_encoder, TrainConfig(epochs=0), 0)
    cfg = DownstreamConfig()
    task = GoalTask(point_mass_set, low.policy, cfg, np.random.default_rng(0))
    states, goals = task.reset(1000)
    assert np.all(np.abs(goals) <= cfg.goal_extent)
    assert task.observe(states, goals).shape == (1000, task.obs_dim)
