import json

import numpy as np
import pytest

from skillforge.errors import UnknownMotion, UnknownStyle
from skillforge.evaluation import (
    endpoint_dispersion,
    eval_discovery,
    eval_downstream,
    eval_imitation,
    goal_success,
    motion_fid,
    random_actor,
    reference_features,
    report_json,
    rollout_skill,
    tracking_errors,
    window_features,
    write_traces_csv,
)
from skillforge.hypersphere import GaussianFeatureStats, frechet_distance, mean_resultant_length
from skillforge.motions import DEFAULT_RECIPES, scripted_rollout
from skillforge.skill_rl.downstream import DownstreamConfig, GoalTask
from skillforge.skill_rl.ppo import make_policy
from skillforge.skill_rl.train import TrainConfig, train

Z8 = np.eye(8)[0]


def _replay_actor(point_mass_set, motion_id):
    """Open-loop replay of the recipe's scripted actions."""
    env = point_mass_set.make_env()
    _, kind, params = next(r for r in DEFAULT_RECIPES["point_mass_2d"] if r[0] == motion_id)
    _, _, actions = scripted_rollout(env, kind, dict(params), point_mass_set.get(motion_id).length)
    step = {"t": 0}

    def actor(obs, rng):
        a = np.tile(actions[step["t"]], (len(obs), 1))
        step["t"] += 1
        return a

    return actor


def test_open_loop_replay_has_zero_error_and_fid(point_mass_set):
    res = eval_imitation(None, point_mass_set, "arc_left", Z8, episodes=1, seed=0,
                         actor=_replay_actor(point_mass_set, "arc_left"))
    assert res["cartesian_error"] <= 1e-9
    assert res["fid"] <= 1e-6
    assert res["deviated_fraction"] == 0.0


def test_random_policy_deviates(point_mass_set):
    for mid in ("straight", "arc_left", "zigzag"):
        fractions = [eval_imitation(None, point_mass_set, mid, Z8, episodes=25, seed=s,
                                    actor=random_actor(2))["deviated_fraction"] for s in range(20)]
        assert np.mean(fractions) >= 0.9


def test_error_bookkeeping_matches_per_step_values(point_mass_set):
    env = point_mass_set.make_env()
    res = eval_imitation(None, point_mass_set, "zigzag", Z8, episodes=7, seed=3, actor=random_actor(2))
    roll, motion = res["rollout"], point_mass_set.get("zigzag")
    per_step = []
    for i in range(7):
        steps = [env.cartesian_error(roll.frames[i, t], motion.frames[min(t, motion.length - 1)])
                 for t in range(1, roll.alive_steps[i] + 1)]
        per_step.append(np.mean(steps))
    assert res["cartesian_error"] == pytest.approx(np.mean(per_step), abs=1e-12)
    np.testing.assert_allclose(tracking_errors(env, motion, roll), per_step, atol=1e-12)


def test_unknown_motion(point_mass_set):
    with pytest.raises(UnknownMotion):
        eval_imitation(None, point_mass_set, "moonwalk", Z8, episodes=1, actor=random_actor(2))


def test_default_episode_counts():
    import inspect

    assert inspect.signature(eval_imitation).parameters["episodes"].default == 500
    assert inspect.signature(eval_discovery).parameters["episodes"].default == 150


def test_reference_fid_against_itself(point_mass_set):
    feats = reference_features(point_mass_set, range(len(point_mass_set)))
    a = GaussianFeatureStats.fit(feats, 1e-6)
    b = GaussianFeatureStats.fit(feats.copy(), 1e-6)
    assert frechet_distance(a, b) <= 1e-6


def test_window_features_match_reference(point_mass_set):
    m = point_mass_set.get("loop")
    feats = window_features(m.frames[None], point_mass_set.n_stack)
    np.testing.assert_array_equal(feats, reference_features(point_mass_set, [point_mass_set.index("loop")]))
    assert motion_fid(point_mass_set, [5], m.frames[None]) <= 1e-6


def test_rollout_stops_only_on_fall(point_mass_set):
    env = point_mass_set.make_env()
    always_right = lambda obs, rng: np.tile([1.0, 0.0], (len(obs), 1))
    roll = rollout_skill(env, point_mass_set, 0, np.tile(Z8, (2, 1)), always_right, np.random.default_rng(0),
                         steps=200)
    assert np.all(roll.alive_steps < 200)
    assert np.all(roll.frames[0, roll.alive_steps[0] :] == roll.frames[0, roll.alive_steps[0]])


@pytest.fixture(scope="module")
def tiny_policy(point_mass_set):
    rng = np.random.default_rng(0)
    return make_policy(4 + 1 + 8, 2, rng, (16,))


def test_discovery_concentration_limits(point_mass_set, tiny_policy):
    res = eval_discovery(tiny_policy, point_mass_set, "straight", Z8, 1e6, episodes=20, seed=0)
    assert np.all(res["latents"] @ Z8 >= 1 - 1e-2)
    cosines = [eval_discovery(tiny_policy, point_mass_set, "straight", Z8, k, episodes=2000, seed=1)
               ["latent_mean_cosine"] for k in (20.0, 100.0, 1000.0)]
    assert cosines[0] < cosines[1] < cosines[2]
    for k, c in zip((20.0, 100.0, 1000.0), cosines):
        # cosine to the mean direction has mean A_d and variance 1 - A_d^2 - (d - 1) A_d / kappa
        a = mean_resultant_length(8, k)
        assert abs(c - a) <= 3 * np.sqrt((1 - a * a - 7 * a / k) / 2000)


def test_discovery_report_fields(tmp_path, point_mass_set, tiny_policy):
    res = eval_discovery(tiny_policy, point_mass_set, "loop", np.eye(8)[3], 50.0, episodes=5, seed=0)
    assert res["traces"].shape[0] == 5 and np.isfinite(res["fid"]) and res["dispersion"] >= 0
    write_traces_csv(tmp_path / "t.csv", res["traces"], res["alive_steps"])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "episode,step,x,y" and len(lines) == 1 + int(np.sum(res["alive_steps"] + 1))


def test_endpoint_dispersion():
    assert endpoint_dispersion([[0.0, 0.0]]) == 0.0
    assert endpoint_dispersion([[0.0, 0.0], [3.0, 4.0]]) == 5.0
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert endpoint_dispersion(pts) == pytest.approx((1 + 1 + np.sqrt(2)) / 3)


def test_report_json(tmp_path):
    report_json(tmp_path / "r.json", {"fid": 1.5, "error": {"mean": 0.1, "std": 0.01}}, {"motion_id": "x"})
    body = json.loads((tmp_path / "r.json").read_text())
    assert body["metrics"]["error"]["std"] == 0.01 and "feature_space" in body


# -- downstream -----------------------------------------------------------------------


def _scripted_goal_traces(point_mass_set, cfg, n, seed):
    """Drive the point mass straight at each goal with a braking controller."""
    task = GoalTask(point_mass_set, make_policy(4 + 1 + 8, 2, np.random.default_rng(0), (4,)), cfg,
                    np.random.default_rng(seed))
    env = task.env
    states, goals = task.reset(n)
    traces = [env.base_position(states)]
    for _ in range(cfg.episode_steps):
        pos, vel, h = states[:, :2], states[:, 2:4], states[:, 4]
        desired = 2.0 * (goals - pos) - 2.0 * vel
        c, s = np.cos(h), np.sin(h)
        body = np.stack([c * desired[:, 0] + s * desired[:, 1], -s * desired[:, 0] + c * desired[:, 1]], axis=1)
        states, _, _ = env.step_batch(states, body / env.max_accel)
        traces.append(env.base_position(states))
    return np.stack(traces, axis=1), goals


def test_scripted_controller_reaches_every_goal(point_mass_set):
    cfg = DownstreamConfig()
    traces, goals = _scripted_goal_traces(point_mass_set, cfg, 200, seed=0)
    assert goal_success(traces, goals, cfg.r_goal).mean() == 1.0


def test_stationary_policy_never_succeeds(point_mass_set):
    cfg = DownstreamConfig()
    _, goals = _scripted_goal_traces(point_mass_set, DownstreamConfig(episode_steps=1), 200, seed=1)
    task_starts = np.zeros((200, 2))
    far = np.linalg.norm(goals - task_starts, axis=1) > cfg.r_goal
    traces = np.repeat(task_starts[:, None], 601, axis=1)
    assert not goal_success(traces[far], goals[far], cfg.r_goal).any()


def test_goal_success_ignores_steps_after_stop():
    traces = np.array([[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]])
    goals = np.array([[2.0, 0.0]])
    assert goal_success(traces, goals, 0.5)[0]
    assert not goal_success(traces, goals, 0.5, alive_steps=[1])[0]


@pytest.fixture(scope="module")
def short_hierarchy(point_mass_set):
    from skillforge.pretrain import PretrainConfig, pretrain_encoder
    from skillforge.skill_rl.downstream import train_downstream
    from skillforge.skill_rl.skills import motion_latents

    enc, _ = pretrain_encoder(point_mass_set, PretrainConfig(epochs=20), seed=0)
    low, _ = train(point_mass_set, enc, TrainConfig(epochs=1, num_envs=4, horizon=4, minibatch_size=16), 0)
    latents = motion_latents(enc, point_mass_set)
    cfg = DownstreamConfig(epochs=1, num_envs=4, horizon=4, minibatch_size=16, episode_steps=40)
    high, _ = train_downstream(point_mass_set, low.policy, latents, None, cfg, seed=0)
    return high.policy, low.policy, latents, cfg


def test_eval_downstream_styled_and_freestyle(point_mass_set, short_hierarchy):
    high, low, latents, cfg = short_hierarchy
    styled = eval_downstream(high, low, point_mass_set, latents, "loop", cfg, episodes=6, seed=0)
    assert 0.0 <= styled["success_rate"] <= 1.0 and np.isfinite(styled["fid"])
    assert styled["traces"].shape == (6, cfg.episode_steps + 1, 2)
    free = eval_downstream(high, low, point_mass_set, latents, "freestyle", cfg, episodes=6, seed=0)
    assert "fid" not in free
    success = goal_success(free["traces"], GoalTask(point_mass_set, low, cfg, np.random.default_rng(0))
                           .reset(6)[1], cfg.r_goal, free["alive_steps"])
    assert free["success_rate"] == success.mean()
    with pytest.raises(UnknownStyle):
        eval_downstream(high, low, point_mass_set, latents, "moonwalk", cfg, episodes=2, seed=0)
