import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillforge.errors import DimensionMismatch
from skillforge.hypersphere import uniform_sphere_sample
from skillforge.metra_lab import (
    MetraConfig,
    adjacency_distances,
    ground_metra_latent,
    line_residual,
    metra_reward,
    telescoping_report,
    wraparound_jump,
    write_diagnostics_csv,
)
from skillforge.motions import Motion, MotionDataset, is_repetitive

identity = lambda x: np.atleast_2d(np.asarray(x, dtype=float))[:, :2]


def test_reward_examples():
    s = np.array([[0.3, -1.2]])
    assert metra_reward(identity, s, s, np.array([0.6, 0.8]))[0] == 0.0
    assert metra_reward(identity, [[0.0, 0.0]], [[1.0, 0.0]], np.array([1.0, 0.0]))[0] == 1.0
    with pytest.raises(DimensionMismatch):
        metra_reward(identity, s, s, np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(5, 40), st.integers(0, 2**32 - 1))
def test_cumulative_reward_telescopes(length, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 2))
    phi = lambda x: np.tanh(np.atleast_2d(x) @ w)
    ds = MotionDataset([Motion("m", rng.standard_normal((length, 3)))])
    z = uniform_sphere_sample(rng, 2, 5)
    row = telescoping_report(ds, phi, z)[0]
    frames = ds.motions[0].frames
    per_step = sum(metra_reward(phi, frames[t : t + 1], frames[t + 1 : t + 2], z) for t in range(length - 1))
    np.testing.assert_allclose(row["cumulative"], per_step.ravel(), atol=1e-10)
    assert row["identity_gap"] <= 1e-10


def _circle(n=41):
    a = np.linspace(0.0, 2 * np.pi, n)
    return np.stack([np.cos(a), np.sin(a)], axis=1)


def test_repetitive_motion_collapses_for_any_phi():
    loop = Motion("loop", _circle())
    assert is_repetitive(loop)
    ds = MotionDataset([loop, Motion("line", np.linspace([0.0, 0.0], [3.0, 0.0], 20))])
    z = uniform_sphere_sample(np.random.default_rng(0), 2, 100)
    rows = telescoping_report(ds, identity, z)
    assert rows[0]["collapsed"] and np.all(np.abs(rows[0]["cumulative"]) < 1e-9)
    assert not rows[1]["collapsed"] and not rows[1]["repetitive"]


def test_line_reward_depends_on_direction():
    ds = MotionDataset([Motion("line", np.linspace([0.0, 0.0], [3.0, 0.0], 20))])
    orth, aligned = telescoping_report(ds, identity, np.array([[0.0, 1.0], [1.0, 0.0]]))[0]["cumulative"]
    assert orth == 0.0 and aligned == pytest.approx(3.0, abs=1e-12)


@pytest.fixture(scope="module")
def trained(point_mass_set):
    log = []
    rep, _ = ground_metra_latent(point_mass_set, MetraConfig(), seed=0, on_epoch=log.append)
    return rep, log


def test_straight_motion_maps_to_unit_steps_on_a_line(point_mass_set, trained):
    rep, _ = trained
    adj = adjacency_distances(rep, point_mass_set.get("straight"))
    assert 0.9 <= adj.min() and adj.max() <= 1.0
    assert line_residual(rep, point_mass_set.get("straight")) <= 0.1


def test_dual_variable_stays_nonnegative(trained):
    _, log = trained
    assert all(row["dual_lambda"] >= 0 for row in log) and len(log) == MetraConfig().epochs


def test_trained_phi_still_collapses_on_loop(point_mass_set, trained):
    rep, _ = trained
    z = uniform_sphere_sample(np.random.default_rng(1), 2, 100)
    row = next(r for r in telescoping_report(point_mass_set, rep, z) if r["motion_id"] == "loop")
    assert row["collapsed"]


def test_time_augmentation_breaks_the_cycle(point_mass_set):
    rep, _ = ground_metra_latent(point_mass_set, MetraConfig(time_augmented=True), seed=0)
    assert wraparound_jump(rep, point_mass_set.get("loop")) > 1.0
    z = uniform_sphere_sample(np.random.default_rng(1), 2, 100)
    row = next(r for r in telescoping_report(point_mass_set, rep, z) if r["motion_id"] == "loop")
    assert not row["collapsed"]


def test_training_is_deterministic(point_mass_set):
    cfg = MetraConfig(epochs=20)
    a, log_a = ground_metra_latent(point_mass_set, cfg, seed=4)
    b, log_b = ground_metra_latent(point_mass_set, cfg, seed=4)
    assert log_a == log_b
    for pa, pb in zip(a.net.params, b.net.params):
        np.testing.assert_array_equal(pa, pb)


def test_config_validation():
    with pytest.raises(ValueError):
        MetraConfig(epsilon_slack=0.0)
    with pytest.raises(ValueError):
        MetraConfig(dual_lambda_init=-1.0)


def test_diagnostics_csv(tmp_path, point_mass_set):
    rep, _ = ground_metra_latent(point_mass_set, MetraConfig(epochs=2), seed=0)
    report = telescoping_report(point_mass_set, rep, np.eye(2))
    write_diagnostics_csv(tmp_path / "d.csv", point_mass_set, rep, report)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].split(",")[3:5] == ["cumulative_z0", "cumulative_z1"]
    assert len(lines) == 1 + len(point_mass_set)
    loop_row = next(l for l in lines if l.startswith("loop,"))
    assert loop_row.split(",")[1:3] == ["1", "1"] and loop_row.split(",")[-1] != "nan"
