import numpy as np
import pytest

from latflow.metrics import reference_jerk, s_smooth
from latflow.simenv import (CLOUD_JITTER, DT, HOLD_STEPS, JOINT_RATE, OBSTACLE_HEIGHT, ArmState, Obstacle, TaskScene,
                            generate_demonstrations, in_collision, joint_positions, load_scene, render_point_cloud,
                            rollout, sample_scene, save_scene, scripted_expert, step, success_check,
                            with_obstacle_shift)


def test_zero_action_is_identity():
    s = ArmState(np.array([0.1, 0.2, 0.3]))
    nxt, hit = step(s, np.zeros(4))
    np.testing.assert_array_equal(nxt.q, s.q)
    assert not hit


def test_constant_action_integrates_exactly():
    q0 = np.array([0.4, 1.3, 0.9])
    a = np.array([1.0, -0.5, 0.25, 0.0])
    s = ArmState(q0)
    n = 37
    for _ in range(n):
        s, _ = step(s, a)
    np.testing.assert_allclose(s.q, q0 + n * DT * JOINT_RATE * a[:3], rtol=0, atol=1e-12)


def _dense_collision(q, ob, samples=2001):
    pts = joint_positions(q)
    s = np.linspace(0.0, 1.0, samples)[:, None]
    dists = [np.linalg.norm(pts[i] + s * (pts[i + 1] - pts[i]) - ob.center, axis=1).min() for i in range(3)]
    return min(dists)


def test_collision_matches_dense_sampling():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(300):
        q = rng.uniform(-np.pi, np.pi, 3)
        ob = Obstacle(rng.uniform(-0.9, 0.9, 2), rng.uniform(0.03, 0.2))
        d = _dense_collision(q, ob)
        if abs(d - ob.radius) < 1e-3:
            continue  # too close to tangent for the sampling resolution
        assert in_collision(q, [ob]) == (d < ob.radius)
        checked += 1
    assert checked > 250


def test_rollout_is_bit_deterministic():
    scene = sample_scene("obstacle-reach", np.random.default_rng(3))
    acts = np.random.default_rng(4).uniform(-1, 1, (40, 4))
    a, b = rollout(scene, acts), rollout(scene, acts)
    assert all(np.array_equal(x.q, y.q) for x, y in zip(a.states, b.states))
    assert a.collisions == b.collisions


# ------------------------------------------------------------------- expert


def test_expert_solves_reach_scenes():
    wins = 0
    for i in range(100):
        scene = sample_scene("reach", np.random.default_rng(i), seed=i)
        wins += scripted_expert(scene, n_points=16) is not None
    assert wins >= 99


def test_expert_is_deterministic():
    scene = sample_scene("pick-place", np.random.default_rng(5), seed=5)
    a, b = scripted_expert(scene), scripted_expert(scene)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.cloud, b.cloud)


def test_noisy_expert_is_less_smooth():
    clean = generate_demonstrations("reach", 8, seed=2)
    j_ref = reference_jerk([d.actions[:, :3] for d in clean], DT)
    for d in clean:
        noisy = scripted_expert(d.scene, 0.1, np.random.default_rng(d.seed + 1))
        if noisy is None:
            continue
        assert s_smooth(noisy.actions[:, :3], DT, j_ref=j_ref).s_smooth > \
            s_smooth(d.actions[:, :3], DT, j_ref=j_ref).s_smooth


def test_demonstrations_all_succeed():
    for kind in ("reach", "pick-place", "obstacle-reach"):
        for d in generate_demonstrations(kind, 3, seed=1):
            assert rollout(d.scene, d.actions).success()


# -------------------------------------------------------------- point cloud


def _obstacle_points(cloud):
    return cloud[(cloud[:, 2] >= -CLOUD_JITTER) & (cloud[:, 2] <= OBSTACLE_HEIGHT + CLOUD_JITTER)]


def test_obstacle_points_on_disc_support():
    scene = sample_scene("obstacle-reach", np.random.default_rng(6))
    ob = scene.obstacles[0]
    pts = _obstacle_points(render_point_cloud(scene, 512, np.random.default_rng(0)))
    assert len(pts) > 100
    r = np.linalg.norm(pts[:, :2] - ob.center, axis=1)
    assert np.all(r <= ob.radius + np.sqrt(2) * CLOUD_JITTER)


def test_shifted_obstacle_translates_its_points():
    scene = sample_scene("obstacle-reach", np.random.default_rng(7))
    shift = np.array([0.05, -0.03])
    a = render_point_cloud(scene, 512, np.random.default_rng(1))
    b = render_point_cloud(with_obstacle_shift(scene, shift), 512, np.random.default_rng(1))
    pa, pb = _obstacle_points(a), _obstacle_points(b)
    np.testing.assert_allclose(pb[:, :2] - pa[:, :2], np.broadcast_to(shift, pa[:, :2].shape), atol=1e-12)
    np.testing.assert_array_equal(pb[:, 2], pa[:, 2])


# ------------------------------------------------------------------ success


def _states_at(points):
    return [ArmState(np.zeros(3), ee=np.asarray(p, dtype=float)) for p in points]


def test_hold_at_goal_succeeds():
    scene = TaskScene("reach", np.array([0.5, 0.3]))
    assert success_check(scene, _states_at([[0.0, 0.0]] * 3 + [scene.goal] * HOLD_STEPS))


def test_touching_goal_once_fails():
    scene = TaskScene("reach", np.array([0.5, 0.3]))
    assert not success_check(scene, _states_at([[0.0, 0.0]] * 5 + [scene.goal] + [[0.0, 0.0]] * 20))


def test_collision_frame_fails_obstacle_task():
    scene = TaskScene("obstacle-reach", np.array([0.5, 0.3]), [Obstacle(np.array([0.3, 0.3]), 0.05)])
    states = _states_at([scene.goal] * HOLD_STEPS)
    assert success_check(scene, states, [False] * HOLD_STEPS)
    assert not success_check(scene, states, [False] * 4 + [True] + [False] * 5)


def test_unknown_task_rejected():
    with pytest.raises(ValueError):
        sample_scene("juggle", np.random.default_rng(0))


def test_scene_file_round_trip(tmp_path):
    scene = sample_scene("pick-place", np.random.default_rng(8), seed=8)
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert back.to_json() == scene.to_json()
