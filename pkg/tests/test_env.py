import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agnocomm.env import (
    EnvConfig,
    ForageWorld,
    TaskId,
    WorldState,
    evader_heading,
    integrate,
    lidar,
    lidar_scan,
    observe,
    reward_discovery,
    reward_flocking,
    reward_pursuit_evasion,
    task_reward,
    trajectory_rows,
    write_trajectory_csv,
)
from agnocomm.errors import ConfigurationError, NumericalError


def _state(positions, targets=None, velocities=None):
    p = np.asarray(positions, dtype=float)[None]
    t = np.zeros((1, 1, 2)) if targets is None else np.asarray(targets, dtype=float)[None]
    v = np.zeros_like(p) if velocities is None else np.asarray(velocities, dtype=float)[None]
    return WorldState(p, v, t, np.zeros_like(t), np.zeros(1, dtype=np.int64))


@pytest.mark.parametrize("task", list(TaskId))
def test_reset_deterministic_and_bounded(task):
    cfg = EnvConfig(n_agents=3)
    s1, o1 = ForageWorld(cfg, task, n_envs=4, seed=7).reset()
    s2, o2 = ForageWorld(cfg, task, n_envs=4, seed=7).reset()
    assert o1.tobytes() == o2.tobytes()
    assert s1.positions.tobytes() == s2.positions.tobytes()
    assert o1.shape == (4, 3, cfg.obs_dim)
    assert np.all(np.abs(s1.positions) <= cfg.arena_half_width)
    assert np.all(np.abs(s1.targets) <= cfg.arena_half_width)


def test_zero_action_at_rest_keeps_position():
    cfg = EnvConfig(n_agents=2)
    s = _state([[0.1, 0.2], [-0.5, 0.3]])
    nxt = integrate(cfg, s, np.zeros((1, 2, 2)))
    np.testing.assert_array_equal(nxt.positions, s.positions)
    world = ForageWorld(cfg, TaskId.DISCOVERY, seed=0)
    state, _ = world.reset()
    world.state = replace(state, velocities=np.zeros_like(state.velocities))
    nxt, _, _, _ = world.step(np.zeros((1, 2, 2)))
    np.testing.assert_array_equal(nxt.positions, state.positions)


def test_hand_kinematics_one_step():
    cfg = EnvConfig(n_agents=1, dt=0.1)
    a = np.array([[[0.6, -0.8]]])
    s = _state([[0.2, 0.1]])
    nxt = integrate(cfg, s, a)
    v = a[0, 0] * 0.1
    np.testing.assert_allclose(nxt.velocities[0, 0], v, atol=1e-15)
    np.testing.assert_allclose(nxt.positions[0, 0], [0.2, 0.1] + v * 0.1, atol=1e-15)


def test_kinematics_clamps():
    cfg = EnvConfig(n_agents=1, dt=1.0, max_speed=0.5)
    s = _state([[0.9, 0.0]])
    nxt = integrate(cfg, s, np.array([[[5.0, 0.0]]]))
    # action clipped to 1, speed to 0.5; position clamped at the wall with the wall-normal velocity zeroed
    assert nxt.positions[0, 0, 0] == 1.0
    assert nxt.velocities[0, 0, 0] == 0.0
    with pytest.raises(NumericalError):
        integrate(cfg, s, np.array([[[np.nan, 0.0]]]))
    with pytest.raises(ConfigurationError):
        integrate(cfg, s, np.zeros((1, 2, 2)))


@pytest.mark.parametrize("task", list(TaskId))
def test_done_after_episode_length(task):
    cfg = EnvConfig(n_agents=2, episode_length=7, discovery_radius=0.01)
    world = ForageWorld(cfg, task, n_envs=3, seed=1)
    world.reset()
    for t in range(7):
        _, _, r, done = world.step(np.zeros((3, 2, 2)))
        assert r.shape == (3,)
        if t < 6 and task is not TaskId.PURSUIT_EVASION:
            assert not done.any()
    assert done.all()


def test_lidar_empty_is_range():
    cfg = EnvConfig(n_agents=1)
    s = _state([[0.0, 0.0]], targets=[[0.9, 0.9]])
    np.testing.assert_array_equal(lidar_scan(cfg, s, 0, "targets")[0], np.full(12, cfg.lidar_range))
    np.testing.assert_array_equal(lidar_scan(cfg, s, 0, "agents")[0], np.full(12, cfg.lidar_range))


def test_lidar_target_due_east():
    cfg = EnvConfig(n_agents=1, lidar_range=0.5, entity_radius=0.05)
    r = 0.3
    s = _state([[0.0, 0.0]], targets=[[r, 0.0]])
    scan = lidar_scan(cfg, s, 0, "targets")[0]
    assert scan[0] == pytest.approx(r - 0.05, abs=1e-14)
    assert scan[6] == cfg.lidar_range


def _march(origin, direction, centers, radius, max_range, step=1e-5):
    t = np.arange(0.0, max_range, step)
    pts = origin + t[:, None] * direction
    inside = (np.linalg.norm(pts[:, None] - centers[None], axis=-1) <= radius).any(axis=1)
    return t[np.argmax(inside)] if inside.any() else max_range


def test_lidar_matches_ray_marching():
    rng = np.random.default_rng(0)
    for _ in range(3):
        origin = rng.uniform(-0.2, 0.2, size=2)
        centers = origin + rng.uniform(-0.45, 0.45, size=(4, 2))
        scan = lidar(origin[None, None], centers[None], 12, 0.5, 0.05)[0, 0]
        for r in range(12):
            ang = 2 * np.pi * r / 12
            d = np.array([np.cos(ang), np.sin(ang)])
            assert scan[r] == pytest.approx(_march(origin, d, centers, 0.05, 0.5), abs=2e-5)


def test_lidar_independent_of_other_agent_order():
    cfg = EnvConfig(n_agents=4)
    rng = np.random.default_rng(1)
    pos = rng.uniform(-0.3, 0.3, size=(4, 2))
    s = _state(pos)
    perm = [0, 3, 1, 2]
    s2 = _state(pos[perm])
    np.testing.assert_array_equal(lidar_scan(cfg, s, 0, "agents"), lidar_scan(cfg, s2, 0, "agents"))
    obs, obs2 = observe(cfg, s)[0], observe(cfg, s2)[0]
    np.testing.assert_array_equal(obs[perm], obs2)


def test_discovery_reward_counts():
    cfg = EnvConfig(n_agents=4, discovery_radius=0.35)
    targets = [[0.0, 0.0], [0.8, 0.8]]
    far = [[-0.9, -0.9]] * 4
    cases = [
        (far, 0.0),
        ([[0.1, 0.0], [-0.9, -0.9], [-0.9, 0.9], [0.9, -0.9]], 0.0),
        ([[0.1, 0.0], [0.0, 0.2], [-0.9, 0.9], [0.9, -0.9]], 1.0),
        ([[0.1, 0.0], [0.0, 0.2], [0.8, 0.7], [0.7, 0.8]], 2.0),
    ]
    for positions, expected in cases:
        s = _state(positions, targets)
        got = reward_discovery(cfg, s, s)[0]
        brute = sum(
            sum(np.linalg.norm(np.subtract(p, t)) <= 0.35 for p in positions) >= 2 for t in targets
        )
        assert got == expected == brute


def test_flocking_reward_values():
    cfg = EnvConfig(n_agents=2, collision_penalty=0.1, contact_distance=0.1)
    assert reward_flocking(cfg, _state([[0.2, 0.2]], [[0.2, 0.2]]))[0] == 0.0
    assert reward_flocking(cfg, _state([[-1.0, 0.0], [1.0, 0.0]], [[-1.0, 0.0]]))[0] == pytest.approx(-1.0)
    touching = reward_flocking(cfg, _state([[0.0, 0.0], [0.05, 0.0]], [[0.0, 0.0]]))[0]
    assert touching == pytest.approx(-0.025 - 0.1)


def test_pursuit_rewards_and_done():
    cfg = EnvConfig(n_agents=2)
    caught = _state([[0.0, 0.0], [0.5, 0.5]], [[0.1, 0.0]])
    free = _state([[0.0, 0.0], [0.5, 0.5]], [[-0.9, 0.9]])
    assert reward_pursuit_evasion(cfg, caught)[0] == 10.0
    assert reward_pursuit_evasion(cfg, free)[0] == -0.01
    world = ForageWorld(cfg, TaskId.PURSUIT_EVASION, seed=0)
    world.reset()
    world.state = replace(caught, targets=np.array([[[0.05, 0.0]]]))
    _, _, r, done = world.step(np.zeros((1, 2, 2)))
    assert r[0] == 10.0 and done[0]


def test_evader_flees_nearest_pursuer():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pos = rng.uniform(-1, 1, size=(3, 2))
        ev = rng.uniform(-1, 1, size=(1, 2))
        s = _state(pos, ev)
        nearest = pos[np.argmin(np.linalg.norm(pos - ev, axis=-1))]
        assert evader_heading(s)[0] @ (ev[0] - nearest) > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(list(TaskId)))
def test_global_reward_permutation_symmetric(seed, task):
    rng = np.random.default_rng(seed)
    cfg = EnvConfig(n_agents=4)
    pos = rng.uniform(-1, 1, size=(4, 2))
    tg = rng.uniform(-1, 1, size=(3, 2))
    perm = rng.permutation(4)
    a, b = _state(pos, tg), _state(pos[perm], tg)
    assert task_reward(cfg, task, a, a)[0] == pytest.approx(task_reward(cfg, task, b, b)[0], abs=1e-15)


def test_observation_layout_and_state_recovery():
    cfg = EnvConfig(n_agents=3)
    world = ForageWorld(cfg, TaskId.FLOCKING, n_envs=5, seed=3)
    state, obs = world.reset()
    state, obs, _, _ = world.step(np.random.default_rng(0).uniform(-1, 1, size=(5, 3, 2)))
    np.testing.assert_array_equal(obs[..., :2], state.positions)
    np.testing.assert_array_equal(obs[..., 2:4], state.velocities)
    lid = obs[..., 4:]
    assert np.all((lid >= 0) & (lid <= cfg.lidar_range))


def test_observation_dimension_same_for_all_tasks():
    cfg = EnvConfig(n_agents=2)
    dims = {ForageWorld(cfg, t, seed=0).reset()[1].shape for t in TaskId}
    assert dims == {(1, 2, 28)}
    assert cfg.obs_dim == 28


@pytest.mark.parametrize("task", list(TaskId))
def test_deterministic_replay(task):
    cfg = EnvConfig(n_agents=3, episode_length=15)
    actions = np.random.default_rng(4).uniform(-1, 1, size=(30, 2, 3, 2))

    def run():
        w = ForageWorld(cfg, task, n_envs=2, seed=11)
        w.reset()
        out = []
        for a in actions:
            _, obs, r, done = w.step(a)
            out.append(obs.tobytes() + r.tobytes())
            w.reset_done(done)
        return out

    assert run() == run()


def test_trajectory_csv(tmp_path):
    cfg = EnvConfig(n_agents=2)
    state, _ = ForageWorld(cfg, TaskId.DISCOVERY, seed=0).reset()
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, trajectory_rows(0, state, 1.5))
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "agent", "x", "y", "vx", "vy", "reward"]
    assert len(rows) == 3 and float(rows[1][2]) == state.positions[0, 0, 0]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EnvConfig(n_agents=0)
    with pytest.raises(ConfigurationError):
        EnvConfig(dt=0.0)
    with pytest.raises(ValueError):
        ForageWorld(EnvConfig(), "no_such_task")
