"""
ForageWorld: a 2D continuous multi-agent arena with three tasks.

Agents are double integrators with clamped speed inside a square arena.
Every agent observes its own position and velocity plus two LiDAR scans, one
against targets and one against the other agents, so the joint observation
set pins down every agent's state. The tasks share observations and
kinematics and differ only in how the targets move and how reward is paid:

* ``discovery`` - +1 for each target with at least two agents inside
  ``discovery_radius``; covered targets respawn uniformly at random.
* ``flocking`` - target 0 drifts across the arena; reward is minus the mean
  agent distance to it, minus a penalty per pair of agents in contact.
* ``pursuit_evasion`` - target 0 flees the nearest pursuer; +10 and episode
  end on capture, -0.01 per step otherwise.

The world is vectorised over ``n_envs`` independent copies.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, NumericalError


class TaskId(str, Enum):
    DISCOVERY = "discovery"
    FLOCKING = "flocking"
    PURSUIT_EVASION = "pursuit_evasion"


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int = 4
    arena_half_width: float = 1.0
    dt: float = 0.1
    max_speed: float = 1.0
    n_lidar_rays: int = 12
    lidar_range: float = 0.5
    n_targets: int = 3
    discovery_radius: float = 0.35
    episode_length: int = 100
    seed: int = 0
    entity_radius: float = 0.05
    agents_per_target: int = 2
    contact_distance: float = 0.1
    collision_penalty: float = 0.1
    lead_speed: float = 0.3
    evader_speed: float = 0.5

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigurationError("n_agents must be >= 1")
        if self.n_lidar_rays < 1:
            raise ConfigurationError("n_lidar_rays must be >= 1")
        if self.n_targets < 1:
            raise ConfigurationError("n_targets must be >= 1")
        if self.episode_length < 1:
            raise ConfigurationError("episode_length must be >= 1")
        for name in ("arena_half_width", "dt", "max_speed", "lidar_range", "discovery_radius",
                     "entity_radius", "contact_distance"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")

    @property
    def obs_dim(self) -> int:
        return 4 + 2 * self.n_lidar_rays

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass(frozen=True)
class WorldState:
    """Arrays with a leading ``n_envs`` axis."""

    positions: np.ndarray          # (E, n, 2)
    velocities: np.ndarray         # (E, n, 2)
    targets: np.ndarray            # (E, m, 2)
    target_velocities: np.ndarray  # (E, m, 2)
    steps: np.ndarray              # (E,)

    @property
    def n_envs(self) -> int:
        return self.positions.shape[0]

    def select(self, mask: np.ndarray, other: WorldState) -> WorldState:
        """Take envs where ``mask`` is true from ``other``, the rest from self."""
        m3 = mask[:, None, None]
        return WorldState(
            np.where(m3, other.positions, self.positions),
            np.where(m3, other.velocities, self.velocities),
            np.where(m3, other.targets, self.targets),
            np.where(m3, other.target_velocities, self.target_velocities),
            np.where(mask, other.steps, self.steps),
        )


def ray_directions(n_rays: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_rays) / n_rays
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def lidar(origins: np.ndarray, entities: np.ndarray, n_rays: int, max_range: float,
          radius: float, exclude_self: bool = False) -> np.ndarray:
    """Ray-cast from every origin against discs of ``radius`` at ``entities``.

    ``origins`` is ``(E, n, 2)`` and ``entities`` ``(E, m, 2)``. Ray ``r``
    points at angle ``2 pi r / n_rays``. Returns ``(E, n, n_rays)`` distances
    to the nearest disc boundary, capped at ``max_range``. With
    ``exclude_self`` the entities are the origins and each origin ignores
    its own disc.
    """
    dirs = ray_directions(n_rays)
    rel = entities[:, None, :, :] - origins[:, :, None, :]          # (E, n, m, 2)
    proj = rel @ dirs.T                                              # (E, n, m, R)
    dist2 = (rel * rel).sum(-1)[..., None]                           # (E, n, m, 1)
    perp2 = dist2 - proj * proj
    r2 = radius * radius
    hit = (perp2 <= r2) & (proj > 0.0)
    inside = np.broadcast_to(dist2 <= r2, hit.shape)
    depth = np.where(hit, proj - np.sqrt(np.maximum(r2 - perp2, 0.0)), np.inf)
    depth = np.where(inside, 0.0, depth)
    depth = np.maximum(depth, 0.0)
    if exclude_self:
        n = origins.shape[1]
        eye = np.eye(n, dtype=bool)[None, :, :, None]
        depth = np.where(eye, np.inf, depth)
    if depth.shape[2] == 0:
        return np.full(origins.shape[:2] + (n_rays,), float(max_range))
    return np.minimum(depth.min(axis=2), max_range)


def lidar_scan(config: EnvConfig, state: WorldState, agent_index: int, kind: str) -> np.ndarray:
    """LiDAR of one agent against ``"targets"`` or ``"agents"``; shape (E, n_rays)."""
    if not 0 <= agent_index < state.positions.shape[1]:
        raise ConfigurationError(f"agent index {agent_index} out of range")
    origin = state.positions[:, agent_index:agent_index + 1]
    if kind == "targets":
        ents = state.targets
    elif kind == "agents":
        ents = np.delete(state.positions, agent_index, axis=1)
    else:
        raise ConfigurationError(f"unknown lidar kind {kind!r}")
    return lidar(origin, ents, config.n_lidar_rays, config.lidar_range, config.entity_radius)[:, 0]


def observe(config: EnvConfig, state: WorldState) -> np.ndarray:
    """Joint observations, shape ``(E, n_agents, obs_dim)``."""
    scan_t = lidar(state.positions, state.targets, config.n_lidar_rays, config.lidar_range,
                   config.entity_radius)
    scan_a = lidar(state.positions, state.positions, config.n_lidar_rays, config.lidar_range,
                   config.entity_radius, exclude_self=True)
    return np.concatenate([state.positions, state.velocities, scan_t, scan_a], axis=-1)


def _uniform_points(rng: np.random.Generator, config: EnvConfig, shape: tuple[int, ...]) -> np.ndarray:
    w = config.arena_half_width
    return rng.uniform(-w, w, size=shape + (2,))


def _unit_vectors(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def initial_state(config: EnvConfig, task: TaskId, rng: np.random.Generator, n_envs: int = 1,
                  n_agents: int | None = None) -> WorldState:
    n = config.n_agents if n_agents is None else n_agents
    m = config.n_targets
    positions = _uniform_points(rng, config, (n_envs, n))
    targets = _uniform_points(rng, config, (n_envs, m))
    target_vel = np.zeros((n_envs, m, 2))
    if TaskId(task) is TaskId.FLOCKING:
        target_vel[:, 0] = config.lead_speed * _unit_vectors(rng, (n_envs,))
    return WorldState(positions, np.zeros((n_envs, n, 2)), targets, target_vel,
                      np.zeros(n_envs, dtype=np.int64))


def sample_state(config: EnvConfig, rng: np.random.Generator, n_envs: int, n_agents: int) -> WorldState:
    """World state with positions uniform in the arena and velocities uniform in the speed disc."""
    positions = _uniform_points(rng, config, (n_envs, n_agents))
    speed = config.max_speed * np.sqrt(rng.uniform(0.0, 1.0, size=(n_envs, n_agents, 1)))
    velocities = speed * _unit_vectors(rng, (n_envs, n_agents))
    targets = _uniform_points(rng, config, (n_envs, config.n_targets))
    return WorldState(positions, velocities, targets, np.zeros_like(targets),
                      np.zeros(n_envs, dtype=np.int64))


def _clip_speed(v: np.ndarray, max_speed: float) -> np.ndarray:
    speed = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.minimum(1.0, max_speed / np.maximum(speed, 1e-300))
    return v * scale


def _clamp_arena(p: np.ndarray, v: np.ndarray, w: float) -> tuple[np.ndarray, np.ndarray]:
    clamped = np.clip(p, -w, w)
    v = np.where(clamped != p, 0.0, v)
    return clamped, v


def integrate(config: EnvConfig, state: WorldState, actions: np.ndarray) -> WorldState:
    """Agent kinematics: v' = clip(v + a dt), p' = p + v' dt, both clamped."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != state.positions.shape:
        raise ConfigurationError(f"actions shape {actions.shape} != {state.positions.shape}")
    if not np.all(np.isfinite(actions)):
        raise NumericalError("non-finite action")
    a = np.clip(actions, -1.0, 1.0)
    v = _clip_speed(state.velocities + a * config.dt, config.max_speed)
    p, v = _clamp_arena(state.positions + v * config.dt, v, config.arena_half_width)
    return replace(state, positions=p, velocities=v)


def agents_near(positions: np.ndarray, points: np.ndarray, radius: float) -> np.ndarray:
    """Number of agents within ``radius`` of each point; shape (E, m)."""
    d = np.linalg.norm(points[:, :, None, :] - positions[:, None, :, :], axis=-1)
    return (d <= radius).sum(axis=-1)


def covered_targets(config: EnvConfig, state: WorldState) -> np.ndarray:
    return agents_near(state.positions, state.targets, config.discovery_radius) >= config.agents_per_target


def reward_discovery(config: EnvConfig, state: WorldState, next_state: WorldState) -> np.ndarray:
    """Targets discovered by the transition ``state -> next_state``."""
    return covered_targets(config, next_state).sum(axis=-1).astype(np.float64)


def contact_pairs(config: EnvConfig, positions: np.ndarray) -> np.ndarray:
    n = positions.shape[1]
    d = np.linalg.norm(positions[:, :, None, :] - positions[:, None, :, :], axis=-1)
    iu = np.triu_indices(n, k=1)
    return (d[:, iu[0], iu[1]] < config.contact_distance).sum(axis=-1)


def reward_flocking(config: EnvConfig, state: WorldState) -> np.ndarray:
    lead = state.targets[:, 0:1]
    mean_dist = np.linalg.norm(state.positions - lead, axis=-1).mean(axis=-1)
    return -mean_dist - config.collision_penalty * contact_pairs(config, state.positions)


def captured(config: EnvConfig, state: WorldState) -> np.ndarray:
    return agents_near(state.positions, state.targets[:, 0:1], config.discovery_radius)[:, 0] >= 1


def reward_pursuit_evasion(config: EnvConfig, state: WorldState) -> np.ndarray:
    return np.where(captured(config, state), 10.0, -0.01)


def evader_heading(state: WorldState) -> np.ndarray:
    """Unit vector pointing from the nearest pursuer to the evader (target 0)."""
    evader = state.targets[:, 0]
    rel = evader[:, None, :] - state.positions
    dist = np.linalg.norm(rel, axis=-1)
    nearest = np.argmin(dist, axis=-1)
    away = rel[np.arange(len(evader)), nearest]
    norm = np.linalg.norm(away, axis=-1, keepdims=True)
    return np.where(norm > 0, away / np.maximum(norm, 1e-300), np.array([1.0, 0.0]))


def move_targets(config: EnvConfig, task: TaskId, state: WorldState) -> WorldState:
    """Scripted target motion (lead drift for flocking, evader for pursuit)."""
    task = TaskId(task)
    if task is TaskId.DISCOVERY:
        return state
    w = config.arena_half_width
    targets = state.targets.copy()
    tvel = state.target_velocities.copy()
    if task is TaskId.FLOCKING:
        lead = targets[:, 0] + tvel[:, 0] * config.dt
        bounce = np.abs(lead) > w
        tvel[:, 0] = np.where(bounce, -tvel[:, 0], tvel[:, 0])
        targets[:, 0] = np.clip(lead, -w, w)
    else:
        tvel[:, 0] = config.evader_speed * evader_heading(state)
        targets[:, 0] = np.clip(targets[:, 0] + tvel[:, 0] * config.dt, -w, w)
    return replace(state, targets=targets, target_velocities=tvel)


def task_reward(config: EnvConfig, task: TaskId, state: WorldState, next_state: WorldState) -> np.ndarray:
    task = TaskId(task)
    if task is TaskId.DISCOVERY:
        return reward_discovery(config, state, next_state)
    if task is TaskId.FLOCKING:
        return reward_flocking(config, next_state)
    return reward_pursuit_evasion(config, next_state)


class ForageWorld:
    """A batch of ``n_envs`` independent ForageWorld instances.

    All randomness (initial placement and discovery respawns) comes from one
    generator seeded with ``seed`` (``config.seed`` by default).
    """

    def __init__(self, config: EnvConfig, task: TaskId | str, n_envs: int = 1,
                 seed: int | None = None, n_agents: int | None = None):
        self.config = config
        self.task = TaskId(task)
        self.n_envs = n_envs
        self.n_agents = config.n_agents if n_agents is None else n_agents
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.state: WorldState | None = None

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def reset(self) -> tuple[WorldState, np.ndarray]:
        self.state = initial_state(self.config, self.task, self.rng, self.n_envs, self.n_agents)
        return self.state, observe(self.config, self.state)

    def reset_done(self, done: np.ndarray) -> np.ndarray:
        """Re-initialise the envs flagged in ``done``; returns fresh observations."""
        if np.any(done):
            fresh = initial_state(self.config, self.task, self.rng, self.n_envs, self.n_agents)
            self.state = self.state.select(np.asarray(done, dtype=bool), fresh)
        return observe(self.config, self.state)

    def reward(self, state: WorldState, next_state: WorldState) -> np.ndarray:
        return task_reward(self.config, self.task, state, next_state)

    def step(self, actions: np.ndarray) -> tuple[WorldState, np.ndarray, np.ndarray, np.ndarray]:
        """Advance every env one step.

        Returns ``(state', observations, global_reward (E,), done (E,))``.
        """
        if self.state is None:
            raise ConfigurationError("call reset() before step()")
        cfg = self.config
        prev = self.state
        nxt = integrate(cfg, prev, actions)
        nxt = move_targets(cfg, self.task, nxt)
        reward = self.reward(prev, nxt)
        done_task = np.zeros(self.n_envs, dtype=bool)
        if self.task is TaskId.DISCOVERY:
            covered = covered_targets(cfg, nxt)
            if np.any(covered):
                fresh = _uniform_points(self.rng, cfg, nxt.targets.shape[:2])
                nxt = replace(nxt, targets=np.where(covered[..., None], fresh, nxt.targets))
        elif self.task is TaskId.PURSUIT_EVASION:
            done_task = captured(cfg, nxt)
        nxt = replace(nxt, steps=prev.steps + 1)
        done = done_task | (nxt.steps >= cfg.episode_length)
        self.state = nxt
        return nxt, observe(cfg, nxt), reward, done


def write_trajectory_csv(path: str | os.PathLike, rows: Iterable[tuple]) -> None:
    """Write ``(step, agent, x, y, vx, vy, reward)`` rows with a header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "agent", "x", "y", "vx", "vy", "reward"])
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def trajectory_rows(step: int, state: WorldState, reward: float, env_index: int = 0) -> list[tuple]:
    pos = state.positions[env_index]
    vel = state.velocities[env_index]
    return [(step, i, float(pos[i, 0]), float(pos[i, 1]), float(vel[i, 0]), float(vel[i, 1]), float(reward))
            for i in range(pos.shape[0])]
