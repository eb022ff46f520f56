"""
Communication layer: neighbourhoods under a range limit, per-agent
observation sets, latent state encoding and policy inputs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .pisa import SetAutoencoder, SetBatch, encode_batch, loss_and_grad


@dataclass(frozen=True)
class Neighborhood:
    agent: int
    members: frozenset[int]

    def __post_init__(self):
        if self.agent in self.members:
            raise ConfigurationError("an agent is never its own neighbour")


def neighborhood(positions: np.ndarray, epsilon: float, i: int) -> Neighborhood:
    """Agents j != i with Euclidean distance d(i, j) <= epsilon."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if not 0 <= i < n:
        raise ConfigurationError(f"agent index {i} out of range for {n} agents")
    if math.isinf(epsilon):
        return Neighborhood(i, frozenset(j for j in range(n) if j != i))
    d = np.linalg.norm(positions - positions[i], axis=-1)
    return Neighborhood(i, frozenset(int(j) for j in np.flatnonzero(d <= epsilon) if j != i))


def assemble_observation_set(i: int, joint_obs: np.ndarray, nbhd: Neighborhood) -> np.ndarray:
    """Observations of agent ``i`` and its neighbours, as an ``(k, d_obs)`` array."""
    joint_obs = np.asarray(joint_obs, dtype=np.float64)
    if nbhd.agent != i:
        raise ConfigurationError("neighbourhood belongs to a different agent")
    if any(not 0 <= j < len(joint_obs) for j in nbhd.members):
        raise ConfigurationError("neighbourhood refers to unknown agents")
    return joint_obs[sorted(nbhd.members | {i})]


def connectivity(positions: np.ndarray, epsilon: float) -> np.ndarray:
    """Boolean ``(E, n, n)`` matrix: j is in agent i's set (always true for j == i)."""
    e, n = positions.shape[:2]
    if math.isinf(epsilon):
        return np.ones((e, n, n), dtype=bool)
    d = np.linalg.norm(positions[:, :, None, :] - positions[:, None, :, :], axis=-1)
    return (d <= epsilon) | np.eye(n, dtype=bool)[None]


def assemble_batch(joint_obs: np.ndarray, positions: np.ndarray, epsilon: float) -> SetBatch:
    """One canonical observation set per (env, agent), flattened env-major."""
    e, n, d = joint_obs.shape
    valid = connectivity(positions, epsilon).reshape(e * n, n)
    elements = np.broadcast_to(joint_obs[:, None], (e, n, n, d)).reshape(e * n, n, d)
    return SetBatch.from_masked(elements, valid)


def policy_input(latent: np.ndarray, own_obs: np.ndarray) -> np.ndarray:
    """``[latent || own_obs]`` along the last axis."""
    return np.concatenate([np.asarray(latent, dtype=np.float64), np.asarray(own_obs, dtype=np.float64)],
                          axis=-1)


@dataclass
class LossRecorder:
    """Accumulates per-set reconstruction losses and keeps per-iteration means.

    ``history`` holds every closed iteration's mean; ``window`` the most
    recent ``window_size`` of them.
    """

    window_size: int = 10
    _losses: list[np.ndarray] = field(default_factory=list)
    _sq_errors: list[np.ndarray] = field(default_factory=list)
    history: list[float] = field(default_factory=list)
    rmse_history: list[float] = field(default_factory=list)
    window: deque = field(default_factory=deque)

    def add(self, per_set_loss: np.ndarray, per_set_element: np.ndarray | None = None) -> None:
        self._losses.append(np.asarray(per_set_loss, dtype=np.float64).ravel())
        if per_set_element is not None:
            self._sq_errors.append(np.asarray(per_set_element, dtype=np.float64).ravel())

    def merge(self, other: LossRecorder) -> None:
        self._losses.extend(other._losses)
        self._sq_errors.extend(other._sq_errors)
        other._losses, other._sq_errors = [], []

    def close_iteration(self) -> float:
        """Finish an iteration; returns its mean loss (NaN when nothing was recorded)."""
        losses = np.concatenate(self._losses) if self._losses else np.zeros(0)
        mean = float(losses.mean()) if losses.size else float("nan")
        sq = np.concatenate(self._sq_errors) if self._sq_errors else np.zeros(0)
        self.rmse_history.append(float(np.sqrt(sq.mean())) if sq.size else float("nan"))
        self._losses, self._sq_errors = [], []
        self.history.append(mean)
        self.window.append(mean)
        while len(self.window) > self.window_size:
            self.window.popleft()
        return mean

    def window_mean(self) -> float:
        return float(np.mean(self.window)) if self.window else float("nan")


@dataclass
class CommLayer:
    """Frozen set autoencoder plus communication range."""

    autoencoder: SetAutoencoder
    epsilon: float = math.inf
    recorder: LossRecorder = field(default_factory=LossRecorder)
    record_losses: bool = True

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigurationError("epsilon must be >= 0")

    @property
    def d_z(self) -> int:
        return self.autoencoder.d_z

    def encode_sets(self, batch: SetBatch) -> np.ndarray:
        z, _ = encode_batch(self.autoencoder, batch)
        if self.record_losses:
            loss, _ = loss_and_grad(self.autoencoder, batch, need_grad=False)
            self.recorder.add(loss.per_set_total, loss.per_set_element)
        return z

    def encode_state(self, obs_set: np.ndarray) -> np.ndarray:
        """Latent of one observation set (``(k, d_obs)`` array)."""
        obs_set = np.asarray(obs_set, dtype=np.float64).reshape(-1, self.autoencoder.d_obs)
        return self.encode_sets(SetBatch.from_sets([obs_set], self.autoencoder.d_obs))[0]

    def joint_latents(self, joint_obs: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Latent for every (env, agent); shape ``(E, n, d_z)``."""
        e, n = joint_obs.shape[:2]
        batch = assemble_batch(joint_obs, positions, self.epsilon)
        return self.encode_sets(batch).reshape(e, n, self.d_z)
