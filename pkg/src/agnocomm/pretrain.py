"""
Reward-free data collection and self-supervised pre-training of the set
autoencoder.

Collectors only ever see observations: environments are wrapped in
:class:`ObservationOnly`, which drops the reward before returning.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .env import EnvConfig, ForageWorld, TaskId, observe, sample_state
from .errors import ConfigurationError
from .pisa import AeTrainConfig, SetAutoencoder, SetBatch, init_autoencoder, train

RANDOM_POLICY = "random_policy"
RANDOM_OBSERVATION_SAMPLING = "random_observation_sampling"
PROVENANCES = (RANDOM_POLICY, RANDOM_OBSERVATION_SAMPLING)


@dataclass(frozen=True)
class PretrainDataset:
    sets: SetBatch
    provenance: str
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ConfigurationError(f"unknown provenance {self.provenance!r}")
        seen = set(np.unique(self.sets.counts).tolist())
        if not seen <= set(self.cardinalities):
            raise ConfigurationError(f"sample cardinalities {sorted(seen)} outside {self.cardinalities}")

    def __len__(self) -> int:
        return len(self.sets)

    def tensors(self) -> dict[str, np.ndarray]:
        counts = self.sets.counts
        elements = self.sets.elements[self.sets.mask]
        return {
            "cardinalities": counts.astype(np.float64),
            "elements": elements,
            "cardinality_range": np.asarray(self.cardinalities, dtype=np.float64),
            f"provenance/{self.provenance}": np.zeros(0),
        }

    @classmethod
    def from_tensors(cls, tensors) -> PretrainDataset:
        counts = tensors["cardinalities"].astype(np.int64)
        elements = tensors["elements"]
        tags = [k.split("/", 1)[1] for k in tensors if k.startswith("provenance/")]
        if len(tags) != 1:
            raise ConfigurationError("dataset file must carry exactly one provenance tag")
        offsets = np.concatenate([[0], np.cumsum(counts)])
        sets = [elements[offsets[i]:offsets[i + 1]] for i in range(len(counts))]
        d = elements.shape[1] if elements.ndim == 2 else 0
        batch = SetBatch.from_sets(sets, d)
        rng_ = tuple(int(c) for c in tensors["cardinality_range"])
        return cls(batch, tags[0], rng_)

    def save(self, path) -> Path:
        return checkpoint.save(path, self.tensors())

    @classmethod
    def load(cls, path) -> PretrainDataset:
        return cls.from_tensors(checkpoint.load(path))


class ObservationOnly:
    """Wraps a world and hides its reward channel."""

    def __init__(self, world: ForageWorld):
        self._world = world

    def reset(self) -> np.ndarray:
        return self._world.reset()[1]

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, obs, _, done = self._world.step(actions)
        return obs, done

    def reset_done(self, done: np.ndarray) -> np.ndarray:
        return self._world.reset_done(done)


WorldFactory = Callable[..., ForageWorld]


def collect_random_policy(config: EnvConfig, steps: int, agent_counts: Sequence[int],
                          task: TaskId | str = TaskId.DISCOVERY, seed: int = 0, n_envs: int = 8,
                          world_factory: WorldFactory = ForageWorld) -> PretrainDataset:
    """Roll uniformly random actions and keep every joint observation.

    One batch of ``n_envs`` worlds per agent count is stepped in turn, so the
    counts are cycled uniformly. ``world_factory`` lets tests substitute the
    environment; its reward is never read.
    """
    if steps <= 0:
        raise ConfigurationError("steps must be > 0")
    if not agent_counts:
        raise ConfigurationError("agent_counts must be nonempty")
    seeds = np.random.SeedSequence(seed).spawn(len(agent_counts) + 1)
    action_rng = np.random.default_rng(seeds[0])
    envs = []
    for k, n in enumerate(agent_counts):
        world = world_factory(config, task, n_envs=n_envs, seed=int(seeds[k + 1].generate_state(1)[0]),
                              n_agents=n)
        envs.append(ObservationOnly(world))
    obs = [e.reset() for e in envs]
    sets: list[np.ndarray] = []
    while len(sets) < steps:
        for k, (env, n) in enumerate(zip(envs, agent_counts)):
            actions = action_rng.uniform(-1.0, 1.0, size=(n_envs, n, 2))
            next_obs, done = env.step(actions)
            sets.extend(next_obs)
            obs[k] = env.reset_done(done)
    sets = sets[:steps]
    return PretrainDataset(SetBatch.from_sets(sets, config.obs_dim), RANDOM_POLICY, tuple(agent_counts))


def collect_random_observations(config: EnvConfig, samples: int, agent_counts: Sequence[int],
                                seed: int = 0) -> PretrainDataset:
    """Render joint observations of uniformly sampled world states (no dynamics)."""
    if samples <= 0:
        raise ConfigurationError("samples must be > 0")
    if not agent_counts:
        raise ConfigurationError("agent_counts must be nonempty")
    rng = np.random.default_rng(seed)
    k = len(agent_counts)
    per_count = [len(range(j, samples, k)) for j in range(k)]
    groups = []
    for n, m in zip(agent_counts, per_count):
        groups.append(observe(config, sample_state(config, rng, m, n)) if m else np.zeros((0, n, config.obs_dim)))
    sets = []
    for i in range(samples):
        sets.append(groups[i % k][i // k])
    return PretrainDataset(SetBatch.from_sets(sets, config.obs_dim), RANDOM_OBSERVATION_SAMPLING,
                           tuple(agent_counts))


@dataclass(frozen=True)
class AutoencoderConfig:
    d_z: int = 72
    hidden: int = 128
    d_key: int = 16
    n_max: int = 10
    iterations: int = 15000
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float = 1e-5
    window_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class PretrainReport:
    params: SetAutoencoder
    total: np.ndarray
    element: np.ndarray
    card: np.ndarray
    total_sq: np.ndarray
    loss_mean: float
    loss_std: float
    window: int
    provenance: str
    iterations: int = field(default=0)

    def summary(self) -> dict:
        return {
            "loss_mean": self.loss_mean,
            "loss_std": self.loss_std,
            "window": self.window,
            "iterations": self.iterations,
            "provenance": self.provenance,
        }


def trailing_window_stats(trace: np.ndarray, trace_sq: np.ndarray | None = None,
                          fraction: float = 0.1) -> tuple[float, float, int]:
    """Loss mean and std over the final ``fraction`` of training iterations.

    ``trace`` holds per-iteration mean losses and ``trace_sq`` per-iteration
    means of squared per-set losses; the std is the spread of individual
    set losses pooled over the window. Without ``trace_sq`` the std of the
    per-iteration means is returned instead.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size == 0:
        raise ConfigurationError("empty loss trace")
    window = max(1, int(round(fraction * trace.size)))
    tail = trace[-window:]
    mean = float(tail.mean())
    if trace_sq is None:
        return mean, float(tail.std()), window
    second = float(np.asarray(trace_sq, dtype=np.float64)[-window:].mean())
    return mean, math.sqrt(max(second - mean * mean, 0.0)), window


def pretrain(dataset: PretrainDataset, config: AutoencoderConfig = AutoencoderConfig(),
             d_obs: int | None = None) -> PretrainReport:
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    d_obs = d_obs or dataset.sets.elements.shape[-1]
    ae = init_autoencoder(np.random.default_rng(config.seed), d_obs, d_z=config.d_z, n_max=config.n_max,
                          hidden=config.hidden, d_key=config.d_key)
    result = train(ae, dataset.sets, AeTrainConfig(config.iterations, config.batch_size, config.lr,
                                                   config.lr_final, config.seed))
    mean, std, window = trailing_window_stats(result.total, result.total_sq, config.window_fraction)
    return PretrainReport(result.params, result.total, result.element, result.card, result.total_sq,
                          mean, std, window, dataset.provenance, config.iterations)


LOSS_TRACE_HEADER = ("iteration", "total_loss", "element_loss", "card_loss")
MOMENTS_HEADER = ("iteration", "total_loss_sq")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, values in enumerate(rows):
            writer.writerow([i] + [repr(float(v)) for v in values])


def _read_csv(path, header) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != header:
            raise ConfigurationError(f"unexpected header in {path}")
        rows = list(reader)
    return {k: np.array([float(r[k]) for r in rows]) for k in header[1:]}


def write_loss_trace(path, report: PretrainReport) -> None:
    _write_csv(path, LOSS_TRACE_HEADER, zip(report.total, report.element, report.card))


def read_loss_trace(path) -> dict[str, np.ndarray]:
    return _read_csv(path, LOSS_TRACE_HEADER)


def write_moments(path, report: PretrainReport) -> None:
    _write_csv(path, MOMENTS_HEADER, zip(report.total_sq))


def read_moments(path) -> np.ndarray:
    return _read_csv(path, MOMENTS_HEADER)["total_loss_sq"]


def save_report(report: PretrainReport, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Persist checkpoint, loss trace and summary into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "checkpoint": checkpoint.save(out / "autoencoder.agno", report.params.tensors()),
        "loss_trace": out / "loss_trace.csv",
        "moments": out / "loss_moments.csv",
        "report": out / "pretrain_report.json",
    }
    write_loss_trace(paths["loss_trace"], report)
    write_moments(paths["moments"], report)
    paths["report"].write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return paths


def load_report(out_dir: str | os.PathLike, checkpoint_path: str | os.PathLike | None = None) -> PretrainReport:
    """Inverse of :func:`save_report`; the checkpoint may live elsewhere."""
    out = Path(out_dir)
    ckpt = Path(checkpoint_path) if checkpoint_path is not None else out / "autoencoder.agno"
    params = SetAutoencoder.from_tensors(checkpoint.load(ckpt))
    trace = read_loss_trace(out / "loss_trace.csv")
    moments = read_moments(out / "loss_moments.csv")
    summary = json.loads((out / "pretrain_report.json").read_text())
    return PretrainReport(params, trace["total_loss"], trace["element_loss"], trace["card_loss"], moments,
                          summary["loss_mean"], summary["loss_std"], summary["window"],
                          summary["provenance"], summary["iterations"])
