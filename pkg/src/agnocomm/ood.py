"""Out-of-distribution detection from set reconstruction losses."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError

IN_DISTRIBUTION = "in_distribution"
OUT_OF_DISTRIBUTION = "out_of_distribution"
VERDICT_HEADER = ("iteration", "window_recon_loss", "threshold", "ood_flag")


@dataclass(frozen=True)
class OodCalibration:
    loss_mean: float
    loss_std: float
    threshold: float
    window: int

    def __post_init__(self):
        if self.loss_std < 0:
            raise ConfigurationError("loss_std must be >= 0")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> OodCalibration:
        return cls(**json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class OodVerdict:
    window_mean_loss: float
    threshold: float
    flag: str

    @property
    def is_ood(self) -> bool:
        return self.flag == OUT_OF_DISTRIBUTION


def calibrate(loss_mean: float, loss_std: float, window: int, n_sigma: float = 3.0) -> OodCalibration:
    if window < 1:
        raise ConfigurationError("calibration window is empty")
    return OodCalibration(loss_mean, loss_std, loss_mean + n_sigma * loss_std, window)


def fit_threshold(report) -> OodCalibration:
    """Threshold = mean + 3 std of the pre-training report's trailing window."""
    return calibrate(report.loss_mean, report.loss_std, report.window)


def fit_threshold_from_trace(trace: Sequence[float], trace_sq: Sequence[float] | None = None,
                             fraction: float = 0.1) -> OodCalibration:
    from .pretrain import trailing_window_stats

    mean, std, window = trailing_window_stats(np.asarray(trace), trace_sq, fraction)
    return calibrate(mean, std, window)


def assess(losses: Iterable[float], cal: OodCalibration) -> OodVerdict:
    """Flag when the mean of the window strictly exceeds the threshold."""
    losses = np.asarray(list(losses), dtype=np.float64)
    if losses.size == 0:
        raise ConfigurationError("assessment window is empty")
    # exactly rounded, and clamped so a constant window averages to itself
    mean = min(max(math.fsum(losses) / losses.size, float(losses.min())), float(losses.max()))
    flag = OUT_OF_DISTRIBUTION if mean > cal.threshold else IN_DISTRIBUTION
    return OodVerdict(mean, cal.threshold, flag)


def inject_noise_observation(joint_obs: np.ndarray, agent_index: int,
                             seed: int | np.random.Generator) -> np.ndarray:
    """Copy of ``joint_obs`` with one agent's observation replaced by N(0, 1) noise.

    Accepts ``(n, d)`` or batched ``(E, n, d)`` observations.
    """
    joint_obs = np.asarray(joint_obs, dtype=np.float64)
    n = joint_obs.shape[-2]
    if not 0 <= agent_index < n:
        raise ConfigurationError(f"agent index {agent_index} out of range for {n} agents")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = joint_obs.copy()
    out[..., agent_index, :] = rng.standard_normal(out[..., agent_index, :].shape)
    return out


def write_verdicts(path, rows: Iterable[tuple[int, OodVerdict]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(VERDICT_HEADER)
        for it, v in rows:
            writer.writerow([it, repr(v.window_mean_loss), repr(v.threshold), v.flag])


def verdict_line(iteration: int, verdict: OodVerdict) -> str:
    return f"{iteration},{verdict.window_mean_loss!r},{verdict.threshold!r},{verdict.flag}"
