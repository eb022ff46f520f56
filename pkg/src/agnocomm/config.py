"""
Run configuration: a flat YAML mapping of dotted keys.

Every key lives in one of the namespaces ``env.``, ``comm.``, ``ae.``,
``train.``, ``collect.`` and ``run.``; unknown keys are rejected. Any key can
be overridden from the environment as ``AGNOCOMM_<NAMESPACE>__<FIELD>``, e.g.
``AGNOCOMM_ENV__N_AGENTS=5``.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .env import EnvConfig, TaskId
from .errors import ConfigurationError
from .ppo import ArmId, TrainConfig
from .pretrain import PROVENANCES, RANDOM_OBSERVATION_SAMPLING, AutoencoderConfig

ENV_PREFIX = "AGNOCOMM_"


@dataclass(frozen=True)
class CollectConfig:
    mode: str = RANDOM_OBSERVATION_SAMPLING
    samples: int = 100_000
    agent_counts: tuple[int, ...] = (1, 2, 3)
    seed: int = 0
    n_envs: int = 8

    def __post_init__(self):
        if self.mode not in PROVENANCES:
            raise ConfigurationError(f"collect.mode must be one of {PROVENANCES}")
        if self.samples <= 0 or not self.agent_counts:
            raise ConfigurationError("collect.samples must be > 0 and collect.agent_counts nonempty")


@dataclass(frozen=True)
class RunSettings:
    arm: str = ArmId.TASK_AGNOSTIC.value
    task: str = TaskId.DISCOVERY.value
    encoder: str = ""
    calibration: str = ""
    dataset: str = ""
    train_encoder: bool = False
    noise_agent: int = -1
    eval_episodes: int = 32
    ood_window: int = 10

    def __post_init__(self):
        ArmId(self.arm)
        TaskId(self.task)


@dataclass(frozen=True)
class CommSettings:
    epsilon: float = math.inf

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigurationError("comm.epsilon must be >= 0")


SECTIONS: dict[str, type] = {
    "env": EnvConfig,
    "comm": CommSettings,
    "ae": AutoencoderConfig,
    "train": TrainConfig,
    "collect": CollectConfig,
    "run": RunSettings,
}


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    comm: CommSettings = field(default_factory=CommSettings)
    ae: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    collect: CollectConfig = field(default_factory=CollectConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.train.seeds

    def flat(self) -> dict[str, Any]:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                value = getattr(obj, f.name)
                out[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return out

    def snapshot(self) -> str:
        flat = self.flat()
        lines = [f"{k}: {_dump_value(flat[k])}" for k in sorted(flat)]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.snapshot().encode()).hexdigest()


def _dump_value(value: Any) -> str:
    if isinstance(value, float) and math.isinf(value):
        return ".inf" if value > 0 else "-.inf"
    if isinstance(value, list):
        return "[" + ", ".join(_dump_value(v) for v in value) + "]"
    if isinstance(value, str):
        return yaml.safe_dump(value, default_style='"').strip()
    if isinstance(value, float):
        return repr(value)
    return yaml.safe_dump(value).strip().removesuffix("...").strip()


def known_keys() -> set[str]:
    return {f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in fields(cls)}


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError
        if isinstance(default, tuple):
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                value = [value]
            return tuple(int(v) for v in value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", ".inf"):
                return math.inf
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"bad value for {key}: {value!r}") from None


def parse_flat(mapping: Mapping[str, Any], required: tuple[str, ...] = ()) -> RunConfig:
    """Build a :class:`RunConfig` from a flat mapping of dotted keys."""
    unknown = sorted(set(mapping) - known_keys())
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    missing = [k for k in required if k not in mapping]
    if missing:
        raise ConfigurationError(f"missing required config key(s): {', '.join(missing)}")
    sections = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        kwargs = {}
        for f in fields(cls):
            key = f"{name}.{f.name}"
            if key in mapping:
                kwargs[f.name] = _coerce(key, mapping[key], getattr(defaults, f.name))
        try:
            sections[name] = replace(defaults, **kwargs)
        except ConfigurationError:
            raise
        except ValueError as exc:
            raise ConfigurationError(f"invalid {name} settings: {exc}") from None
    return RunConfig(**sections)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, _, key = name[len(ENV_PREFIX):].partition("__")
        out[f"{section.lower()}.{key.lower()}"] = yaml.safe_load(raw)
    return out


def load_config(path: str | os.PathLike | None, required: tuple[str, ...] = (),
                environ: Mapping[str, str] | None = None) -> RunConfig:
    mapping: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must be a flat mapping of dotted keys")
        for k, v in loaded.items():
            if isinstance(v, dict):
                raise ConfigurationError(f"nested mapping under {k!r}; use flat dotted keys")
            mapping[str(k)] = v
    mapping.update(env_overrides(environ))
    return parse_flat(mapping, required)
