"""Search configuration and its flat JSON file format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..compress.policy import DEFAULT_JOINT_MULTIPLE, DEFAULT_MAX_BITS

AGENT_KINDS = ("prune", "quant", "joint")
PROVIDERS = ("synthetic", "remote")
DEFAULT_EPISODES = {"prune": 410, "quant": 310, "joint": 410}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    agent: str = "joint"
    target: float = 0.3
    beta: float = -3.0
    episodes: int | None = None
    warmup: int = 10
    max_bits: int = DEFAULT_MAX_BITS
    joint_multiple: int = DEFAULT_JOINT_MULTIPLE
    # channel multiple for a pruning-only agent; none unless configured
    prune_multiple: int | None = None
    sensitivity: bool = True
    sensitivity_samples: int = 256
    provider: str = "synthetic"
    endpoint: str | None = None
    repeats: int = 10
    timeout_s: float = 10.0
    profile: str | None = None
    seed: int = 0
    # agent updates after each learning episode; None means one per transition
    optimize_steps: int | None = None
    max_retries: int = 3
    val_samples: int | None = None
    episode_finetune_epochs: int = 0
    finetune_epochs: int = 5
    finetune_lr: float = 0.01
    finetune_samples: int | None = None
    sequential: str | None = None

    def __post_init__(self):
        if self.agent not in AGENT_KINDS:
            raise ConfigError(f"agent must be one of {AGENT_KINDS}, got {self.agent!r}")
        if not 0 < self.target <= 1:
            raise ConfigError(f"target must lie in (0, 1], got {self.target}")
        if not self.beta < 0:
            raise ConfigError(f"beta must be negative, got {self.beta}")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.num_episodes <= self.warmup:
            raise ConfigError(f"episodes ({self.num_episodes}) must exceed warmup ({self.warmup})")
        if not 1 <= self.max_bits <= 8:
            raise ConfigError("max_bits must lie in [1, 8]")
        if self.joint_multiple < 1 or (self.prune_multiple is not None and self.prune_multiple < 1):
            raise ConfigError("channel multiples must be positive")
        if self.provider not in PROVIDERS:
            raise ConfigError(f"provider must be one of {PROVIDERS}")
        if self.provider == "remote" and not self.endpoint:
            raise ConfigError("remote provider needs an endpoint host:port")
        if self.repeats < 1 or self.max_retries < 0 or (self.optimize_steps is not None and self.optimize_steps < 0):
            raise ConfigError("repeats >= 1, max_retries >= 0 and optimize_steps >= 0 required")
        if self.sensitivity_samples < 1:
            raise ConfigError("sensitivity_samples must be >= 1")
        if self.sequential not in (None, "prune-first", "quant-first"):
            raise ConfigError("sequential must be prune-first or quant-first")
        if self.finetune_epochs < 0 or self.episode_finetune_epochs < 0:
            raise ConfigError("fine-tune epochs must be >= 0")

    @property
    def num_episodes(self) -> int:
        return DEFAULT_EPISODES[self.agent] if self.episodes is None else self.episodes

    @property
    def multiple(self) -> int | None:
        """Channel multiple applied to this agent's pruning decisions."""
        return self.joint_multiple if self.agent == "joint" else self.prune_multiple

    def with_(self, **changes) -> SearchConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SearchConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key, value in data.items():
            if isinstance(value, (dict, list)):
                raise ConfigError(f"config key {key!r} must be a scalar (flat format)")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> SearchConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return SearchConfig.from_dict(data)


def save_config(config: SearchConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
