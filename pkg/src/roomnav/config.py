"""Run configuration: one JSON file, every section optional, flags override it.

All randomness is derived from the single ``seed``; the sub-seeds below are
fixed offsets so that a run is reproducible from ``(config, seed)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .frames import MatchConfig
from .nav_policy import PolicyConfig
from .roomnet import QueueConfig
from .simulator import RecorderConfig, WorldSpec, default_world_spec, load_world_spec

U64 = 2 ** 64

# offsets from the run seed for each random stream
SEED_OFFSETS = {
    "mapping": 0,
    "training": 1,
    "holdout": 5,
    "backbone": 7,
    "init": 0,
    "perturb": 123,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MapParams:
    transit_window: float = 1.0
    keyframe_interval: float = 1.0
    keyframe_margin: float = 3.0

    def __post_init__(self):
        if self.transit_window <= 0 or self.keyframe_interval <= 0 or self.keyframe_margin < 0:
            raise ValueError("map windows must be positive")


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 30
    lr: float = 0.05
    stride: int = 3
    episodes: int = 20  # random tours recorded in addition to the mapping tours
    hops: int = 3
    hidden: int = 32
    attention: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.stride < 1 or self.episodes < 0 or self.hops < 1:
            raise ValueError("stride and hops must be >= 1, episodes >= 0")
        if self.hidden < 1 or self.attention < 1:
            raise ValueError("hidden and attention sizes must be >= 1")


@dataclass(frozen=True)
class NavParams:
    start_room: int = 0
    goal_room: int = 3
    trials: int = 100
    max_steps: int = 3000
    perturb: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "perturb", tuple(float(p) for p in self.perturb))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.perturb or any(not 0.0 <= p <= 1.0 for p in self.perturb):
            raise ValueError("perturbation levels must lie in [0, 1]")


_SECTIONS = {
    "queue": QueueConfig,
    "policy": PolicyConfig,
    "match": MatchConfig,
    "recorder": RecorderConfig,
    "map": MapParams,
    "train": TrainParams,
    "nav": NavParams,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    world: str | None = None  # world spec JSON; None selects the default 2x2 world
    out: str = "run"
    queue: QueueConfig = field(default_factory=QueueConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    recorder: RecorderConfig = field(default_factory=RecorderConfig)
    map: MapParams = field(default_factory=MapParams)
    train: TrainParams = field(default_factory=TrainParams)
    nav: NavParams = field(default_factory=NavParams)

    def __post_init__(self):
        if not isinstance(self.seed, int) or not 0 <= self.seed < U64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not 0.0 < self.match.ratio <= 1.0 or self.match.max_distance <= 0:
            raise ConfigError("match ratio must lie in (0, 1] and max_distance be positive")
        rec = self.recorder
        if rec.rate <= 0 or rec.speed <= 0 or rec.turn_rate <= 0 or rec.transit_window <= 0:
            raise ConfigError("recorder rates must be positive")

    def sub_seed(self, stream: str) -> int:
        return (self.seed + SEED_OFFSETS[stream]) % U64

    def trial_seed(self, i: int) -> int:
        return (self.seed * 1_000_003 + i) % U64

    def world_spec(self) -> WorldSpec:
        spec = default_world_spec() if self.world is None else load_world_spec(self.world)
        spec = dataclasses.replace(spec, seed=self.seed)
        m = len(spec.rooms)
        for name in ("start_room", "goal_room"):
            if not 0 <= getattr(self.nav, name) < m:
                raise ConfigError(f"{name} outside 0..{m - 1}")
        return spec

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"seed": self.seed, "world": self.world, "out": self.out}
        for name in _SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {"seed", "world", "out"} - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {k: d[k] for k in ("seed", "world", "out") if k in d}
        try:
            for name, typ in _SECTIONS.items():
                if name in d:
                    kw[name] = typ(**d[name])
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **sections: dict[str, Any]) -> "RunConfig":
        """Copy with top-level fields or section fields overridden."""
        d = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict):
                d[key] = {**d[key], **val}
            else:
                d[key] = val
        return RunConfig.from_dict(d)
