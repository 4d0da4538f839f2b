"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .model import HEAD_KINDS
from .tasks import DATASETS


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass
class RunConfig:
    dataset: str = "moons"
    head: str = "mahalanobis"
    rank: int = 0
    feature_dim: int = 32
    depth: int = 5
    encoder_hidden: int = 32
    encoder_heads: int = 4
    encoder_blocks: int = 2
    factor_gain: float = 0.1
    spectral_bound: float = 3.0
    train_episodes: int = 2000
    val_episodes: int = 50
    eval_episodes: int = 200
    lr: float = 1e-2
    lr_schedule: str = "cosine"
    seed: int = 0
    mc_samples: int = 100
    eps: float = 1e-3
    t_max: int = 1000
    ood_samples: int = 200
    ood_margin: float = 3.0
    pool_per_class: int = 200
    query_per_class: int = 100
    normalize: int = 1
    plot_resolution: int = 150
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {', '.join(DATASETS)}, got {self.dataset!r}")
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {', '.join(HEAD_KINDS)}, got {self.head!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        checks = [
            (self.rank >= 0, "rank must be >= 0"),
            (self.feature_dim >= 1, "feature_dim must be >= 1"),
            (self.depth >= 0, "depth must be >= 0"),
            (self.spectral_bound > 0, "spectral_bound must be > 0"),
            (self.mc_samples >= 1, "mc_samples must be >= 1"),
            (self.t_max >= 1, "t_max must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.eps > 0, "eps must be > 0"),
            (self.train_episodes >= 0, "train_episodes must be >= 0"),
            (self.val_episodes >= 1, "val_episodes must be >= 1"),
            (self.eval_episodes >= 0, "eval_episodes must be >= 0"),
            (self.ood_samples >= 1, "ood_samples must be >= 1"),
            (self.normalize in (0, 1), "normalize must be 0 or 1"),
            (self.plot_resolution >= 2, "plot_resolution must be >= 2"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = ["# mahacal run configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, types[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @staticmethod
    def keys_in(text: str) -> set[str]:
        return {line.split("#", 1)[0].split("=", 1)[0].strip() for line in text.splitlines()
                if "=" in line.split("#", 1)[0]}

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _coerce(key: str, value: str, kind) -> object:
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value
