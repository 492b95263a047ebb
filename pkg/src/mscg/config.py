"""Training configuration read from ``key = value`` text files."""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 42
    epochs: int = 25
    batch_size: int = 4
    base_lr: float = 1.5e-4 / math.sqrt(3)
    adam_iters: int = 10000
    momentum: float = 0.9
    weight_decay: float = 2e-5
    bias_lr_multiplier: float = 2.0
    nodes: int = 16
    feature_dim: int = 128
    hidden_dim: int = 128
    num_classes: int = 7
    loss: str = "acw"
    views: tuple[int, ...] = (0, 1, 2)
    dtype: str = "float32"
    patch_size: int = 0          # 0 = full image
    flip_prob: float = 0.5
    max_iters: int = 0           # 0 = epochs * iterations per epoch
    eval_every: int = 1          # epochs; 0 = only after the last epoch
    dice_skip_absent: bool = False
    backbone_widths: tuple[int, ...] = field(default=(32, 64, 128))

    def __post_init__(self):
        self.validate()

    @property
    def node_side(self) -> int:
        return math.isqrt(self.nodes)

    def validate(self) -> None:
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.node_side ** 2 != self.nodes:
            raise ConfigError(f"nodes={self.nodes} is not a perfect square")
        if self.loss not in ("acw", "dice", "ce"):
            raise ConfigError(f"unknown loss {self.loss!r} (acw | dice | ce)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.views or any(k not in (0, 1, 2, 3) for k in self.views):
            raise ConfigError(f"views must be quarter turns in 0..3, got {self.views}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        rows = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            rows.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        return "\n".join(rows) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, types[key], val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_text(text, **overrides)


def _coerce(key: str, typ: str, val: str):
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "bool":
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if typ.startswith("tuple"):
            return tuple(int(x) for x in val.split(",") if x.strip())
        return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {typ}") from None
