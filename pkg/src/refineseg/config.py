"""Model and training configuration plus the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

MODULE_NAMES = ("la", "pr", "mr")


def parse_modules(value) -> frozenset:
    """Parse ``"la,pr,mr"`` (or an iterable of names) into a frozenset of module names."""
    if value is None:
        return frozenset()
    if isinstance(value, str):
        items = [v.strip().lower() for v in value.replace("+", ",").split(",")]
    else:
        items = [str(v).strip().lower() for v in value]
    items = [v for v in items if v and v != "none"]
    unknown = set(items) - set(MODULE_NAMES)
    if unknown:
        raise ValueError(f"unknown module(s) {sorted(unknown)}; expected a subset of {MODULE_NAMES}")
    return frozenset(items)


def format_modules(modules) -> str:
    return ",".join(m for m in MODULE_NAMES if m in modules) or "none"


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 256
    c4: int = 32
    c8: int = 64
    c16: int = 128
    c_embed: int = 128
    c_memory: int = 0  # 0 -> c_embed // 2
    c_low: int = 16
    num_heads: int = 4
    pool_kernels: tuple = (2, 4, 8)
    click_radius: int = -1  # -1 -> max(1, round(D / 50))
    modules: frozenset = field(default_factory=lambda: frozenset(MODULE_NAMES))
    bank_capacity: int = 6

    def __post_init__(self):
        object.__setattr__(self, "modules", parse_modules(self.modules))
        object.__setattr__(self, "pool_kernels", tuple(int(k) for k in self.pool_kernels))
        if self.resolution % 16 != 0 or self.resolution <= 0:
            raise ValueError(f"resolution must be a positive multiple of 16, got {self.resolution}")
        for name in ("c4", "c8", "c16", "c_embed", "c_low", "num_heads", "bank_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.c_embed % self.num_heads or self.c16 % self.num_heads:
            raise ValueError("channel widths must be divisible by num_heads")
        if self.c_embed % 8:
            raise ValueError("c_embed must be divisible by 8")
        side = self.resolution // 8
        for k in self.pool_kernels:
            if k <= 0 or side % k:
                raise ValueError(f"pooling kernel {k} does not divide the local feature side {side}")

    @property
    def memory_dim(self) -> int:
        return self.c_memory or self.c_embed // 2

    @property
    def prompt_map_side(self) -> int:
        return self.resolution // 4

    @property
    def radius(self) -> int:
        if self.click_radius >= 0:
            return self.click_radius
        return max(1, round(self.prompt_map_side / 50))

    def with_modules(self, modules) -> "ModelConfig":
        return dataclasses.replace(self, modules=parse_modules(modules))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 1e-4
    lambda_final: float = 1.0
    lambda_inter: float = 0.3
    memory_steps: int = 60

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _coerce(raw: str, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    if isinstance(current, frozenset):
        return parse_modules(raw)
    return raw


def _format(value) -> str:
    if isinstance(value, frozenset):
        return format_modules(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def read_flat_config(path) -> dict:
    """Read ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def split_config(raw: dict, model: ModelConfig | None = None, train: TrainConfig | None = None):
    """Apply flat overrides onto (ModelConfig, TrainConfig)."""
    model = model or ModelConfig()
    train = train or TrainConfig()
    model_names = {f.name for f in fields(ModelConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for key, value in raw.items():
        if key in model_names:
            model_kw[key] = _coerce(value, getattr(model, key)) if isinstance(value, str) else value
        elif key in train_names:
            train_kw[key] = _coerce(value, getattr(train, key)) if isinstance(value, str) else value
        else:
            raise KeyError(f"unknown config key {key!r}")
    return dataclasses.replace(model, **model_kw), dataclasses.replace(train, **train_kw)


def write_flat_config(path, *configs) -> None:
    lines = []
    for cfg in configs:
        for f in fields(cfg):
            lines.append(f"{f.name}={_format(getattr(cfg, f.name))}")
    Path(path).write_text("\n".join(lines) + "\n")
