"""Run configuration: JSON on disk, nested dataclasses in memory.

Validation errors carry the dotted path of the offending field so the CLI
can report them verbatim.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

STREAMS = ("split_mnist", "pmnist", "gaussian")
STRATEGIES = ("blip", "ft", "ft_fix")
FORMULAS = ("eq8", "appendix14")
F0_GRID = (1e-14, 5e-15, 1e-15, 5e-16, 1e-16, 5e-17)


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class StreamConfig:
    name: str = "gaussian"
    mnist_dir: str | None = None
    classes_per_task: int = 2
    num_tasks: int = 5
    classes: int = 3
    dim: int = 16
    samples_per_class: int = 200
    separation: float = 10.0
    val_fraction: float = 0.1


@dataclass
class ModelConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [1200, 1200])
    activation: str = "relu"


@dataclass
class QuantSettings:
    bits: int = 20
    range_c: float = 6.0
    ste: bool = False


@dataclass
class BlipSettings:
    f0: float = 5e-16
    formula: str = "appendix14"
    max_fisher_samples: int | None = None


@dataclass
class OptimConfig:
    lr0: float = 0.05
    batch: int = 32
    decay: float = 3.0
    patience: int = 5
    lr_min: float = 1e-4
    max_epochs: int = 200


@dataclass
class RunConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: str = "blip"
    quant: QuantSettings = field(default_factory=QuantSettings)
    blip: BlipSettings = field(default_factory=BlipSettings)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        s = self.stream
        _choice("stream.name", s.name, STREAMS)
        if s.name in ("split_mnist", "pmnist"):
            if not s.mnist_dir:
                raise ConfigError("stream.mnist_dir", f"required for stream {s.name!r}")
            if not Path(s.mnist_dir).is_dir():
                raise ConfigError("stream.mnist_dir", f"{s.mnist_dir!r} is not a directory")
        _positive("stream.classes_per_task", s.classes_per_task)
        _positive("stream.num_tasks", s.num_tasks)
        if s.classes < 2:
            raise ConfigError("stream.classes", "need at least 2 classes")
        _positive("stream.dim", s.dim)
        if s.samples_per_class < 10:
            raise ConfigError("stream.samples_per_class", "must be at least 10")
        if s.separation < 0:
            raise ConfigError("stream.separation", "must be non-negative")
        if not 0 < s.val_fraction < 1:
            raise ConfigError("stream.val_fraction", "must lie in (0, 1)")
        if not self.model.hidden_dims:
            raise ConfigError("model.hidden_dims", "need at least one hidden layer")
        for i, h in enumerate(self.model.hidden_dims):
            _positive(f"model.hidden_dims[{i}]", h)
        _choice("model.activation", self.model.activation, ("relu",))
        _choice("strategy", self.strategy, STRATEGIES)
        if not 2 <= self.quant.bits <= 62:
            raise ConfigError("quant.bits", "must lie in [2, 62]")
        _positive("quant.range_c", self.quant.range_c)
        _positive("blip.f0", self.blip.f0)
        _choice("blip.formula", self.blip.formula, FORMULAS)
        if self.blip.max_fisher_samples is not None:
            _positive("blip.max_fisher_samples", self.blip.max_fisher_samples)
        o = self.optim
        for name in ("lr0", "batch", "patience", "lr_min", "max_epochs"):
            _positive(f"optim.{name}", getattr(o, name))
        if not o.decay > 1:
            raise ConfigError("optim.decay", "must exceed 1")
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        if not self.out_dir:
            raise ConfigError("out_dir", "must be non-empty")
        return self


def _choice(path, value, options):
    if value not in options:
        raise ConfigError(path, f"must be one of {list(options)}, got {value!r}")


def _positive(path, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(path, f"must be a positive number, got {value!r}")


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown field")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{prefix}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:  # pragma: no cover - defensive
        raise ConfigError(prefix or "<root>", str(exc)) from None


_SECTIONS = {
    (RunConfig, "stream"): StreamConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "quant"): QuantSettings,
    (RunConfig, "blip"): BlipSettings,
    (RunConfig, "optim"): OptimConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return config_from_dict(data)
