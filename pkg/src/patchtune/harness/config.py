"""Training configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..bench import PlantedConfig
from ..errors import ConfigError

METHODS = ("scratch", "vanilla_ft", "lf_only", "lf_lr", "lf_ls", "full")

# which objective terms each method switches on: (L_con, L_r, L_s)
METHOD_TERMS = {
    "scratch": (False, False, False),
    "vanilla_ft": (False, False, False),
    "lf_only": (True, False, False),
    "lf_lr": (True, True, False),
    "lf_ls": (True, False, True),
    "full": (True, True, True),
}

_CHOICES = {
    "method": METHODS,
    "channel_attention": ("softmax", "gram"),
    "phi_input": ("z", "z_and_aggregate"),
    "denominator": ("negatives", "all"),
    "queue_init": ("random", "skip"),
    "eval_head": ("classifier", "frontdoor"),
}


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 5e-3
    tau: float = 0.07
    ema_momentum: float = 0.999
    queue_capacity: int = 40
    k_plus: int = 40
    k_minus: int = 40
    R: int = 4
    channels: int = 32
    d_patch: int = 16
    d_z: int = 32
    pretrain_epochs: int = 15
    epochs: int = 10
    iters_per_epoch: int | None = None
    batch_size: int = 32
    lr: float = 0.05
    pretrain_lr: float = 0.05
    sgd_momentum: float = 0.9
    method: str = "full"
    seed: int = 0
    channel_attention: str = "softmax"
    phi_input: str = "z"
    sample_z: bool = True
    ls_kl: bool = True
    denominator: str = "negatives"
    queue_init: str = "random"
    eval_head: str = "classifier"
    bench: PlantedConfig = field(default_factory=PlantedConfig)

    def validate(self) -> "TrainConfig":
        for name, allowed in _CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("tau", "queue_capacity", "k_plus", "k_minus", "R", "channels", "d_patch",
                     "d_z", "batch_size", "lr", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("pretrain_epochs", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.iters_per_epoch is not None and self.iters_per_epoch <= 0:
            raise ConfigError("iters_per_epoch must be positive when given")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("ema_momentum must lie in [0, 1)")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError("sgd_momentum must lie in [0, 1)")
        if self.channels % 8:
            raise ConfigError("channels must be divisible by 8")
        if self.R > self.channels or self.R > self.bench.grid ** 2:
            raise ConfigError("R cannot exceed the channel or cell count")
        self.bench.validate()
        return self

    @property
    def terms(self) -> tuple[bool, bool, bool]:
        return METHOD_TERMS[self.method]

    def with_updates(self, **kw) -> "TrainConfig":
        bench_kw = kw.pop("bench", None)
        cfg = replace(self, **kw)
        if bench_kw:
            cfg = replace(cfg, bench=replace(cfg.bench, **bench_kw))
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        bench = PlantedConfig.from_dict(d.pop("bench", {}))
        return cls(bench=bench, **d).validate()


def load_config(path: str | Path) -> TrainConfig:
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))


def parse_override(text: str) -> tuple[str, object]:
    """Parse ``key=value``; ``bench.key=value`` targets the benchmark config."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    top, bench = {}, {}
    names = {f.name for f in fields(TrainConfig)}
    bench_names = {f.name for f in fields(PlantedConfig)}
    for text in overrides or ():
        key, value = parse_override(text)
        if key.startswith("bench."):
            if key[6:] not in bench_names:
                raise ConfigError(f"unknown bench field {key[6:]!r}")
            bench[key[6:]] = value
        elif key in names and key != "bench":
            top[key] = value
        else:
            raise ConfigError(f"unknown config field {key!r}")
    if bench:
        top["bench"] = bench
    return cfg.with_updates(**top).validate()
