"""Run configuration: a flat dataclass plus a ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Malformed configuration text or an invalid combination of values."""


@dataclass
class TrainConfig:
    # episode shape
    way: int = 5
    shot: int = 1
    query_size: int = 15
    pool_size: int = 100
    draw: int = 30
    select_z: int = 20
    distractors: int = 3

    # inner loop
    inner_steps: int = 40
    retrain_steps: int = 10
    stages: int = 6
    alpha: float = 0.01

    # outer loop
    beta1: float = 0.001
    beta2: float = 0.001
    beta_halve_every: int = 1000
    beta_floor: float = 0.0001
    meta_batch: int = 2
    meta_iterations: int = 1000
    meta_train_stages: int = 1
    meta_grad_mode: str = "first-order"
    eval_interval: int = 100
    val_episodes: int = 50

    # evaluation
    test_episodes: int = 600
    ablation_tag: str = "recursive-hard-soft"
    sweep_retrain: tuple[int, ...] = (0, 2, 5, 10, 20, 40)
    sweep_distractors: tuple[int, ...] = (0, 1, 3, 5, 7)

    # synthetic data
    n_classes: int = 100
    samples_per_class: int = 200
    dim: int = 16
    separation: float = 3.0
    noise: float = 1.0
    warp: float = 1.0
    splits: tuple[int, ...] = (64, 16, 20)

    # backbone
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    swn_hidden: int = 8
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    pretrain_batch: int = 128

    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.retrain_steps <= self.inner_steps:
            raise ConfigError(f"need 0 <= retrain_steps <= inner_steps, got {self.retrain_steps}, {self.inner_steps}")
        if self.select_z > self.draw:
            raise ConfigError(f"select_z ({self.select_z}) must not exceed draw ({self.draw})")
        if self.draw > self.pool_size:
            raise ConfigError(f"draw ({self.draw}) must not exceed pool_size ({self.pool_size})")
        for name in ("alpha", "beta1", "beta2", "beta_floor", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.meta_grad_mode not in ("first-order", "exact"):
            raise ConfigError(f"meta_grad_mode must be 'first-order' or 'exact', got {self.meta_grad_mode!r}")
        if self.stages < 1 or self.meta_train_stages < 1:
            raise ConfigError("stage counts must be >= 1")
        if len(self.splits) != 3 or sum(self.splits) != self.n_classes:
            raise ConfigError(f"splits {self.splits} must be three counts summing to n_classes={self.n_classes}")
        if self.way < 1 or self.shot < 1 or self.meta_batch < 1:
            raise ConfigError("way, shot and meta_batch must be >= 1")
        need = self.way + max(self.distractors, *self.sweep_distractors, 0)
        for name, n in zip(("train", "val", "test"), self.splits):
            if n < self.way + self.distractors or (name == "test" and n < need):
                raise ConfigError(f"split {name!r} has {n} classes, episodes need up to {need}")

    @classmethod
    def for_shot(cls, shot: int, **overrides) -> "TrainConfig":
        """Defaults for 1-shot (draw 30, Z 20, 6 stages) or 5-shot (50, 30, 3)."""
        per_shot = {1: dict(draw=30, select_z=20, stages=6), 5: dict(draw=50, select_z=30, stages=3)}
        base = dict(per_shot.get(shot, {}), shot=shot)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def beta_at(self, iteration: int, initial: float) -> float:
        return max(initial * 0.5 ** (iteration // self.beta_halve_every), self.beta_floor)

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str, where: str):
    typ = _FIELD_TYPES[key]
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "str":
            return raw
        if typ.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key} = {raw!r} as {typ}") from None
    raise ConfigError(f"{where}: unsupported type {typ} for {key}")


def parse_overrides(pairs, where: str = "override") -> dict[str, Any]:
    out = {}
    for i, item in enumerate(pairs, 1):
        if "=" not in item:
            raise ConfigError(f"{where} {i}: expected key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where} {i}: unknown key {key!r}")
        out[key] = _coerce(key, raw, f"{where} {i}")
    return out


def loads(text: str, source: str = "<config>") -> TrainConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, where)
    return TrainConfig(**values)


def load(path, overrides=()) -> TrainConfig:
    path = Path(path)
    cfg = loads(path.read_text(), source=str(path))
    if overrides:
        cfg = cfg.replace(**parse_overrides(overrides))
    return cfg
