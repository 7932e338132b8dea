"""Run configuration: one JSON document with a block per pipeline stage.

Unknown keys are rejected at every level. The effective (defaults-filled)
configuration is echoed into every artifact the CLI writes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

from .compressor import CompressorConfig
from .datagen import GenConfig
from .model import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    repeats: int = 7
    warmup: int = 2
    users: int = 20
    targets: int = 64


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 0  # 0 = one per CPU
    log_level: str = "warning"
    gen: GenConfig = GenConfig()
    compressor: CompressorConfig = CompressorConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    bench: BenchConfig = BenchConfig()

    def to_json(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_BLOCKS = {f.name for f in fields(RunConfig)}
_BLOCK_TYPES = {
    "gen": GenConfig,
    "compressor": CompressorConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "bench": BenchConfig,
}

_STAGE_SEEDS = (("gen", "seed"), ("compressor", "kmeans_seed"), ("train", "seed"))


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(data) - set(_BLOCKS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(_BLOCKS)}")
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    seed = data.get("seed", 0)
    # stage seeds inherit the global seed unless a block sets its own
    for block, key in _STAGE_SEEDS:
        data.setdefault(block, {})
        if isinstance(data[block], dict):
            data[block].setdefault(key, seed)
    kw = {}
    for key, value in data.items():
        if key in _BLOCK_TYPES:
            kw[key] = _build(_BLOCK_TYPES[key], value, key)
        else:
            kw[key] = value
    cfg = _build(RunConfig, kw, "config")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    if cfg.log_level not in ("debug", "info", "warning", "error"):
        raise ConfigError(f"log_level must be debug/info/warning/error, got {cfg.log_level!r}")
    return cfg


def load(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply ``key.sub=value`` overrides.

    Override values are parsed as JSON, falling back to a bare string.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a block")
        node[parts[-1]] = value
    return from_dict(data)


def replace(cfg: RunConfig, **blocks) -> RunConfig:
    return dataclasses.replace(cfg, **blocks)


