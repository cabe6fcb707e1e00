"""Run configuration: one JSON document mirroring the module configs.

Unknown keys are rejected and every error names the offending field path,
e.g. ``agent.schedule.decay_steps``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import AgentConfig, EpsilonSchedule
from .errors import ConfigInvalid
from .harness import SCENARIOS, RunSettings
from .market_data import BarFormat
from .neural import NetSpec
from .trading_env import EnvConfig

CONFIG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    path: str
    format: BarFormat = field(default_factory=BarFormat)
    split_boundary: int | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigInvalid("data.test_fraction", "must lie in (0, 1)")


@dataclass(frozen=True)
class SweepGrid:
    archs: tuple[str, ...] = ("ffdqn", "cnn")
    batch_sizes: tuple[int, ...] = (32, 128)
    scenarios: tuple[str, ...] = SCENARIOS

    def __post_init__(self):
        for a in self.archs:
            if a not in ("ffdqn", "cnn"):
                raise ConfigInvalid("sweep.archs", f"unknown arch {a!r}")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigInvalid("sweep.scenarios", f"unknown scenario {s!r}")
        if any(b < 1 for b in self.batch_sizes):
            raise ConfigInvalid("sweep.batch_sizes", "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    net: NetSpec = field(default_factory=NetSpec)
    run: RunSettings = field(default_factory=RunSettings)
    sweep: SweepGrid = field(default_factory=SweepGrid)

    def to_dict(self) -> dict:
        doc = _to_plain(self)
        doc["format_version"] = CONFIG_FORMAT_VERSION
        return doc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


def _build(cls, doc: Any, path: str):
    if not isinstance(doc, dict):
        raise ConfigInvalid(path, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigInvalid(f"{path}.{sorted(unknown)[0]}", "unknown field")
    kwargs = {}
    for name, value in doc.items():
        sub = NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigInvalid:
        raise
    except TypeError as exc:
        raise ConfigInvalid(path, str(exc)) from None


NESTED = {
    (DataConfig, "format"): BarFormat,
    (AgentConfig, "schedule"): EpsilonSchedule,
}


def config_from_dict(doc: dict, base_dir: Path | None = None, check_paths: bool = True) -> RunConfig:
    doc = dict(doc)
    version = doc.pop("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigInvalid("format_version", f"unsupported version {version!r}")
    unknown = set(doc) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ConfigInvalid(sorted(unknown)[0], "unknown field")
    if "data" not in doc:
        raise ConfigInvalid("data", "missing")
    data = _build(DataConfig, doc["data"], "data")
    data_path = Path(data.path)
    if base_dir is not None and not data_path.is_absolute():
        data_path = (base_dir / data_path).resolve()
        data = dataclasses.replace(data, path=str(data_path))
    if check_paths and not data_path.is_file():
        raise ConfigInvalid("data.path", f"{data.path} does not exist")
    parts = {"data": data}
    for name, cls in (("env", EnvConfig), ("agent", AgentConfig), ("net", NetSpec),
                      ("run", RunSettings), ("sweep", SweepGrid)):
        if name in doc:
            parts[name] = _build(cls, doc[name], name)
    cfg = RunConfig(**parts)
    if cfg.net.arch not in ("ffdqn", "cnn"):
        raise ConfigInvalid("net.arch", f"unknown arch {cfg.net.arch!r}")
    return cfg


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("<file>", f"invalid JSON: {exc}") from None
    return config_from_dict(doc, base_dir=path.parent, check_paths=check_paths)


def with_overrides(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Apply non-None command-line overrides to one config section."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
