"""Pipeline configuration (JSON), config hashing and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .fileio import atomic_write_text
from .forward import ForwardConfig
from .gprnet import DataConfig, GprNetConfig, TrainConfig
from .localization import LocalizationConfig, SurveyConfig
from .parnet import ClassicalConfig, GridSpec, LossWeights
from .scene import SceneConfig


@dataclass(frozen=True)
class GridSurvey:
    """Boustrophedon B-scan survey used by ``simulate``."""

    line_spacing: float = 0.25
    trace_spacing: float = 0.02
    directions: tuple[str, ...] = ("x",)
    height: float = 0.0

    def __post_init__(self):
        if not (self.line_spacing > 0 and self.trace_spacing > 0):
            raise ValueError("survey spacings must be positive")
        if not self.directions or any(d not in ("x", "y") for d in self.directions):
            raise ValueError("directions must be a nonempty subset of ('x', 'y')")


@dataclass(frozen=True)
class DatasetConfig:
    """Size of the synthetic GPRNet dataset and its validation split."""

    n_scenes: int = 200
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.n_scenes < 2 or not 0 < self.val_fraction < 1:
            raise ValueError("need at least two scenes and a validation fraction in (0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    forward: ForwardConfig = field(default_factory=ForwardConfig)
    survey: GridSurvey = field(default_factory=GridSurvey)
    grid: GridSpec = field(default_factory=GridSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    detector: ClassicalConfig = field(default_factory=ClassicalConfig)
    gprnet: GprNetConfig = field(default_factory=GprNetConfig)
    gprnet_data: DataConfig = field(default_factory=DataConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    localization: LocalizationConfig = field(default_factory=LocalizationConfig.fine)
    loc_survey: SurveyConfig = field(default_factory=SurveyConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def config_hash(self) -> str:
        return config_hash(self)

    def with_seed(self, seed: int | None) -> "PipelineConfig":
        return self if seed is None else dataclasses.replace(self, seed=int(seed))


class ConfigError(ValueError):
    """Every violation found while reading a configuration."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


# ---------------------------------------------------------------- (de)serialisation

def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _like(default, value, where: str, problems: list[str]):
    """Coerce a JSON value to the shape of ``default``; record a problem on mismatch."""
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            problems.append(f"{where}: expected an object")
            return default
        return _build(type(default), value, where, problems, default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{where}: expected true/false, got {value!r}")
            return default
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number, got {value!r}")
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            problems.append(f"{where}: expected a string, got {value!r}")
            return default
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            problems.append(f"{where}: expected a list")
            return default
        if default and len({type(d) for d in default}) == 1:
            proto = default[0]
            return tuple(_like(proto, v, f"{where}[{i}]", problems) for i, v in enumerate(value))
        return _plain(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            problems.append(f"{where}: expected an object")
            return default
        int_keys = bool(default) and all(isinstance(k, int) for k in default)
        out = {}
        for k, v in value.items():
            key = k
            if int_keys:
                try:
                    key = int(k)
                except ValueError:
                    problems.append(f"{where}: key {k!r} is not an integer")
                    continue
            proto = default.get(key, next(iter(default.values()))) if default else None
            out[key] = _plain(v) if proto is None else _like(proto, v, f"{where}.{k}", problems)
        return out
    return _plain(value)  # fields defaulting to None accept any JSON value


def _plain(v):
    return tuple(_plain(x) for x in v) if isinstance(v, list) else v


def _build(cls, data: dict, where: str, problems: list[str], base=None):
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            problems.append(f"{where}.{k}: unknown key" if where else f"{k}: unknown key")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in data and data[f.name] is None and "None" in str(f.type):
            kw[f.name] = None
        elif f.name in data:
            kw[f.name] = _like(getattr(base, f.name), data[f.name], f"{where}.{f.name}" if where else f.name,
                               problems)
    try:
        return dataclasses.replace(base, **kw)
    except (TypeError, ValueError, KeyError) as exc:
        problems.append(f"{where or 'config'}: {exc}")
        return base


def config_from_dict(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``data`` on the defaults (or ``base``), rejecting unknown keys.

    All problems are collected and raised together as a :class:`ConfigError`.
    """
    if not isinstance(data, dict):
        raise ConfigError(["top level must be a JSON object"])
    problems: list[str] = []
    cfg = _build(PipelineConfig, data, "", problems, base or PipelineConfig())
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | os.PathLike | None, seed: int | None = None) -> PipelineConfig:
    """Defaults, then the file (if any), then an explicit seed."""
    cfg = PipelineConfig()
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
        cfg = config_from_dict(data)
    return cfg.with_seed(seed)


def save_config(path, cfg: PipelineConfig) -> None:
    atomic_write_text(path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def canonical_json(obj) -> str:
    return json.dumps(_to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: PipelineConfig) -> str:
    """SHA-256 of the fully resolved configuration in canonical JSON form."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


# ---------------------------------------------------------------- manifests

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str = __version__
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def add_input(self, path) -> None:
        self.inputs.append({"path": str(path), "sha256": file_digest(path)})

    def add_output(self, path) -> None:
        self.outputs.append({"path": str(path), "sha256": file_digest(path)})

    def stage(self, name: str):
        return _Stage(self, name)

    def to_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                "version": self.version, "python": platform.python_version(),
                "inputs": self.inputs, "outputs": self.outputs, "timings": self.timings}

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / f"manifest-{self.command}.json"
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")
        return path


class _Stage:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.timings[self.name] = time.perf_counter() - self.t0
        return False
