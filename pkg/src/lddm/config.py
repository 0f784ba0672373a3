"""Run configuration: JSON files with strict key checking.

Schema (every block is required unless a default is listed; unknown keys are
rejected at every level)::

    {
      "seed": int,
      "geometry":   {"frames", "height", "width", "channels", "r"},
      "schedule":   {"beta_start", "beta_end", "T", "sigma_mode"},
      "toy":        ToyBlock fields,
      "sampling":   {"clip_len": 48, "sampled": 16},
      "model":      ModelBlock fields,
      "stage1":     TrainConfig fields,     # autoencoder
      "stage2":     TrainConfig fields,     # denoiser
      "classifier": TrainConfig fields,
      "synthesis":  SynthesisBlock fields,
      "experiment": {"fractions": [...], "seeds": [...]},
      "generative_split": float,            # train fraction for the generator's data
      "paths":      {"data_dir", "checkpoint_dir", "report_dir"}
    }

Path values may be overridden with ``LDDM_DATA_DIR``, ``LDDM_CHECKPOINT_DIR``
and ``LDDM_REPORT_DIR``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import make_linear_schedule
from .errors import ConfigError, GeometryError
from .video import Geometry


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    batch_size: int
    steps: int
    optimizer: str = "adam"
    seed: int = 0
    replacement: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")

    def with_(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ScheduleBlock:
    beta_start: float
    beta_end: float
    T: int
    sigma_mode: str = "beta"

    def __post_init__(self):
        make_linear_schedule(self.beta_start, self.beta_end, self.T, self.sigma_mode)


@dataclass(frozen=True)
class ToyBlock:
    n_per_class: int = 64
    raw_frames: int = 48
    blob_size: float = 1.5
    speed: float = 0.2
    amplitude: float = 3.0
    period: float = 24.0
    noise_std: float = 0.05
    class1_elongation: float = 1.6
    n_images: tuple[int, int] = (40, 20)


@dataclass(frozen=True)
class SamplingBlock:
    clip_len: int = 48
    sampled: int = 16


@dataclass(frozen=True)
class ModelBlock:
    ae_width: int = 16
    ae_stages: int = 4
    style_grid: int = 4
    denoiser_width: int = 32
    time_dim: int = 32
    classifier_width: int = 8


@dataclass(frozen=True)
class SynthesisBlock:
    per_image: int = 2
    balance: bool = True
    div_conditions: int = 8
    div_samples: int = 4


@dataclass(frozen=True)
class ExperimentBlock:
    fractions: tuple[float, ...] = (0.7, 0.5, 0.3)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class PathsBlock:
    data_dir: str
    checkpoint_dir: str
    report_dir: str


@dataclass(frozen=True)
class RunConfig:
    seed: int
    geometry: Geometry
    schedule: ScheduleBlock
    stage1: TrainConfig
    stage2: TrainConfig
    classifier: TrainConfig
    paths: PathsBlock
    toy: ToyBlock = field(default_factory=ToyBlock)
    sampling: SamplingBlock = field(default_factory=SamplingBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    synthesis: SynthesisBlock = field(default_factory=SynthesisBlock)
    experiment: ExperimentBlock = field(default_factory=ExperimentBlock)
    generative_split: float = 0.5

    def __post_init__(self):
        if not 0 < self.generative_split < 1:
            raise ConfigError("generative_split must lie in (0, 1)")
        if self.sampling.sampled != self.geometry.frames:
            raise ConfigError(
                f"sampling.sampled={self.sampling.sampled} must equal geometry.frames={self.geometry.frames}"
            )
        if self.sampling.sampled > self.sampling.clip_len:
            raise ConfigError("sampling.sampled must not exceed sampling.clip_len")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def data_dir(self) -> Path:
        return Path(self.paths.data_dir)

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.paths.checkpoint_dir)

    @property
    def report_dir(self) -> Path:
        return Path(self.paths.report_dir)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        item_tp = args[0]
        if len(args) != 2 or args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} items")
        return tuple(_coerce(item_tp, v, f"{where}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{where}: missing key {name!r}")
            continue
        kwargs[name] = _coerce(hints[name], data[name], f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (GeometryError, ConfigError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_ENV_PATHS = {"data_dir": "LDDM_DATA_DIR", "checkpoint_dir": "LDDM_CHECKPOINT_DIR",
              "report_dir": "LDDM_REPORT_DIR"}


def config_from_dict(data: dict, env: typing.Mapping[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env
    data = json.loads(json.dumps(data))
    paths = data.get("paths")
    if isinstance(paths, dict):
        for key, var in _ENV_PATHS.items():
            if env.get(var):
                paths[key] = env[var]
    return _build(RunConfig, data, "config")


def load_config(path: str | os.PathLike, env: typing.Mapping[str, str] | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data, env)
