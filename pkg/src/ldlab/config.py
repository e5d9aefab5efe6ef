"""Application configuration: one JSON (or TOML) file, sections per module."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SceneSpec
from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import ConfigError
from .training import TrainConfig
from .unet import DenoiserConfig


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        if self.kind != "linear":
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        return make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class DataConfig:
    canvas: int = 64
    min_objects: int = 3
    max_objects: int = 8
    min_area_frac: float = 0.02
    max_iou: float = 0.3
    num_scenes: int = 5000
    seed: int = 0

    def scene_spec(self, num_categories: int) -> SceneSpec:
        return SceneSpec(
            canvas=self.canvas,
            n_objects=(self.min_objects, self.max_objects),
            num_categories=num_categories,
            min_area_frac=self.min_area_frac,
            max_iou=self.max_iou,
        )


@dataclass(frozen=True)
class SamplingConfig:
    guidance_scale: float = 1.0
    steps: int = 0  # 0 means the full schedule
    sampler: str = "ancestral"
    guidance_form: str = "interp"


@dataclass(frozen=True)
class ServiceConfig:
    port: int = 8765
    workers: int = 1
    queue_size: int = 8
    max_images: int = 8


@dataclass(frozen=True)
class AppConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def to_json(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "model": DenoiserConfig,
    "schedule": ScheduleConfig,
    "training": TrainConfig,
    "data": DataConfig,
    "sampling": SamplingConfig,
    "service": ServiceConfig,
}


def _build_section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{name}] section: {exc}")


def load_config(path) -> AppConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # 3.10 fallback
            try:
                import tomli as tomllib
            except ModuleNotFoundError:
                raise ConfigError("TOML configs need Python 3.11+ or the tomli package")
        data = tomllib.loads(text)
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table of sections")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    parts = {
        name: _build_section(cls, data.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    return AppConfig(**parts)


def config_hash(config: AppConfig) -> str:
    blob = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
