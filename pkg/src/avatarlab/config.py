"""Run configuration: a TOML file mapped onto nested dataclasses.

Unknown keys anywhere in the tree are rejected, so a typo fails loudly at
startup instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import tomli

from .errors import ConfigError
from .field import FieldConfig
from .schedule import ResolutionSchedule, default_schedule


@dataclass
class PathsSection:
    data: str = "data"
    checkpoints: str = "checkpoints"
    output: str = "output"


@dataclass
class DataSection:
    n_subject: int = 6
    n_class: int = 2000
    n_pose_pool: int = 64
    size: int = 24


@dataclass
class PretrainSection:
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 16
    cond_dropout: float = 0.1
    channels: int = 32


@dataclass
class BoothSection:
    lambda_cppl: float = 1.0
    n_prior: int = 100
    steps: int = 1500
    lr: float = 5e-4
    lr_text: float = 5e-3
    batch_size: int = 6
    prior_sampling_steps: int = 50


@dataclass
class DistillSection:
    steps: int = 2000
    lambda_geo: float = 1.0
    t_lo: int = 20
    t_hi: int = 980
    anneal_floor: int = -1  # negative disables annealing
    guidance_weight: float = 1.0
    n_samples: int = 32
    lr_tables: float = 1e-2
    lr_heads: float = 1e-3
    background: object = "random"
    checkpoint_every: int = 500
    prompt: str = "a photo of sks person"
    parts: list = dc_field(default_factory=lambda: ["left_hand", "right_hand", "face"])


@dataclass
class CameraSection:
    radius: list = dc_field(default_factory=lambda: [2.5, 3.5])
    elevation_deg: list = dc_field(default_factory=lambda: [-10.0, 30.0])
    fov_deg: list = dc_field(default_factory=lambda: [35.0, 45.0])
    look_at_jitter: float = 0.05


@dataclass
class RenderSection:
    resolution: int = 64
    n_samples: int = 64
    background: list = dc_field(default_factory=lambda: [1.0, 1.0, 1.0])
    n_views: int = 8
    radius: float = 3.0
    elevation_deg: float = 0.0
    fov_deg: float = 40.0


@dataclass
class BenchSection:
    baseline: str = ""
    repeats: int = 5
    tolerance: float = 0.2


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f64"
    workers: int = 0
    paths: PathsSection = dc_field(default_factory=PathsSection)
    data: DataSection = dc_field(default_factory=DataSection)
    pretrain: PretrainSection = dc_field(default_factory=PretrainSection)
    booth: BoothSection = dc_field(default_factory=BoothSection)
    distill: DistillSection = dc_field(default_factory=DistillSection)
    camera: CameraSection = dc_field(default_factory=CameraSection)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderSection = dc_field(default_factory=RenderSection)
    schedule: list = dc_field(default_factory=list)  # list of stage tables; empty means the default
    bench: BenchSection = dc_field(default_factory=BenchSection)
    base_dir: str = "."

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def resolution_schedule(self):
        if not self.schedule:
            return default_schedule(self.distill.steps)
        return ResolutionSchedule(self.schedule)

    def validate(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.workers < 0:
            raise ConfigError("workers must be nonnegative (0 = physical cores)")
        if self.booth.lambda_cppl < 0 or self.distill.lambda_geo < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 0 <= self.distill.t_lo < self.distill.t_hi <= 1000:
            raise ConfigError("need 0 <= distill.t_lo < distill.t_hi <= 1000")
        bg = self.distill.background
        if not (bg == "random" or (isinstance(bg, list) and len(bg) == 3)):
            raise ConfigError("distill.background must be 'random' or an RGB triple")
        for name in ("radius", "elevation_deg", "fov_deg"):
            lo, hi = getattr(self.camera, name)
            if lo > hi:
                raise ConfigError(f"camera.{name} range is reversed")
        try:
            self.field.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        try:
            self.resolution_schedule()
        except ConfigError as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        out = self.resolve(self.paths.output)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {out} is not creatable: {exc}") from exc
        return self


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'top level'}: {', '.join(unknown)}")
    kw = {}
    for name, value in doc.items():
        f = fields[name]
        sub = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            kw[name] = _build(type(sub), value, f"{where}.{name}" if where else name)
        else:
            kw[name] = tuple(value) if cls is FieldConfig and name.startswith("bbox") else value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def config_from_dict(doc, base_dir="."):
    cfg = _build(RunConfig, dict(doc), "")
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path=None, seed=None, precision=None, workers=None):
    """Read and validate a run config; command-line overrides win over file values."""
    doc = {}
    base = "."
    if path is not None:
        path = Path(path)
        try:
            doc = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = str(path.parent)
    cfg = config_from_dict(doc, base)
    if seed is not None:
        cfg.seed = int(seed)
    if precision is not None:
        cfg.precision = precision
    if workers is not None:
        cfg.workers = int(workers)
    if cfg.workers == 0:
        cfg.workers = physical_cores()
    return cfg.validate()


def physical_cores():
    """CPUs available to this process (the stdlib does not separate physical cores)."""
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
