"""Pipeline configuration: nested dataclasses loaded from JSON or TOML with strict keys."""
from __future__ import annotations

import copy
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

from .cloudgen import SceneParams
from .errors import ConfigError
from .geometry import GridSpec, HeightSweep
from .layernet import LayerNetConfig, TrainConfig
from .refine import RefineConfig
from .wind import WindParams

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass
class GridConfig:
    origin: tuple = (0.0, 0.0, 0.0)
    dims: tuple = (200, 200, 160)
    voxel_size: tuple = (25.0, 25.0, 25.0)

    def spec(self) -> GridSpec:
        return GridSpec(self.origin, self.dims, self.voxel_size)


@dataclass
class SweepConfig:
    start: float = 400.0
    stop: float = 3800.0
    step: float = 200.0

    def sweep(self) -> HeightSweep:
        if self.step <= 0 or self.stop < self.start:
            raise ConfigError("sweep needs step > 0 and stop >= start", field="sweep")
        return HeightSweep.regular(self.start, self.stop, self.step)


@dataclass
class RigConfig:
    path: str = ""                  # rig JSON; empty -> generated ring of camera pairs
    n_pairs: int = 3
    width: int = 64
    height: int = 64
    fov_deg: float = 100.0
    radius_factor: float = 0.62
    baseline_factor: float = 0.08
    elevation_deg: float = -1.0     # < 0 -> fov/2 - 5


@dataclass
class OpticsConfig:
    droplet_radius: float = 20e-6
    water_density: float = 1000.0
    q_scat: float = 2.0
    sun_elevation_deg: float = 50.0
    sun_azimuth_deg: float = 135.0
    sky_radiance: float = 1.0
    sun_radiance: float = 20.0
    step: float = 12.5
    periodic: bool = True


@dataclass
class SceneConfig:
    n_scenes: int = 1
    coverage_target: float = 0.3
    base_height_range: tuple = (500.0, 1500.0)
    thickness_range: tuple = (100.0, 600.0)
    peak_lwc_range: tuple = (1e-4, 1.5e-3)
    cell_count_range: tuple = (4, 12)
    cell_radius_range: tuple = (150.0, 500.0)
    max_attempts: int = 20
    velocity: tuple = (5.0, 0.0)
    n_frames: int = 20
    spacing: float = 15.0
    train_sequence_stride: int = 0   # also train on every k-th sequence frame (0: no)

    def params(self, seed) -> SceneParams:
        return SceneParams(seed=seed, coverage_target=self.coverage_target,
                           base_height_range=self.base_height_range,
                           thickness_range=self.thickness_range,
                           peak_lwc_range=self.peak_lwc_range,
                           cell_count_range=self.cell_count_range,
                           cell_radius_range=self.cell_radius_range,
                           max_attempts=self.max_attempts)


@dataclass
class ModelConfig:
    layer: LayerNetConfig = field(default_factory=LayerNetConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)


@dataclass
class WindConfig:
    params: WindParams = field(default_factory=WindParams)
    level_stride: int = 5            # candidate slice centres every k levels


@dataclass
class EvalConfig:
    radar_x: float = -1.0            # < 0 -> footprint centre
    radar_y: float = -1.0
    bin_size: float = 30.0
    top: float = 4000.0
    tick: float = 30.0
    figures: bool = True
    dpi: int = 100
    fig_width: float = 8.0
    fig_height: float = 4.0


@dataclass
class PipelineConfig:
    seed: int = 0
    output: str = "runs/default"
    grid: GridConfig = field(default_factory=GridConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    optics: OpticsConfig = field(default_factory=OpticsConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train1: TrainConfig = field(default_factory=TrainConfig)
    train2: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000))
    wind: WindConfig = field(default_factory=WindConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        spec = _wrap("grid", self.grid.spec)
        sweep = self.sweep.sweep()
        if self.model.layer.n_planes != sweep.H:
            raise ConfigError(f"n_planes={self.model.layer.n_planes} but the sweep has {sweep.H} planes",
                              field="model.layer.n_planes")
        if self.model.refine.d_feat != self.model.layer.d_f:
            raise ConfigError("refiner features come from the stage-1 encoder; d_feat must equal d_f",
                              field="model.refine.d_feat")
        if self.scene.n_scenes < 1:
            raise ConfigError("need at least one scene", field="scene.n_scenes")
        if self.scene.n_frames < 2:
            raise ConfigError("need at least two frames", field="scene.n_frames")
        if self.scene.spacing <= 0:
            raise ConfigError("frame spacing must be positive", field="scene.spacing")
        if self.optics.step > spec.sz / 2:
            raise ConfigError("march step exceeds half the vertical voxel size", field="optics.step")
        _wrap("scene", lambda: self.scene.params(self.seed))
        return self

    def to_dict(self):
        return to_dict(self)


def _wrap(prefix, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - domain validation errors become config errors
        raise ConfigError(str(exc), field=prefix) from exc


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _convert(value, default, path):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a table, got {type(value).__name__}", field=path)
        return from_dict(type(default), value, path, base=default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", field=path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=path)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", field=path)
        if default and len(value) != len(default):
            raise ConfigError(f"expected {len(default)} values, got {len(value)}", field=path)
        if default:
            return tuple(_convert(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
        return tuple(value)
    return value


def from_dict(cls, data, path="", base=None):
    """Build ``cls`` from ``data``; unknown keys and wrong types raise :class:`ConfigError`."""
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError("unknown key", field=f"{path}.{k}" if path else k)
    kwargs = {}
    for f in dataclasses.fields(cls):
        cur = getattr(base, f.name)
        p = f"{path}.{f.name}" if path else f.name
        kwargs[f.name] = _convert(data[f.name], cur, p) if f.name in data else copy.deepcopy(cur)
    try:
        return _wrap(path or "config", lambda: cls(**kwargs))
    except ConfigError as exc:
        if not path or not exc.field or exc.field.startswith(path):
            raise
        # nested validators name their own section; rebase onto where it sits in this file
        leaf = exc.field.split(".", 1)[1] if "." in exc.field else ""
        msg = str(exc).split(": ", 1)[-1]
        raise ConfigError(msg, field=f"{path}.{leaf}" if leaf else path) from exc


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Read JSON or TOML (by extension), apply ``key.path=value`` overrides, validate."""
    data = {}
    if path:
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", field=str(path)) from exc
        try:
            if str(path).endswith(".toml"):
                data = tomllib.loads(raw.decode("utf-8"))
            else:
                data = json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse config: {exc}", field=str(path)) from exc
    for item in overrides:
        apply_override(data, item)
    return from_dict(PipelineConfig, data).validate()


def apply_override(data, item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    d = data
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError("cannot override inside a non-table value", field=key)
    d[parts[-1]] = value
    return data


def demo_config(output="runs/demo", seed=7) -> PipelineConfig:
    """Reduced 64x64x64 closed-loop configuration sized for a desktop CPU."""
    cfg = PipelineConfig(seed=seed, output=output)
    cfg.grid = GridConfig(dims=(64, 64, 64))
    cfg.sweep = SweepConfig(start=300.0, stop=1500.0, step=100.0)
    cfg.scene = SceneConfig(n_scenes=1, coverage_target=0.2, base_height_range=(400.0, 1000.0),
                            thickness_range=(75.0, 300.0), cell_radius_range=(100.0, 300.0),
                            velocity=(2.0, 1.0), n_frames=20, spacing=15.0,
                            train_sequence_stride=5)
    cfg.model = ModelConfig(layer=LayerNetConfig(n_planes=13, base_channels=32, depth=3),
                            refine=RefineConfig(width=32, depth=2, heads=4))
    cfg.train1 = TrainConfig(steps=600, learning_rate=1e-3, eval_every=100)
    cfg.train2 = TrainConfig(steps=300, learning_rate=1e-3, eval_every=50)
    cfg.wind = WindConfig(level_stride=4)
    return cfg.validate()


def save_config(path, cfg: PipelineConfig):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
