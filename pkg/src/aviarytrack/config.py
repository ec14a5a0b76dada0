"""Pipeline configuration: one YAML/JSON document, every threshold in one place."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .simulator import VOLUME

STAGES = ("simulate", "reconstruct", "track", "retrack", "evaluate", "ethogram")
OUT_ENV = "AVIARYTRACK_OUT"
_MASK64 = (1 << 64) - 1


@dataclass
class PathsConfig:
    """Input/output locations. Unset inputs default to files inside ``out_dir``."""

    out_dir: str = "aviarytrack_out"
    calibration: str | None = None
    detections: str | None = None
    ground_truth: str | None = None
    manifest: str | None = None
    clusters: str | None = None
    tracklets: str | None = None
    tracks: str | None = None
    trees: str | None = None
    timelines: str | None = None
    songs: str | None = None
    birds: str | None = None


@dataclass
class MotionStatsConfig:
    stationary_s: list[float] = field(default_factory=lambda: [3.7, 17.6, 165.0])
    motion_frames: list[float] = field(default_factory=lambda: [35.0, 63.0, 180.0])
    peak_speed: list[float] = field(default_factory=lambda: [3.0, 8.0])
    max_pause_s: float = 2.0
    floor_prob: float = 0.25


@dataclass
class NoiseConfig:
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    centroid_jitter: float = 0.0
    merge_occlusions: bool = True
    blackouts: list[list[int]] = field(default_factory=list)


@dataclass
class SimulatorConfig:
    n_birds: int = 15
    n_males: int = 6
    fps: float = 40.0
    duration: float = 60.0
    min_separation: float = 0.0
    stationary_jitter: float = 0.01
    motion_stats: MotionStatsConfig = field(default_factory=MotionStatsConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    songs_per_minute: float = 2.0
    gzip_detections: bool = True


@dataclass
class ReconstructionParams:
    eps_px: float = 3.0
    trifocal_tol: float = 3.0
    trifocal_min_views: int = 2
    trifocal_slack: int = 1
    ghost_window: int = 2
    ghost_radius: float = 0.15
    dbscan_eps: float = 0.12
    min_pts: int = 4
    mask_cap: int = 400
    clip_to_volume: bool = True
    bounds_margin: float = 0.2


@dataclass
class TrackerParams:
    gate: float = 0.25
    init_gate: float = 0.3
    smooth_sigma: float = 1.5
    smooth_radius: int = 4


@dataclass
class RetrackParams:
    max_gap: int = 20
    join_dist: float = 0.3
    vel_tol: float = float("inf")
    min_length: int = 10


@dataclass
class EvaluationParams:
    thresholds: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 1.0])
    head_scoring: bool = False
    oracle: bool = True
    identity_radius: float = 0.1
    figures: bool = True


@dataclass
class EthogramParams:
    d_int: float = 0.5
    stay_wait: float = 1.0
    flight_speed: float = 0.5
    dyad_window: float = 60.0
    figures: bool = True


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    reconstruction: ReconstructionParams = field(default_factory=ReconstructionParams)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    retracking: RetrackParams = field(default_factory=RetrackParams)
    evaluation: EvaluationParams = field(default_factory=EvaluationParams)
    ethogram: EthogramParams = field(default_factory=EthogramParams)
    rng_seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of every parameter except the output location."""
        d = self.to_dict()
        d["paths"] = {k: v for k, v in d["paths"].items() if k != "out_dir"}
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def out_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.paths.out_dir)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.rng_seed, stage)

    def validate(self) -> None:
        s = self.simulator
        if s.n_birds < 1 or not 0 <= s.n_males <= s.n_birds:
            raise ConfigError("simulator.n_birds must be >= 1 and n_males within [0, n_birds]")
        if s.fps <= 0 or s.duration < 0:
            raise ConfigError("simulator.fps must be positive and duration >= 0")
        if s.songs_per_minute < 0:
            raise ConfigError("simulator.songs_per_minute must be >= 0")
        r = self.reconstruction
        if min(r.eps_px, r.trifocal_tol, r.ghost_radius, r.dbscan_eps) <= 0:
            raise ConfigError("reconstruction thresholds must be positive")
        if r.min_pts < 1 or r.mask_cap < 1 or r.ghost_window < 0 or r.trifocal_min_views < 1 \
                or r.trifocal_slack < 0:
            raise ConfigError("reconstruction.min_pts, mask_cap, trifocal_min_views must be >= 1 and "
                              "trifocal_slack >= 0")
        t = self.tracker
        if min(t.gate, t.init_gate, t.smooth_sigma) <= 0 or t.smooth_radius < 1:
            raise ConfigError("tracker parameters must be positive")
        rt = self.retracking
        if rt.max_gap < 1 or rt.join_dist <= 0 or rt.vel_tol <= 0 or rt.min_length < 1:
            raise ConfigError("retracking parameters must be positive")
        th = self.evaluation.thresholds
        if not th or any(x <= 0 for x in th) or list(th) != sorted(th):
            raise ConfigError("evaluation.thresholds must be positive and increasing")
        e = self.ethogram
        if min(e.d_int, e.flight_speed, e.dyad_window) <= 0 or e.stay_wait < 0:
            raise ConfigError("ethogram parameters must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def volume_bounds(self):
        return VOLUME if self.reconstruction.clip_to_volume else None


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, stage: str) -> int:
    """Independent 63-bit seed for ``stage``, stable across runs and platforms."""
    return splitmix64((int(seed) & _MASK64) ^ zlib.crc32(stage.encode())) >> 1


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, key)
        else:
            kwargs[name] = _coerce(tp, value, key)
    return cls(**kwargs)


def _coerce(tp, value, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    if origin is typing.Union or origin is types.UnionType:
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, key)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return [_coerce(args[0], v, f"{key}[{i}]") if args else v for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, (str, int, float)):
            raise ConfigError(f"{key}: expected a string")
        return str(value)
    return value


def config_from_dict(data: dict | None) -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {}, "")
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    """Read a YAML or JSON config; unknown keys are errors."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def parse_stages(text: str | None) -> tuple[str, ...]:
    """``"reconstruct:evaluate"`` -> the contiguous run of stage names."""
    if not text:
        return STAGES
    parts = text.split(":")
    if len(parts) == 1:
        parts = [parts[0], parts[0]]
    if len(parts) != 2:
        raise ConfigError(f"bad stage range {text!r}; use FIRST:LAST")
    first = parts[0] or STAGES[0]
    last = parts[1] or STAGES[-1]
    for s in (first, last):
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
    i, j = STAGES.index(first), STAGES.index(last)
    if i > j:
        raise ConfigError(f"stage range {text!r} runs backwards")
    return STAGES[i:j + 1]
