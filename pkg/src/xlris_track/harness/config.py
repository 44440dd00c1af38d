"""Experiment configuration: JSON blocks, defaults, validation and hashing."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path

from .. import channel_sim as cs
from ..trajectory import KINDS

STAGES = ("generate", "train-recon", "extract-features", "train-tracker", "evaluate")
SOURCES = ("bs", "recon_ris", "true_ris")


class ConfigError(ValueError):
    """Every problem found while loading a config, one per line."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class GeometryBlock:
    n1: int = 10
    n2: int = 10
    m1: int = 4
    m2: int = 4
    spacing: float | None = None  # None: half a wavelength
    wavelength: float = cs.DEFAULT_WAVELENGTH
    ris_center: list = field(default_factory=lambda: [6.0, 0.0, 2.0])
    bs_center: list = field(default_factory=lambda: [0.0, 5.0, 1.5])
    beta: list = field(default_factory=lambda: [1.0, 0.0])  # real, imag


@dataclass
class ScenarioBlock:
    n_scatterers: int = 9  # plus the line-of-sight path
    power_ratio: float = 10.0
    omega_mode: str = "ones"
    ris_noise: bool = False
    tx_power_dbm: float = 30.0


@dataclass
class TrajectoryBlock:
    kinds: list = field(default_factory=lambda: list(KINDS))
    count: int = 500  # per kind
    steps: int = 11
    bounds: list = field(default_factory=lambda: [10.0, 10.0, 3.0])
    test_fraction: float = 0.2
    amplitude: float = 2.0
    wave_length: float = 5.0
    wave_span: float = 6.0
    spiral_a: float = 0.1
    spiral_b: float = 3.0
    spiral_dtheta: float = math.pi / 20


@dataclass
class ReconBlock:
    upsample_target: list = field(default_factory=lambda: [16, 16])
    upsample_mode: str = "bilinear"
    n_dense_modules: int = 2
    blocks_per_module: int = 3
    growth_channels: int = 8
    initial_channels: int = 3
    compression: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 5
    max_train: int | None = 4000
    val_fraction: float = 0.1


@dataclass
class FeatureBlock:
    n_f: int = 16
    filters: list = field(default_factory=lambda: [8, 16])
    kernel: int = 3
    pool: int = 2
    cnn_epochs: int = 8
    cnn_batch_size: int = 64
    cnn_lr: float = 1e-3
    cnn_max_train: int | None = 6000
    k_rows: int = 2
    k_cols: int = 2
    snapshots: int = 64
    resolution_deg: float = 2.0
    theta_range_deg: list = field(default_factory=lambda: [0.0, 180.0])
    phi_range_deg: list = field(default_factory=lambda: [0.0, 180.0])
    preprocess: bool = True
    pilot_mode: str = "random_phase"


@dataclass
class TrackerBlock:
    window: int = 10
    layers: int = 2
    hidden: int = 32
    decoder_hidden: int = 32
    dropout: float = 0.2
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    patience: int | None = None
    val_fraction: float = 0.1
    sources: list = field(default_factory=lambda: list(SOURCES))
    ablations: bool = True  # unidirectional and single-layer variants
    ablation_source: str = "recon_ris"
    convergence: bool = True  # one tracker per trajectory kind
    convergence_source: str = "recon_ris"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    geometry: GeometryBlock = field(default_factory=GeometryBlock)
    scenario: ScenarioBlock = field(default_factory=ScenarioBlock)
    trajectory: TrajectoryBlock = field(default_factory=TrajectoryBlock)
    snr_db: list = field(default_factory=lambda: [0.0, 10.0, 20.0])
    recon: ReconBlock = field(default_factory=ReconBlock)
    features: FeatureBlock = field(default_factory=FeatureBlock)
    tracker: TrackerBlock = field(default_factory=TrackerBlock)
    stages: list = field(default_factory=lambda: list(STAGES))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of every field that affects results; ``stages`` and ``name`` excluded."""
        d = self.to_dict()
        d.pop("stages")
        d.pop("name")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _coerce(value, default, path, errs):
    """Check a JSON value against the type of its default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errs.append(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            errs.append(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errs.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        errs.append(f"{path}: expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        errs.append(f"{path}: expected a list, got {value!r}")
    return value


def _build_block(cls, data, path, errs):
    obj = cls()
    if not isinstance(data, dict):
        errs.append(f"{path}: expected an object")
        return obj
    names = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in names:
            errs.append(f"{path}.{key}: unknown field")
            continue
        setattr(obj, key, _coerce(value, getattr(obj, key), f"{path}.{key}", errs))
    return obj


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and validate; raises ConfigError listing every problem at once."""
    errs = []
    cfg = ExperimentConfig()
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected an object"])
    for f in fields(ExperimentConfig):
        if f.name not in data:
            continue
        default = getattr(cfg, f.name)
        if is_dataclass(default):
            setattr(cfg, f.name, _build_block(type(default), data[f.name], f.name, errs))
        else:
            setattr(cfg, f.name, _coerce(data[f.name], default, f.name, errs))
    for key in data:
        if key not in {f.name for f in fields(ExperimentConfig)}:
            errs.append(f"{key}: unknown field")
    if not errs:
        errs = validate(cfg)
    if errs:
        raise ConfigError(errs)
    cfg.snr_db = [float(s) for s in cfg.snr_db]
    return cfg


def validate(cfg: ExperimentConfig) -> list:
    errs = []
    g, t, r, fb, tr = cfg.geometry, cfg.trajectory, cfg.recon, cfg.features, cfg.tracker
    for name in ("n1", "n2", "m1", "m2"):
        if getattr(g, name) < 1:
            errs.append(f"geometry.{name} must be positive")
    if g.wavelength <= 0 or (g.spacing is not None and g.spacing <= 0):
        errs.append("geometry.wavelength and spacing must be positive")
    for name in ("ris_center", "bs_center"):
        if len(getattr(g, name)) != 3:
            errs.append(f"geometry.{name} must have 3 coordinates")
    if len(g.beta) != 2:
        errs.append("geometry.beta must be [real, imag]")
    if cfg.scenario.n_scatterers < 0:
        errs.append("scenario.n_scatterers must be >= 0")
    if cfg.scenario.omega_mode not in ("ones", "random"):
        errs.append("scenario.omega_mode must be 'ones' or 'random'")
    bad = [k for k in t.kinds if k not in KINDS]
    if bad or not t.kinds:
        errs.append(f"trajectory.kinds must be a nonempty subset of {list(KINDS)}")
    if t.count < 2:
        errs.append("trajectory.count must be >= 2 so both splits are nonempty")
    if t.steps < tr.window + 1:
        errs.append(f"trajectory.steps ({t.steps}) must be >= tracker.window + 1 "
                    f"({tr.window + 1})")
    if len(t.bounds) != 3 or min(t.bounds) <= 0:
        errs.append("trajectory.bounds must be 3 positive extents")
    if not 0 < t.test_fraction < 1:
        errs.append("trajectory.test_fraction must be in (0, 1)")
    if not cfg.snr_db:
        errs.append("snr_db must list at least one value")
    elif not all(isinstance(s, (int, float)) and not isinstance(s, bool) and math.isfinite(s)
                 for s in cfg.snr_db):
        errs.append("snr_db entries must be finite numbers")
    if len(r.upsample_target) != 2:
        errs.append("recon.upsample_target must be [height, width]")
    else:
        h, w = r.upsample_target
        if min(h, w) >> r.n_dense_modules < 1:
            errs.append(f"recon.upsample_target {r.upsample_target} is too small for "
                        f"{r.n_dense_modules} halving transitions")
    if r.upsample_mode not in ("bilinear", "nearest"):
        errs.append("recon.upsample_mode must be 'bilinear' or 'nearest'")
    if r.n_dense_modules < 1 or r.blocks_per_module < 1 or r.growth_channels < 1:
        errs.append("recon module/block/growth counts must be positive")
    if not 0 < r.val_fraction < 1:
        errs.append("recon.val_fraction must be in (0, 1)")
    if fb.k_rows < 1 or g.n1 % fb.k_rows:
        errs.append(f"geometry.n1 ({g.n1}) must be divisible by features.k_rows ({fb.k_rows})")
    if fb.k_cols < 1 or g.n2 % fb.k_cols:
        errs.append(f"geometry.n2 ({g.n2}) must be divisible by features.k_cols ({fb.k_cols})")
    elif fb.k_rows >= 1 and (g.n1 // fb.k_rows) * (g.n2 // fb.k_cols) < 2:
        errs.append("MUSIC sub-arrays need at least 2 elements")
    if fb.snapshots < 2:
        errs.append("features.snapshots must be >= 2")
    if fb.resolution_deg <= 0:
        errs.append("features.resolution_deg must be positive")
    if fb.pilot_mode not in ("random_phase", "constant"):
        errs.append("features.pilot_mode must be 'random_phase' or 'constant'")
    reduce = fb.pool ** len(fb.filters)
    for label, rows, cols in (("RIS", g.n1, g.n2), ("BS", g.m1, g.m2)):
        if rows < reduce or cols < reduce:
            errs.append(f"{label} array {rows}x{cols} does not survive {len(fb.filters)} "
                        f"pooling stages of {fb.pool}")
    if tr.layers < 2:
        errs.append("tracker.layers must be >= 2")
    if not 0 <= tr.dropout < 1:
        errs.append("tracker.dropout must be in [0, 1)")
    if not 0 < tr.val_fraction < 1:
        errs.append("tracker.val_fraction must be in (0, 1)")
    bad = [s for s in tr.sources if s not in SOURCES]
    if bad or not tr.sources:
        errs.append(f"tracker.sources must be a nonempty subset of {list(SOURCES)}")
    if tr.ablations and tr.ablation_source not in tr.sources:
        errs.append(f"tracker.ablation_source {tr.ablation_source!r} must be in tracker.sources")
    if tr.convergence and tr.convergence_source not in tr.sources:
        errs.append(f"tracker.convergence_source {tr.convergence_source!r} must be in "
                    "tracker.sources")
    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        errs.append(f"unknown stages {bad}; choose from {list(STAGES)}")
    return errs


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    return config_from_dict(data)


def profile_path(name: str) -> Path:
    """Path to a bundled profile (``desk`` or ``full``)."""
    return Path(str(resources.files("xlris_track") / "profiles" / f"{name}.json"))


def load_profile(name: str) -> ExperimentConfig:
    return load_config(profile_path(name))
