"""YAML-based experiment configuration."""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml
from matplotlib.colors import to_rgb

from lsqtomo.errors import ConfigError, SchemaVersionError, StorageError

log = logging.getLogger(__name__)

CONFIG_PATH = Path("config.yaml")
SCHEMA_VERSION = 1
TIME_UNITS = ("absolute", "pi_over_gap")


@dataclass
class ModelConfig:
    kind: str = "morse"
    anharmonicity: float = 0.279
    frequency: float = 1.0
    max_level: int = 64


@dataclass
class StateConfig:
    alpha: float = -1.5
    alpha_imag: float = 0.0
    n_max: int = 12


@dataclass
class EvolutionConfig:
    duration: float = 6.0
    time_units: str = "pi_over_gap"  # multiples of pi / (w_1 - w_0)
    n_times: int = 120
    damping: float = 0.0


@dataclass
class MeasurementConfig:
    mode: str = "events"  # events | grid
    events_per_time: int = 5000
    total_events: int = 100_000
    n_positions: int = 15
    x_min: float = -2.0
    x_max: float = 10.0
    sigma_t: float = 0.0
    sigma_x: float = 0.0
    time_units: str = "pi_over_gap"
    time_averaged: bool = False


@dataclass
class ReconstructionConfig:
    kernels: str = "spacetime"  # factorable | spacetime
    classes: str = "diagonal"  # factorable only: diagonal | all
    scheme: str = "period"  # factorable only: period | biorthonormal
    regularization: str = "none"  # none | tikhonov | svd
    strength: float = 0.0
    lambdas: list[float] = field(default_factory=lambda: [1e-4, 2e-3, 5e-3, 5e-2])
    bias_replicates: int = 0
    poisson_weights: bool = False
    n_max: Optional[int] = None  # reconstruction truncation; defaults to state.n_max


@dataclass
class GridConfig:
    tail_tol: float = 1e-10
    panels: int = 64
    order: int = 8


@dataclass
class ExportConfig:
    plots: bool = False
    kernel_levels: list[int] = field(default_factory=lambda: [2, 11])
    plot_x_min: float = -2.0
    plot_x_max: float = 10.0
    plot_points: int = 401
    baseline: bool = False  # also reconstruct equal-event time-averaged data
    truncation: bool = False  # predicted offsets from levels above reconstruction.n_max


@dataclass
class ThemeConfig:
    background: str = "#ffffff"
    text: str = "#222222"
    text_dim: str = "#8892a0"
    primary: str = "#0f3460"
    accent: str = "#e94560"
    success: str = "#00c853"
    warning: str = "#ffd600"
    error: str = "#ff1744"
    info: str = "#2979ff"

    def color(self, name: str) -> tuple[float, float, float]:
        """Convert a hex color string to a matplotlib RGB tuple."""
        return to_rgb(getattr(self, name, self.text))


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 12345
    output_dir: str = "runs/latest"
    ledger_path: str = "runs/ledger.db"
    model: ModelConfig = field(default_factory=ModelConfig)
    state: StateConfig = field(default_factory=StateConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    theme: ThemeConfig = field(default_factory=ThemeConfig)


def _merge_dict_to_dataclass(dc, d: dict, prefix: str = ""):
    """Recursively merge a dict into a dataclass instance."""
    for key, value in d.items():
        if not hasattr(dc, key):
            log.warning("Ignoring unknown config key %s%s", prefix, key)
            continue
        attr = getattr(dc, key)
        if hasattr(attr, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a mapping")
            _merge_dict_to_dataclass(attr, value, f"{prefix}{key}.")
        else:
            setattr(dc, key, value)


def load_config(path: Optional[Path] = None) -> ExperimentConfig:
    """Load configuration from YAML file, with env var overrides."""
    config = ExperimentConfig()

    if path is not None and not Path(path).exists():
        raise StorageError(f"config file {path} not found")
    path = Path(path) if path is not None else CONFIG_PATH
    if path.exists():
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping at the top level")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"{path}: schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        _merge_dict_to_dataclass(config, raw)
        log.info("Loaded config from %s", path)
    else:
        log.warning("No config.yaml found, using defaults")

    # Environment variable overrides
    if seed := os.environ.get("LSQTOMO_SEED"):
        try:
            config.seed = int(seed)
        except ValueError:
            raise ConfigError(f"LSQTOMO_SEED must be an integer, got {seed!r}") from None
    if output_dir := os.environ.get("LSQTOMO_OUTPUT_DIR"):
        config.output_dir = output_dir
    if ledger := os.environ.get("LSQTOMO_LEDGER"):
        config.ledger_path = ledger

    return config


def dump_config(config: ExperimentConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(asdict(config), f, sort_keys=False)
    return path


def config_hash(config: ExperimentConfig) -> str:
    """Digest of the experiment parameters; output locations do not enter it."""
    params = asdict(config)
    for key in ("output_dir", "ledger_path"):
        params.pop(key)
    text = yaml.safe_dump(params, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _require(condition: bool, name: str, message: str):
    if not condition:
        raise ConfigError(f"{name}: {message}")


def _check_choice(value: str, name: str, choices: tuple[str, ...]):
    _require(value in choices, name, f"must be one of {', '.join(choices)}, got {value!r}")


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _check_numbers(section, name: str):
    for f in fields(section):
        value = getattr(section, f.name)
        if f.type in ("float", "int"):
            _require(_is_number(value), f"{name}.{f.name}", f"must be a finite number, got {value!r}")
        if f.type == "int":
            _require(float(value).is_integer(), f"{name}.{f.name}", f"must be an integer, got {value!r}")
            setattr(section, f.name, int(value))


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    """Reject every invariant violation before any computation; returns the config for chaining."""
    from lsqtomo.tomography.oscillators import OscillatorModel, bound_state_count

    if config.schema_version != SCHEMA_VERSION:
        raise SchemaVersionError(f"schema_version {config.schema_version} is not supported")
    for name in ("model", "state", "evolution", "measurement", "reconstruction", "grid", "export"):
        _check_numbers(getattr(config, name), name)
    _require(isinstance(config.seed, int) and config.seed >= 0, "seed", "must be a nonnegative integer")

    m = config.model
    _check_choice(m.kind, "model.kind", ("harmonic", "morse"))
    if m.kind == "morse":
        _require(m.anharmonicity > 0, "model.anharmonicity", "must be > 0")
        limit = bound_state_count(OscillatorModel.morse(m.anharmonicity))
    else:
        _require(m.frequency > 0, "model.frequency", "must be > 0")
        _require(m.max_level >= 0, "model.max_level", "must be >= 0")
        limit = m.max_level

    s = config.state
    _require(0 <= s.n_max <= limit, "state.n_max", f"must lie in 0..{limit} for this model")

    e = config.evolution
    _require(e.duration > 0, "evolution.duration", "must be > 0")
    _check_choice(e.time_units, "evolution.time_units", TIME_UNITS)
    _require(e.n_times >= 1, "evolution.n_times", "must be >= 1")
    _require(e.damping >= 0, "evolution.damping", "must be >= 0")

    ms = config.measurement
    _check_choice(ms.mode, "measurement.mode", ("events", "grid"))
    _check_choice(ms.time_units, "measurement.time_units", TIME_UNITS)
    if ms.mode == "events":
        _require(ms.events_per_time >= 1, "measurement.events_per_time", "must be >= 1")
    else:
        _require(ms.total_events >= 1, "measurement.total_events", "must be >= 1")
        _require(ms.n_positions >= 2, "measurement.n_positions", "must be >= 2")
        _require(ms.x_max > ms.x_min, "measurement.x_max", "must exceed measurement.x_min")
    _require(ms.sigma_t >= 0 and ms.sigma_x >= 0, "measurement.sigma_t/sigma_x", "must be >= 0")
    smeared = ms.sigma_t > 0 or ms.sigma_x > 0
    _require(not smeared or ms.mode == "grid", "measurement.mode", "smeared data are gridded counts")
    _require(not smeared or e.damping == 0, "evolution.damping", "smearing is supported for unitary evolution only")

    r = config.reconstruction
    if r.n_max is not None:
        _require(_is_number(r.n_max) and float(r.n_max).is_integer(), "reconstruction.n_max",
                 f"must be an integer, got {r.n_max!r}")
        r.n_max = int(r.n_max)
        _require(0 <= r.n_max <= s.n_max, "reconstruction.n_max", f"must lie in 0..{s.n_max} (state.n_max)")
    rec_n_max = s.n_max if r.n_max is None else r.n_max
    _check_choice(r.kernels, "reconstruction.kernels", ("factorable", "spacetime"))
    _check_choice(r.classes, "reconstruction.classes", ("diagonal", "all"))
    _check_choice(r.scheme, "reconstruction.scheme", ("period", "biorthonormal"))
    _check_choice(r.regularization, "reconstruction.regularization", ("none", "tikhonov", "svd"))
    if r.regularization == "tikhonov":
        _require(r.strength > 0, "reconstruction.strength", "Tikhonov lambda must be > 0")
    if r.regularization == "svd":
        _require(r.strength >= 0, "reconstruction.strength", "SVD cut must be >= 0")
    lambdas = list(r.lambdas)
    _require(all(_is_number(v) and v > 0 for v in lambdas), "reconstruction.lambdas", "must be positive numbers")
    _require(all(b > a for a, b in zip(lambdas, lambdas[1:])), "reconstruction.lambdas", "must be ascending")
    _require(r.bias_replicates == 0 or r.bias_replicates >= 2, "reconstruction.bias_replicates", "must be 0 or >= 2")
    if r.kernels == "factorable":
        _require(e.damping == 0, "reconstruction.kernels", "damped evolution needs space-time kernels")
        _require(not smeared, "reconstruction.kernels", "smeared data need space-time kernels")
        if r.scheme == "period" and not ms.time_averaged:
            _require(m.kind == "harmonic", "reconstruction.scheme",
                     "a finite interval never spans whole periods of every Morse frequency; "
                     "use biorthonormal or measurement.time_averaged")
            cycles = e.duration / 2 if e.time_units == "pi_over_gap" else e.duration * m.frequency / (2 * math.pi)
            _require(round(cycles) >= 1 and abs(cycles - round(cycles)) <= 1e-9 * cycles, "evolution.duration",
                     "the period scheme needs a whole number of oscillator periods")
    if ms.time_averaged:
        _require(r.kernels == "factorable" and r.classes == "diagonal", "measurement.time_averaged",
                 "time-averaged data support diagonal factorable reconstruction only")
        _require(e.damping == 0, "measurement.time_averaged", "needs unitary evolution")

    g = config.grid
    _require(g.tail_tol > 0, "grid.tail_tol", "must be > 0")
    _require(g.panels >= 1 and g.order >= 1, "grid.panels/order", "must be >= 1")

    x = config.export
    _require(x.plot_points >= 2, "export.plot_points", "must be >= 2")
    _require(x.plot_x_max > x.plot_x_min, "export.plot_x_max", "must exceed export.plot_x_min")
    _require(all(0 <= n <= rec_n_max for n in x.kernel_levels), "export.kernel_levels",
             f"must lie in 0..{rec_n_max}")
    if x.baseline:
        _require(e.damping == 0 and not smeared and not ms.time_averaged, "export.baseline",
                 "the time-averaged baseline needs unsmeared, unitary, time-resolved data")
    if x.truncation:
        _require(r.kernels == "factorable", "export.truncation",
                 "truncation offsets are predicted for factorable kernels")
    return config
