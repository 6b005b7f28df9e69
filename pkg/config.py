"""
Run configuration: defaults, the flat YAML settings file, CLI overrides and
conversion to a SimConfig
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from adversary import AdversaryConfig
from engine import WORKERS_ENV, SimConfig
from protocol import BackoffParams
from sinr import PhysicalConfig
from topology import TopologySpec

logger = logging.getLogger(__name__)


class Config:
    ALPHA = 3.0
    BETA = 2.0
    THETA = 1.0
    POWER = 8.0
    EPSILON = 1.0 / 3.0
    WINDOW = 60
    ROUNDS = 3000
    P_HAT = 1.0 / 24.0
    WIDTH = 25.0
    HEIGHT = 25.0
    NODES = 500
    JAMMER = "reg"
    SEEDS = 10
    CW_MIN = 2
    CW_MAX = 1024
    OUTPUT_DIR = "out"
    WORKERS_ENV = WORKERS_ENV
    # Constant-jammer level for the impossibility scenario, in units of theta
    IMPOSSIBILITY_LEVEL = 1.1


ExperimentKind = Literal[
    "single",
    "scale_sweep",
    "density_sweep",
    "het_density",
    "power_sweep",
    "convergence",
    "impossibility",
    "epsilon_sweep",
    "baseline_compare",
]

# Per-experiment values for keys the user did not set
KIND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "scale_sweep": {"grid": {"n": [250, 500, 1000, 2000], "alpha": [3.0, 4.0]}},
    "density_sweep": {"grid": {"n": [100, 250, 500, 1000, 2000]}},
    "het_density": {"topology": "het"},
    "power_sweep": {"grid": {"power": [2.0, 4.0, 8.0, 16.0]}},
    "impossibility": {"topology": "pair", "jammer": "const"},
    "epsilon_sweep": {"grid": {"epsilon": [0.1, 0.2, 1.0 / 3.0, 0.5]}},
    "baseline_compare": {"grid": {"epsilon": [0.1, 0.2, 1.0 / 3.0, 0.5]}},
}

# Keys that describe the experiment rather than a single run
_NON_GRID_KEYS = {"experiment", "grid", "seeds", "seed_list", "output_dir", "save_traces", "workers", "audit",
                  "sliding_windows"}


class ConfigError(ValueError):
    """Configuration could not be read or validated; `errors` holds (key path, message) pairs"""

    def __init__(self, message: str, errors: Optional[List[Tuple[str, str]]] = None):
        super().__init__(message)
        self.errors = errors or []


class RunSettings(BaseModel):
    """Flat, human-editable run and experiment settings"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    experiment: ExperimentKind = Field("single", description="Experiment kind")

    # Physical layer
    alpha: float = Field(Config.ALPHA, gt=2, description="Path-loss exponent")
    beta: float = Field(Config.BETA, gt=1, description="SINR threshold")
    theta: float = Field(Config.THETA, gt=0, description="Carrier-sense threshold")
    power: float = Field(Config.POWER, gt=0, description="Transmit power")
    epsilon: float = Field(Config.EPSILON, gt=0, lt=1, description="Jamming slack constant")
    cutoff: float = Field(0.0, ge=0, description="Far-field interference cutoff")

    # Adversary
    jammer: Literal["reg", "bur", "const", "adaptive", "none"] = Field(Config.JAMMER, description="Jamming strategy")
    window: int = Field(Config.WINDOW, ge=1, description="Budget window T")
    budget: Optional[float] = Field(None, ge=0, description="Budget B, derived from budget_basis when omitted")
    budget_basis: Literal["theta", "beta"] = Field("theta", description="B = (1-eps)*theta or (1-eps)*beta")
    jam_epsilon: Optional[float] = Field(None, gt=0, le=1, description="Reg/Bur jam fraction, epsilon when omitted")
    uniform_jammer: bool = Field(False, description="Reg: identical noise at every node")
    reg_mode: Literal["random", "strided"] = Field("random", description="Reg jammer variant")
    jam_level: Optional[float] = Field(None, ge=0, description="Constant jammer level")

    # Protocol
    protocol: Literal["sade", "backoff"] = Field("sade", description="MAC protocol")
    gamma: Optional[float] = Field(None, gt=0, le=1, description="SADE step, default formula when omitted")
    p_hat: float = Field(Config.P_HAT, gt=0, lt=1, description="SADE send probability cap")
    cw_min: int = Field(Config.CW_MIN, ge=1, description="Backoff minimum contention window")
    cw_max: int = Field(Config.CW_MAX, ge=1, description="Backoff maximum contention window")

    # Topology
    topology: Literal["uniform", "het", "pair", "file"] = Field("uniform", description="Placement scenario")
    n: int = Field(Config.NODES, ge=1, description="Node count (uniform)")
    width: float = Field(Config.WIDTH, gt=0)
    height: float = Field(Config.HEIGHT, gt=0)
    grid_side: int = Field(5, ge=1, description="Het: sub-squares per side")
    sub_size: float = Field(5.0, gt=0, description="Het: sub-square side length")
    lambda_min: int = Field(20, ge=0)
    lambda_max: int = Field(1000, ge=0)
    pair_distance: Optional[float] = Field(None, gt=0, description="Pair: node distance, R1 when omitted")
    topology_path: Optional[str] = Field(None, description="File: topology text file")
    cell_size: Optional[float] = Field(None, gt=0, description="Grid index cell size, R1 when omitted")

    # Run and output
    rounds: int = Field(Config.ROUNDS, ge=1)
    seed: int = Field(0, ge=0, lt=2 ** 64, description="First seed")
    seeds: int = Field(Config.SEEDS, ge=1, description="Number of consecutive seeds from `seed`")
    seed_list: Optional[List[int]] = Field(None, description="Explicit seeds, overrides seed/seeds")
    frame_length: Optional[int] = Field(None, ge=1)
    output_dir: str = Field(Config.OUTPUT_DIR)
    save_traces: bool = Field(False, description="Write per-run trace CSVs")
    workers: Optional[int] = Field(None, ge=1, description=f"Worker processes, {WORKERS_ENV} when omitted")
    audit: bool = Field(False, description="Check every run against the reception rule, budget ledger and SADE steps")
    sliding_windows: bool = Field(False, description="With audit, also bound the spend of every T consecutive rounds")

    grid: Dict[str, List[Any]] = Field(default_factory=dict, description="Sweep axes: key -> values")

    @field_validator("seed_list")
    @classmethod
    def check_seed_list(cls, v):
        if v is not None:
            if not v:
                raise ValueError("seed_list must not be empty")
            if any(s < 0 for s in v):
                raise ValueError("seeds must be >= 0")
        return v

    @field_validator("grid")
    @classmethod
    def check_grid(cls, v):
        for key, values in v.items():
            if key not in cls.model_fields or key in _NON_GRID_KEYS:
                raise ValueError(f"'{key}' cannot be swept")
            if not isinstance(values, list) or not values:
                raise ValueError(f"grid axis '{key}' needs a non-empty list")
        return v

    @model_validator(mode="after")
    def check_ranges(self):
        if self.cw_max < self.cw_min:
            raise ValueError("cw_max must be >= cw_min")
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min must not exceed lambda_max")
        if self.topology == "file" and not self.topology_path:
            raise ValueError("topology 'file' needs topology_path")
        if self.jammer == "const" and None not in (self.budget, self.jam_level) and self.jam_level > self.budget:
            raise ValueError(f"jam_level {self.jam_level} exceeds budget {self.budget}")
        return self

    def seed_values(self) -> List[int]:
        if self.seed_list is not None:
            return list(self.seed_list)
        return [self.seed + i for i in range(self.seeds)]

    def resolved_budget(self) -> float:
        if self.budget is not None:
            return self.budget
        # A constant jammer spends its level every round
        if self.jammer == "const" and self.jam_level is not None:
            return self.jam_level
        base =self.beta if self.budget_basis == "beta" else self.theta
        return (1.0 - self.epsilon) * base

    def physical(self) -> PhysicalConfig:
        return PhysicalConfig(
            alpha=self.alpha,
            beta=self.beta,
            theta=self.theta,
            power=self.power,
            epsilon=self.epsilon,
            cutoff=self.cutoff,
        )

    def to_sim_config(self, seed: Optional[int] = None) -> SimConfig:
        budget = self.resolved_budget()
        return SimConfig(
            topology=TopologySpec(
                kind=self.topology,
                n=self.n,
                width=self.width,
                height=self.height,
                grid_side=self.grid_side,
                sub_size=self.sub_size,
                lambda_min=self.lambda_min,
                lambda_max=self.lambda_max,
                pair_distance=self.pair_distance,
                path=self.topology_path,
                cell_size=self.cell_size,
            ),
            physical=self.physical(),
            adversary=AdversaryConfig(
                strategy=self.jammer,
                budget=budget,
                window=self.window,
                epsilon=self.jam_epsilon or self.epsilon,
                uniform=self.uniform_jammer,
                reg_mode=self.reg_mode,
                level=self.jam_level,
            ),
            protocol=self.protocol,
            gamma=self.gamma,
            p_hat=self.p_hat,
            backoff=BackoffParams(cw_min=self.cw_min, cw_max=self.cw_max),
            rounds=self.rounds,
            seed=self.seed if seed is None else seed,
            frame_length=self.frame_length,
            audit=self.audit,
            audit_sliding=self.sliding_windows,
        )

    def with_values(self, values: Dict[str, Any]) -> "RunSettings":
        """Copy with some keys replaced, validated again"""
        data = self.model_dump(exclude_unset=True)
        data.update(values)
        return validate_settings(data)


def _error_list(e: ValidationError) -> List[Tuple[str, str]]:
    out = []
    for err in e.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<root>"
        out.append((path, err["msg"]))
    return out


def validate_settings(data: Dict[str, Any]) -> RunSettings:
    try:
        return RunSettings(**data)
    except ValidationError as e:
        errors = _error_list(e)
        message = "; ".join(f"{path}: {msg}" for path, msg in errors)
        raise ConfigError(f"Invalid configuration: {message}", errors) from e


def apply_experiment_defaults(settings: RunSettings) -> RunSettings:
    """Fill kind-specific values for keys that were not given explicitly"""
    data = settings.model_dump(exclude_unset=True)
    for key, value in KIND_DEFAULTS.get(settings.experiment, {}).items():
        data.setdefault(key, value)
    if settings.experiment == "impossibility":
        data.setdefault("jam_level", Config.IMPOSSIBILITY_LEVEL * settings.theta)
    return validate_settings(data)


def parse_override(item: str) -> Tuple[str, Any]:
    """'key=value' with the value read as YAML (numbers, booleans, lists)"""
    if "=" not in item:
        raise ConfigError(f"Override '{item}' must look like key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override '{item}' has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"{key}: cannot parse value {raw!r}: {e}")
    return key, value


def merge_overrides(data: Dict[str, Any], overrides: Iterable[Tuple[str, Any]]) -> Dict[str, Any]:
    merged = dict(data)
    for key, value in overrides:
        if key.startswith("grid."):
            grid = dict(merged.get("grid") or {})
            grid[key[len("grid."):]] = value if isinstance(value, list) else [value]
            merged["grid"] = grid
        else:
            merged[key] = value
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read configuration {path}: {e}")
    try:
        loaded = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}")
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a key-value mapping")
    return loaded


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Iterable[Tuple[str, Any]]] = None) -> RunSettings:
    """
    Read a settings file (or nothing, for pure defaults), apply overrides and
    fill experiment defaults. Unknown keys and invalid values raise
    ConfigError naming the offending key.
    """
    data = read_config_file(path) if path is not None else {}
    data = merge_overrides(data, overrides or [])
    settings = apply_experiment_defaults(validate_settings(data))
    logger.debug(f"Loaded settings: experiment={settings.experiment}, seeds={settings.seed_values()}")
    return settings


def dump_config(settings: RunSettings, path: Optional[Union[str, Path]] = None) -> str:
    """Effective settings in the file format; reloading gives the same runs"""
    text = yaml.safe_dump(settings.model_dump(mode="json"), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def scale_plane(settings: RunSettings) -> RunSettings:
    """sqrt(n) x sqrt(n) plane for the node count in settings"""
    side = math.sqrt(settings.n)
    return settings.with_values({"width": side, "height": side})
