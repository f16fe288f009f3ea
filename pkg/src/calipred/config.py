"""
Pipeline configuration.

One JSON file holds a block per stage plus the master seed:

    {
      "seed": 0,
      "geometry": {"dt": 0.1, "T": 30, "a": 2.0, "b": 0.5, "epsilon": 1.0},
      "lanes": {"n_lanes": 3, "lane_width": 3.7},
      "data": {...}, "network": {...}, "loss": {...}, "training": {...},
      "calibration": {...}, "planner": {...}, "simulator": {...}
    }

Missing keys take the defaults below; unknown keys are rejected. Each stage
has a fingerprint over the blocks it depends on (upstream blocks included),
which artifacts embed so a stage can refuse inputs built under another
configuration.
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, Union

import numpy as np

from .affordance import LaneGeometry
from .basis import AtomSet
from .errors import ConfigError
from .planner import PlannerConfig
from .predictor import LossConfig, TrainConfig

WORKERS_ENV = "CALIPRED_WORKERS"

T_Block = TypeVar("T_Block")


@dataclass(frozen=True)
class GeometryConfig:
    dt: float = 0.1
    T: int = 30
    a: float = 2.0
    b: float = 0.5
    epsilon: float = 1.0

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.T < 1:
            raise ConfigError("geometry.dt must be positive and geometry.T >= 1")
        if self.a <= 0 or self.b <= 0 or self.epsilon <= 0:
            raise ConfigError("geometry.a, geometry.b and geometry.epsilon must be > 0")

    def atoms(self) -> AtomSet:
        return AtomSet.constant(self.T, self.a, self.b)


@dataclass(frozen=True)
class LanesConfig:
    n_lanes: int = 3
    lane_width: float = 3.7

    def __post_init__(self) -> None:
        if self.n_lanes < 1:
            raise ConfigError("lanes.n_lanes must be >= 1")
        if self.lane_width <= 0:
            raise ConfigError("lanes.lane_width must be > 0")

    def geometry(self) -> LaneGeometry:
        return LaneGeometry.uniform(self.n_lanes, self.lane_width)


@dataclass(frozen=True)
class DataConfig:
    """
    Where samples come from and how many of each split.

    ``source`` is ``synthetic`` or the path of a corpus directory.
    """

    source: str = "synthetic"
    n_corpus: int = 2000
    n_train: int = 10000
    n_calibration: int = 5000
    n_heldout: int = 20000
    n_others: Tuple[int, int] = (2, 6)
    speed_range: Tuple[float, float] = (20.0, 32.0)
    gap_range: Tuple[float, float] = (15.0, 50.0)
    maneuver_weights: Tuple[float, float, float, float, float] = (
        0.5,
        0.15,
        0.15,
        0.1,
        0.1,
    )

    def __post_init__(self) -> None:
        sizes = (self.n_corpus, self.n_train, self.n_calibration, self.n_heldout)
        if min(sizes) < 0:
            raise ConfigError("data split sizes must be non-negative")
        if self.n_others[0] < 0 or self.n_others[0] > self.n_others[1]:
            raise ConfigError(f"data.n_others must be an ordered range, got {self.n_others}")
        if len(self.maneuver_weights) != 5 or min(self.maneuver_weights) < 0:
            raise ConfigError("data.maneuver_weights needs 5 non-negative weights")


@dataclass(frozen=True)
class NetworkConfig:
    hidden: Tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("network.hidden must list positive layer widths")


@dataclass(frozen=True)
class CalibrationConfig:
    method: str = "post_bloat"
    confidence: float = 0.99
    epsilon: float = 0.05
    sizes: Tuple[int, ...] = ()
    epsilons: Tuple[float, ...] = (0.01, 0.05, 0.1)

    def __post_init__(self) -> None:
        if self.method not in ("post_bloat", "conformal"):
            raise ConfigError(
                f"calibration.method must be post_bloat or conformal, got {self.method}"
            )
        if not 0 < self.confidence < 1 or not 0 < self.epsilon < 1:
            raise ConfigError("calibration confidence and epsilon must be in (0, 1)")


@dataclass(frozen=True)
class SimulatorConfig:
    n_trials: int = 50
    n_uncontrolled: Tuple[int, int] = (3, 7)
    duration: float = 20.0
    dt: float = 0.1
    replan_period: float = 1.0
    speed_range: Tuple[float, float] = (20.0, 32.0)
    gap_range: Tuple[float, float] = (15.0, 50.0)
    trap_radius: float = 15.0
    trace: bool = False

    def __post_init__(self) -> None:
        low, high = self.n_uncontrolled
        if low < 0 or low > high:
            raise ConfigError(f"simulator.n_uncontrolled must be ordered, got {(low, high)}")
        if self.duration < 0 or self.dt <= 0 or self.replan_period <= 0:
            raise ConfigError("simulator durations must be positive")
        if self.n_trials < 1:
            raise ConfigError("simulator.n_trials must be >= 1")


BLOCKS: Dict[str, type] = {
    "geometry": GeometryConfig,
    "lanes": LanesConfig,
    "data": DataConfig,
    "network": NetworkConfig,
    "loss": LossConfig,
    "training": TrainConfig,
    "calibration": CalibrationConfig,
    "planner": PlannerConfig,
    "simulator": SimulatorConfig,
}

STAGE_BLOCKS: Dict[str, Tuple[str, ...]] = {
    "sparsify": ("geometry", "lanes", "data"),
    "label": ("geometry", "lanes", "data"),
    "train": ("geometry", "lanes", "data", "network", "loss", "training"),
    "calibrate": (
        "geometry",
        "lanes",
        "data",
        "network",
        "loss",
        "training",
        "calibration",
    ),
    "simulate": (
        "geometry",
        "lanes",
        "data",
        "network",
        "loss",
        "training",
        "calibration",
        "planner",
        "simulator",
    ),
}
STAGE_BLOCKS["evaluate"] = STAGE_BLOCKS["calibrate"]


def _build(cls: Type[T_Block], name: str, data: Any) -> T_Block:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"Config block '{name}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown keys in '{name}': {', '.join(unknown)}")
    values = {}
    for key, value in data.items():
        default = known[key].default
        values[key] = tuple(value) if isinstance(default, tuple) else value
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{name}' block: {e}") from e


@dataclass(frozen=True)
class PipelineConfig:
    """All stage blocks plus the master seed."""

    seed: int = 0
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    lanes: LanesConfig = field(default_factory=LanesConfig)
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)

    def __post_init__(self) -> None:
        validate(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        unknown = sorted(set(data) - set(BLOCKS) - {"seed"})
        if unknown:
            raise ConfigError(f"Unknown config sections: {', '.join(unknown)}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        blocks = {name: _build(cls_, name, data.get(name)) for name, cls_ in BLOCKS.items()}
        return cls(seed=seed, **blocks)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        return self if seed is None else dataclasses.replace(self, seed=seed)

    def fingerprint(self, stage: str) -> str:
        return fingerprint(self, stage)


def validate(config: PipelineConfig) -> None:
    """
    Cross-field checks.

    Raises:
        ConfigError: If the planner horizon does not span the basis horizon
            or the planner and simulator steps differ.
    """
    basis_span = config.geometry.T * config.geometry.dt
    plan_span = config.planner.horizon * config.planner.dt
    if not math.isclose(basis_span, plan_span, rel_tol=0.0, abs_tol=1e-9):
        raise ConfigError(
            f"planner horizon*dt ({plan_span:g} s) must equal geometry T*dt "
            f"({basis_span:g} s)"
        )
    if not math.isclose(config.planner.dt, config.simulator.dt, abs_tol=1e-12):
        raise ConfigError("planner.dt and simulator.dt must be equal")


def load_config(
    path: Optional[Union[str, Path]] = None, seed: Optional[int] = None
) -> PipelineConfig:
    """
    Load a config file; None gives the defaults.

    Raises:
        ConfigError: If the file is missing, not JSON, or invalid.
    """
    if path is None:
        return PipelineConfig().with_seed(seed)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return PipelineConfig.from_dict(data).with_seed(seed)


def fingerprint(config: PipelineConfig, stage: str) -> str:
    """SHA-256 over the canonical JSON of a stage's blocks and the seed."""
    if stage not in STAGE_BLOCKS:
        raise ConfigError(f"Unknown stage '{stage}'")
    document = config.to_dict()
    payload = {name: document[name] for name in STAGE_BLOCKS[stage]}
    payload["seed"] = config.seed
    payload["stage"] = stage
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seed(master: int, *keys: int) -> int:
    """Independent child seed for a pipeline stream."""
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


def workers_from_env(default: int = 1) -> int:
    """Worker count from CALIPRED_WORKERS."""
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        workers = int(raw)
    except ValueError as e:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from e
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    return workers
