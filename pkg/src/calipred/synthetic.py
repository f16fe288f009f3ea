"""
Synthetic highway scenes and driver behaviour.

Stands in for recorded traffic: every draw places vehicles on a straight
multi-lane road, picks a maneuver for the ego from a mixture gated by the
scene, and realises it as a smooth kinematic trajectory. Draws are i.i.d.
given the seed, which is what the calibration guarantees assume.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np

from .affordance import LaneGeometry, Scene, VehicleState
from .basis import DEFAULT_DT, DEFAULT_T, Trajectory
from .errors import ConfigError

logger = logging.getLogger(__name__)


class Maneuver(str, Enum):
    KEEP = "keep"
    BRAKE = "brake"
    ACCELERATE = "accelerate"
    LEFT = "left_change"
    RIGHT = "right_change"


MANEUVERS: Tuple[Maneuver, ...] = tuple(Maneuver)


@dataclass(frozen=True)
class BehaviorPolicy:
    """
    Gated mixture over maneuvers.

    Attributes:
        weights: Base weights in MANEUVERS order (keep, brake, accelerate,
            left, right).
        change_gap: Minimum bumper gap [m] to any vehicle in the target lane
            for a lane change to be allowed.
        accelerate_gap: Minimum forward clearance [m] for accelerating.
    """

    weights: Tuple[float, ...] = (0.5, 0.15, 0.15, 0.1, 0.1)
    change_gap: float = 10.0
    accelerate_gap: float = 30.0

    def __post_init__(self) -> None:
        if len(self.weights) != len(MANEUVERS) or min(self.weights) < 0:
            raise ConfigError(f"Need {len(MANEUVERS)} non-negative maneuver weights")
        if self.weights[0] + self.weights[1] <= 0:
            raise ConfigError("keep or brake must have positive weight")

    def _lane_open(self, scene: Scene, offset: int) -> bool:
        ego, lanes = scene.ego, scene.lanes
        target = lanes.lane_index(ego.Y) + offset
        if not 0 <= target < lanes.n_lanes:
            return False
        for other in scene.others:
            if lanes.lane_index(other.Y) != target:
                continue
            gap = abs(other.X - ego.X) - (ego.length + other.length) / 2
            if gap < self.change_gap:
                return False
        return True

    def _forward_clearance(self, scene: Scene) -> float:
        ego, lanes = scene.ego, scene.lanes
        lane = lanes.lane_index(ego.Y)
        gaps = [
            other.X - ego.X - (ego.length + other.length) / 2
            for other in scene.others
            if lanes.lane_index(other.Y) == lane and other.X > ego.X
        ]
        return min(gaps, default=np.inf)

    def probabilities(self, scene: Scene) -> Dict[Maneuver, float]:
        """Gated and renormalised maneuver probabilities for the ego."""
        allowed = {
            Maneuver.KEEP: True,
            Maneuver.BRAKE: True,
            Maneuver.ACCELERATE: self._forward_clearance(scene) >= self.accelerate_gap,
            Maneuver.LEFT: self._lane_open(scene, 1),
            Maneuver.RIGHT: self._lane_open(scene, -1),
        }
        raw = np.array(
            [w if allowed[m] else 0.0 for m, w in zip(MANEUVERS, self.weights)]
        )
        raw /= raw.sum()
        return dict(zip(MANEUVERS, raw.tolist()))

    def sample(self, scene: Scene, rng: np.random.Generator) -> Maneuver:
        probs = self.probabilities(scene)
        return MANEUVERS[int(rng.choice(len(MANEUVERS), p=list(probs.values())))]


def sample_vehicles(
    rng: np.random.Generator,
    lanes: LaneGeometry,
    n_vehicles: int,
    speed_range: Tuple[float, float] = (20.0, 32.0),
    gap_range: Tuple[float, float] = (15.0, 50.0),
    lateral_jitter: float = 0.3,
) -> Tuple[List[VehicleState], int]:
    """
    Place vehicles on the road without overlapping footprints.

    Each vehicle gets a uniform lane; within a lane, consecutive vehicles are
    separated by a bumper gap drawn from ``gap_range``. The returned index
    points at the vehicle with the median longitudinal position.

    Returns:
        (vehicles, mid_pack_index); ids are ``v0``, ``v1``, ...
    """
    if n_vehicles < 1:
        raise ConfigError("Need at least one vehicle")
    lane_of = rng.integers(lanes.n_lanes, size=n_vehicles)
    vehicles: List[Optional[VehicleState]] = [None] * n_vehicles
    jitter = min(lateral_jitter, max(0.0, (lanes.lane_width - 2.0) / 2))
    for lane in range(lanes.n_lanes):
        members = np.flatnonzero(lane_of == lane)
        X = rng.uniform(-gap_range[1], 0.0)
        previous_half = 0.0
        for i in members:
            length = rng.uniform(4.0, 5.5)
            width = rng.uniform(1.7, 2.0)
            if previous_half:
                X += previous_half + rng.uniform(*gap_range) + length / 2
            previous_half = length / 2
            Y = lanes.lane_centers[lane] + rng.uniform(-jitter, jitter)
            vehicles[i] = VehicleState(
                f"v{i}", X, Y, rng.uniform(*speed_range), 0.0, length, width
            )
    placed = [v for v in vehicles if v is not None]
    order = np.argsort([v.X for v in placed], kind="stable")
    return placed, int(order[len(order) // 2])


def sample_scene(
    rng: np.random.Generator,
    lanes: LaneGeometry,
    n_others: Tuple[int, int] = (2, 6),
    speed_range: Tuple[float, float] = (20.0, 32.0),
    gap_range: Tuple[float, float] = (15.0, 50.0),
) -> Scene:
    """A random scene whose ego is the mid-pack vehicle."""
    count = int(rng.integers(n_others[0], n_others[1] + 1)) + 1
    vehicles, ego_index = sample_vehicles(rng, lanes, count, speed_range, gap_range)
    ego = vehicles[ego_index]
    return Scene(ego, tuple(v for v in vehicles if v is not ego), lanes)


def _blend(times: np.ndarray, duration: float) -> np.ndarray:
    """Cosine ramp from 0 to 1 over ``duration`` seconds."""
    phase = np.clip(times / duration, 0.0, 1.0)
    return (1.0 - np.cos(np.pi * phase)) / 2.0


def _longitudinal(times: np.ndarray, v0: float, a: float) -> np.ndarray:
    """Deviation from the constant-speed ramp under constant a, stopping at 0."""
    if a < 0 and v0 > 0:
        t_stop = v0 / -a
        moving = np.minimum(times, t_stop)
        travelled = v0 * moving + 0.5 * a * moving**2
        return travelled - v0 * times
    return 0.5 * a * times**2


def realize_maneuver(
    maneuver: Maneuver,
    scene: Scene,
    rng: np.random.Generator,
    T: int = DEFAULT_T,
    dt: float = DEFAULT_DT,
    source_id: str = "",
) -> Trajectory:
    """
    Deviation-encoded trajectory of the ego carrying out ``maneuver``.

    Keep-lane drifts back to the lane center; lane changes follow a cosine
    lateral profile over 2 to 4 s towards the adjacent lane center.
    """
    ego, lanes = scene.ego, scene.lanes
    times = np.arange(T) * dt
    offset = lanes.lane_centers[lanes.lane_index(ego.Y)] - ego.Y

    if maneuver is Maneuver.BRAKE:
        a = rng.uniform(-4.0, -1.0)
    elif maneuver is Maneuver.ACCELERATE:
        a = rng.uniform(0.5, 2.0)
    else:
        a = rng.uniform(-0.3, 0.3)

    if maneuver is Maneuver.LEFT:
        lateral = (offset + lanes.lane_width) * _blend(times, rng.uniform(2.0, 4.0))
    elif maneuver is Maneuver.RIGHT:
        lateral = (offset - lanes.lane_width) * _blend(times, rng.uniform(2.0, 4.0))
    else:
        lateral = offset * _blend(times, 2.0)

    samples = np.column_stack([_longitudinal(times, ego.v, a), lateral])
    return Trajectory(samples, dt, source_id, ego.v)


class SyntheticDraw(NamedTuple):
    scene: Scene
    observed: Trajectory
    maneuver: Maneuver


def iter_synthetic(
    policy: BehaviorPolicy,
    n: int,
    seed: int,
    lanes: Optional[LaneGeometry] = None,
    T: int = DEFAULT_T,
    dt: float = DEFAULT_DT,
    n_others: Tuple[int, int] = (2, 6),
    speed_range: Tuple[float, float] = (20.0, 32.0),
    gap_range: Tuple[float, float] = (15.0, 50.0),
    prefix: str = "syn",
) -> Iterator[SyntheticDraw]:
    """Draws with the chosen maneuver attached."""
    if n < 0:
        raise ConfigError(f"Number of draws must be non-negative, got {n}")
    lanes = lanes or LaneGeometry()
    rng = np.random.default_rng(seed)
    for i in range(n):
        scene = sample_scene(rng, lanes, n_others, speed_range, gap_range)
        maneuver = policy.sample(scene, rng)
        observed = realize_maneuver(maneuver, scene, rng, T, dt, f"{prefix}-{i}")
        yield SyntheticDraw(scene, observed, maneuver)


def generate_synthetic(
    policy: BehaviorPolicy,
    n: int,
    seed: int,
    lanes: Optional[LaneGeometry] = None,
    T: int = DEFAULT_T,
    dt: float = DEFAULT_DT,
    n_others: Tuple[int, int] = (2, 6),
    speed_range: Tuple[float, float] = (20.0, 32.0),
    gap_range: Tuple[float, float] = (15.0, 50.0),
    prefix: str = "syn",
) -> Iterator[Tuple[Scene, Trajectory]]:
    """
    I.i.d. (scene, observed trajectory) pairs.

    Example:
        >>> pairs = list(generate_synthetic(BehaviorPolicy(), 100, seed=7))
        >>> len(pairs)
        100
    """
    for draw in iter_synthetic(
        policy, n, seed, lanes, T, dt, n_others, speed_range, gap_range, prefix
    ):
        yield draw.scene, draw.observed
