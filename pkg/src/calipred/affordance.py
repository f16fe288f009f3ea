"""
Highway scene description, affordance features and training labels.

A scene holds one ego vehicle (the vehicle whose motion is predicted) and any
number of surrounding vehicles on a straight multi-lane road. The affordance
is a fixed 21-entry descriptor of that scene: each neighbour slot is filled
by the nearest vehicle in the corresponding lane-relative region, so the
descriptor does not depend on how many vehicles there are or in which order
they are listed.

Lateral convention: Y grows to the left, so the "left" lane of lane k is
lane k + 1.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np

from .basis import Trajectory, TrajectoryBasis, nearest_base
from .errors import ContractError, CoverageError, DataError, SceneError

logger = logging.getLogger(__name__)

DEFAULT_CLEARANCE = 200.0
DEFAULT_LANE_WIDTH = 3.7


@dataclass(frozen=True)
class VehicleState:
    """
    Kinematic state and footprint of one vehicle.

    Attributes:
        id: Unique identifier within a scene.
        X: Longitudinal position of the center [m].
        Y: Lateral position of the center [m].
        v: Speed [m/s].
        psi: Heading [rad].
        length: Footprint length [m].
        width: Footprint width [m].
    """

    id: str
    X: float
    Y: float
    v: float
    psi: float = 0.0
    length: float = 5.0
    width: float = 1.8

    def __post_init__(self) -> None:
        values = (self.X, self.Y, self.v, self.psi, self.length, self.width)
        if not all(np.isfinite(values)):
            raise DataError(f"Vehicle '{self.id}' has non-finite state {values}")
        if self.length <= 0 or self.width <= 0:
            raise ContractError(f"Vehicle '{self.id}' must have positive footprint")
        if self.v < 0:
            raise ContractError(f"Vehicle '{self.id}' has negative speed {self.v}")

    @property
    def dims(self) -> Tuple[float, float]:
        return (self.length, self.width)

    def advanced(self, times: np.ndarray) -> np.ndarray:
        """Positions at ``times`` assuming constant velocity, shape (n, 2)."""
        times = np.asarray(times, dtype=float)
        return np.column_stack(
            [
                self.X + self.v * np.cos(self.psi) * times,
                self.Y + self.v * np.sin(self.psi) * times,
            ]
        )


@dataclass(frozen=True)
class LaneGeometry:
    """
    Straight road with parallel lanes of equal width.

    Attributes:
        lane_width: Width of every lane [m].
        lane_centers: Lateral coordinates of lane centers, ascending [m].
    """

    lane_width: float = DEFAULT_LANE_WIDTH
    lane_centers: Tuple[float, ...] = (1.85, 5.55, 9.25)

    def __post_init__(self) -> None:
        if not self.lane_width > 0:
            raise ContractError(f"Lane width must be positive, got {self.lane_width}")
        centers = tuple(float(c) for c in self.lane_centers)
        if not centers:
            raise ContractError("A road needs at least one lane")
        if list(centers) != sorted(centers):
            raise ContractError("Lane centers must be ascending")
        object.__setattr__(self, "lane_centers", centers)

    @classmethod
    def uniform(
        cls, n_lanes: int, lane_width: float = DEFAULT_LANE_WIDTH
    ) -> "LaneGeometry":
        """Lanes laid side by side starting at Y = 0."""
        return cls(lane_width, tuple((i + 0.5) * lane_width for i in range(n_lanes)))

    @property
    def n_lanes(self) -> int:
        return len(self.lane_centers)

    @property
    def bounds(self) -> Tuple[float, float]:
        half = self.lane_width / 2
        return (self.lane_centers[0] - half, self.lane_centers[-1] + half)

    def lane_index(self, Y: float) -> int:
        return int(np.argmin(np.abs(np.asarray(self.lane_centers) - Y)))

    def on_road(self, Y: float) -> bool:
        low, high = self.bounds
        return low <= Y <= high


@dataclass(frozen=True)
class Scene:
    """
    One ego vehicle and its surroundings.

    Attributes:
        ego: The vehicle whose motion is described.
        others: Surrounding vehicles, in no particular order.
        lanes: Road geometry.
    """

    ego: VehicleState
    others: Tuple[VehicleState, ...] = ()
    lanes: LaneGeometry = field(default_factory=LaneGeometry)

    def __post_init__(self) -> None:
        others = tuple(self.others)
        ids = [self.ego.id] + [o.id for o in others]
        if len(set(ids)) != len(ids):
            raise SceneError(f"Vehicle ids in a scene must be unique: {ids}")
        object.__setattr__(self, "others", others)

    def vehicles(self) -> Tuple[VehicleState, ...]:
        return (self.ego,) + self.others

    def from_perspective(self, vehicle_id: str) -> "Scene":
        """The same scene with ``vehicle_id`` as ego."""
        everyone = self.vehicles()
        for vehicle in everyone:
            if vehicle.id == vehicle_id:
                rest = tuple(o for o in everyone if o.id != vehicle_id)
                return Scene(vehicle, rest, self.lanes)
        raise SceneError(f"No vehicle with id '{vehicle_id}' in scene")


class Affordance(NamedTuple):
    """The 21 affordance entries, in table order."""

    forward_velocity: float
    distance_to_lane_center: float
    forward_clearance: float
    forward_vehicle_velocity: float
    left_front_y_clearance: float
    left_front_velocity: float
    left_front_x_clearance: float
    left_rear_y_clearance: float
    left_rear_x_clearance: float
    left_rear_velocity: float
    right_front_y_clearance: float
    right_front_velocity: float
    right_front_x_clearance: float
    right_rear_y_clearance: float
    right_rear_x_clearance: float
    right_rear_velocity: float
    left_front_length: float
    left_rear_length: float
    right_front_length: float
    right_rear_length: float
    ego_length: float

    def to_array(self) -> np.ndarray:
        return np.asarray(self, dtype=float)


AFFORDANCE_FIELDS: Tuple[str, ...] = Affordance._fields
N_FEATURES = len(AFFORDANCE_FIELDS)


class _Slot(NamedTuple):
    x_clearance: float
    y_clearance: float
    velocity: float
    length: float


def _gaps(ego: VehicleState, other: VehicleState) -> Tuple[float, float]:
    dx = abs(other.X - ego.X) - (ego.length + other.length) / 2
    dy = abs(other.Y - ego.Y) - (ego.width + other.width) / 2
    return dx, dy


def _fill_slot(
    ego: VehicleState, candidates: List[VehicleState], default: _Slot
) -> _Slot:
    if not candidates:
        return default
    # Nearest by |dX|; the id breaks exact ties so the order of `others`
    # never matters.
    nearest = min(candidates, key=lambda o: (abs(o.X - ego.X), o.id))
    dx, dy = _gaps(ego, nearest)
    return _Slot(dx, dy, nearest.v, nearest.length)


def extract_affordance(scene: Scene) -> Affordance:
    """
    Compute the affordance vector of a scene.

    Neighbour slots are filled by the nearest vehicle (by longitudinal
    center distance) in the lane one to the left / right of the ego lane,
    split into front (dX > 0) and rear (dX <= 0). The forward slot is the
    nearest vehicle ahead in the ego lane. Clearances are bumper-to-bumper:
    center distance minus half-lengths for X, lateral edge gap for Y.

    Absent vehicles take defaults: clearance 200 m, velocity equal to the
    ego speed, length 0. When the ego has no lane on one side, that side's
    slots describe the road edge instead (X clearance 0, Y clearance equal
    to the gap between the ego's edge and the road edge).

    Args:
        scene: The scene to describe.

    Returns:
        The 21-entry Affordance.

    Raises:
        SceneError: If the ego is off the road.
    """
    ego, lanes = scene.ego, scene.lanes
    if not lanes.on_road(ego.Y):
        raise SceneError(
            f"Ego '{ego.id}' at Y={ego.Y:.3f} is outside road bounds {lanes.bounds}"
        )
    ego_lane = lanes.lane_index(ego.Y)
    low, high = lanes.bounds

    free = _Slot(DEFAULT_CLEARANCE, DEFAULT_CLEARANCE, ego.v, 0.0)
    left_default = free
    right_default = free
    if ego_lane + 1 >= lanes.n_lanes:
        left_default = _Slot(0.0, high - (ego.Y + ego.width / 2), ego.v, 0.0)
    if ego_lane == 0:
        right_default = _Slot(0.0, (ego.Y - ego.width / 2) - low, ego.v, 0.0)

    regions: Dict[Tuple[int, bool], List[VehicleState]] = {}
    for other in scene.others:
        offset = lanes.lane_index(other.Y) - ego_lane
        if offset not in (-1, 0, 1):
            continue
        regions.setdefault((offset, other.X - ego.X > 0), []).append(other)

    forward = _fill_slot(ego, regions.get((0, True), []), free)
    left_front = _fill_slot(ego, regions.get((1, True), []), left_default)
    left_rear = _fill_slot(ego, regions.get((1, False), []), left_default)
    right_front = _fill_slot(ego, regions.get((-1, True), []), right_default)
    right_rear = _fill_slot(ego, regions.get((-1, False), []), right_default)

    return Affordance(
        forward_velocity=ego.v,
        distance_to_lane_center=ego.Y - lanes.lane_centers[ego_lane],
        forward_clearance=forward.x_clearance,
        forward_vehicle_velocity=forward.velocity,
        left_front_y_clearance=left_front.y_clearance,
        left_front_velocity=left_front.velocity,
        left_front_x_clearance=left_front.x_clearance,
        left_rear_y_clearance=left_rear.y_clearance,
        left_rear_x_clearance=left_rear.x_clearance,
        left_rear_velocity=left_rear.velocity,
        right_front_y_clearance=right_front.y_clearance,
        right_front_velocity=right_front.velocity,
        right_front_x_clearance=right_front.x_clearance,
        right_rear_y_clearance=right_rear.y_clearance,
        right_rear_x_clearance=right_rear.x_clearance,
        right_rear_velocity=right_rear.velocity,
        left_front_length=left_front.length,
        left_rear_length=left_rear.length,
        right_front_length=right_front.length,
        right_rear_length=right_rear.length,
        ego_length=ego.length,
    )


def contact_steps(
    paths: np.ndarray,
    dims: Tuple[float, float],
    obstacle_paths: np.ndarray,
    obstacle_dims: np.ndarray,
) -> np.ndarray:
    """
    First sampled step at which each path overlaps any obstacle.

    Footprints are axis-aligned rectangles centered on the path samples;
    touching edges do not count as overlap.

    Args:
        paths: Candidate center paths, shape (M, T, 2).
        dims: (length, width) of the candidate vehicle.
        obstacle_paths: Obstacle center paths, shape (K, T, 2).
        obstacle_dims: (length, width) per obstacle, shape (K, 2).

    Returns:
        Integer array of shape (M,) holding the first contact step, or -1
        where a path never overlaps.
    """
    paths = np.asarray(paths, dtype=float)
    n_paths = paths.shape[0]
    obstacle_paths = np.asarray(obstacle_paths, dtype=float).reshape(
        -1, paths.shape[1], 2
    )
    if obstacle_paths.shape[0] == 0:
        return np.full(n_paths, -1, dtype=int)
    obstacle_dims = np.asarray(obstacle_dims, dtype=float).reshape(-1, 2)
    half_x = (dims[0] + obstacle_dims[:, 0]) / 2
    half_y = (dims[1] + obstacle_dims[:, 1]) / 2
    delta = np.abs(paths[:, np.newaxis] - obstacle_paths[np.newaxis])
    overlap = (delta[..., 0] < half_x[np.newaxis, :, np.newaxis]) & (
        delta[..., 1] < half_y[np.newaxis, :, np.newaxis]
    )
    hit = overlap.any(axis=1)
    first = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), first, -1)


def first_contact(
    path: np.ndarray,
    dims: Tuple[float, float],
    obstacle_paths: np.ndarray,
    obstacle_dims: np.ndarray,
) -> Optional[int]:
    """Single-path form of :func:`contact_steps`; ``None`` means no contact."""
    step = int(
        contact_steps(
            np.asarray(path)[np.newaxis], dims, obstacle_paths, obstacle_dims
        )[0]
    )
    return None if step < 0 else step


def _constant_velocity_obstacles(
    scene: Scene, times: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    if not scene.others:
        return np.zeros((0, len(times), 2)), np.zeros((0, 2))
    paths = np.stack([other.advanced(times) for other in scene.others])
    dims = np.array([other.dims for other in scene.others])
    return paths, dims


def collision_check(
    scene: Scene,
    candidate: Trajectory,
    horizon: Optional[int] = None,
    dt: Optional[float] = None,
) -> bool:
    """
    Check whether a candidate trajectory of the ego collides.

    The candidate is reconstructed at the ego's current position and speed;
    every other vehicle is advanced at constant velocity. The check is the
    rectangle-overlap test at each of the T sampled instants.

    Args:
        scene: The scene; its ego follows the candidate.
        candidate: Deviation-encoded trajectory.
        horizon: Expected number of samples (defaults to the candidate's).
        dt: Expected sampling step (defaults to the candidate's).

    Returns:
        True iff the ego footprint overlaps another footprint at a sample.
    """
    if horizon is not None and horizon != candidate.T:
        raise ContractError(f"Candidate has {candidate.T} samples, expected {horizon}")
    if dt is not None and not np.isclose(dt, candidate.dt):
        raise ContractError(f"Candidate step {candidate.dt} differs from {dt}")
    ego = scene.ego
    path = candidate.absolute(ego.X, ego.Y, ego.v)
    obstacles, dims = _constant_velocity_obstacles(scene, candidate.times)
    return first_contact(path, ego.dims, obstacles, dims) is not None


class Flag(IntEnum):
    """Per-base training label; values match the dataset CSV encoding."""

    NEG_SAFE = 0
    POS = 1
    NEG_COLLIDING = 2


@dataclass(frozen=True)
class LabeledSample:
    """
    One training example.

    Attributes:
        affordance: Scene descriptor.
        flags: One Flag per base trajectory, exactly one POS.
    """

    affordance: Affordance
    flags: Tuple[Flag, ...]

    def __post_init__(self) -> None:
        flags = tuple(Flag(f) for f in self.flags)
        if sum(f is Flag.POS for f in flags) != 1:
            raise ContractError(f"Expected exactly one POS flag, got {flags}")
        object.__setattr__(self, "flags", flags)

    @property
    def positive_index(self) -> int:
        return self.flags.index(Flag.POS)


def label_sample(
    scene: Scene,
    observed: Trajectory,
    basis: TrajectoryBasis,
    strict: bool = True,
) -> LabeledSample:
    """
    Label an observed trajectory against a basis.

    The nearest base is flagged POS. Every other base is flagged
    NEG_COLLIDING if following it from the current scene leads to a
    collision within the horizon (constant-velocity neighbours), else
    NEG_SAFE.

    Args:
        scene: Scene at the start of the observation.
        observed: Deviation-encoded observed trajectory of the ego.
        basis: Trajectory basis.
        strict: If True, an observation farther than epsilon from every
            base is an error; if False the nearest base is used anyway.

    Raises:
        CoverageError: If strict and the observation is not covered.
    """
    index, distance = nearest_base(observed, basis)
    if strict and distance > basis.epsilon:
        raise CoverageError(
            f"Observation '{observed.source_id}' is {distance:.4f} from the "
            f"nearest base, beyond epsilon={basis.epsilon}"
        )
    ego = scene.ego
    times = basis.bases[0].times
    ramp = np.column_stack([ego.X + ego.v * times, np.full(len(times), ego.Y)])
    paths = basis.stack() + ramp[np.newaxis]
    obstacles, dims = _constant_velocity_obstacles(scene, times)
    contacts = contact_steps(paths, ego.dims, obstacles, dims)
    flags = tuple(
        Flag.POS
        if i == index
        else (Flag.NEG_COLLIDING if contacts[i] >= 0 else Flag.NEG_SAFE)
        for i in range(basis.M)
    )
    return LabeledSample(extract_affordance(scene), flags)


@dataclass
class Dataset:
    """
    Labeled samples as dense arrays.

    Attributes:
        features: Affordance rows, shape (n, 21).
        flags: Flag codes {0, 1, 2}, shape (n, M).
        uncovered: Number of observations labeled beyond epsilon.
        fingerprint: Config fingerprint of the producing stage.
    """

    features: np.ndarray
    flags: np.ndarray
    uncovered: int = 0
    fingerprint: str = ""

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float).reshape(-1, N_FEATURES)
        self.flags = np.asarray(self.flags, dtype=np.int8)
        if self.flags.ndim != 2:
            self.flags = self.flags.reshape(len(self.features), -1)
        if len(self.features) != len(self.flags):
            raise ContractError("Features and flags must have the same row count")
        if len(self.flags) and not np.all(np.sum(self.flags == Flag.POS, axis=1) == 1):
            raise ContractError("Every dataset row needs exactly one POS flag")

    @classmethod
    def empty(cls, M: int) -> "Dataset":
        return cls(np.zeros((0, N_FEATURES)), np.zeros((0, M), dtype=np.int8))

    @classmethod
    def from_samples(cls, samples: List[LabeledSample], M: int, **kwargs) -> "Dataset":
        if not samples:
            return cls(
                np.zeros((0, N_FEATURES)), np.zeros((0, M), dtype=np.int8), **kwargs
            )
        features = np.array([s.affordance for s in samples], dtype=float)
        flags = np.array([[int(f) for f in s.flags] for s in samples], dtype=np.int8)
        return cls(features, flags, **kwargs)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def __iter__(self) -> Iterator[LabeledSample]:
        for row, flags in zip(self.features, self.flags):
            yield LabeledSample(Affordance(*row.tolist()), tuple(flags.tolist()))

    @property
    def M(self) -> int:
        return int(self.flags.shape[1])

    def positive_index(self) -> np.ndarray:
        """Index of the POS base per row, shape (n,)."""
        return np.argmax(self.flags == Flag.POS, axis=1)

    def positive_counts(self) -> np.ndarray:
        """Number of POS rows per base, shape (M,)."""
        return np.sum(self.flags == Flag.POS, axis=0)

    def class_counts(self) -> Dict[str, int]:
        return {
            "pos": int(np.sum(self.flags == Flag.POS)),
            "neg_safe": int(np.sum(self.flags == Flag.NEG_SAFE)),
            "neg_colliding": int(np.sum(self.flags == Flag.NEG_COLLIDING)),
        }

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(
            self.features[indices],
            self.flags[indices],
            fingerprint=self.fingerprint,
        )


def dataset_build(
    stream: Iterable[Tuple[Scene, Trajectory]],
    basis: TrajectoryBasis,
    strict: bool = True,
) -> Dataset:
    """
    Label a stream of (scene, observation) pairs, preserving order.

    Args:
        stream: Pairs of scene and deviation-encoded observed trajectory.
        basis: Trajectory basis the flags refer to.
        strict: Passed to :func:`label_sample`.

    Returns:
        Dataset with one row per pair.

    Raises:
        ContractError: If an observation's T or dt differs from the basis.
        CoverageError: Re-raised from labeling, naming the sample index.
    """
    samples: List[LabeledSample] = []
    uncovered = 0
    for i, (scene, observed) in enumerate(stream):
        if observed.T != basis.T or not np.isclose(observed.dt, basis.dt):
            raise ContractError(
                f"Sample {i}: observation has T={observed.T}, dt={observed.dt}; "
                f"basis has T={basis.T}, dt={basis.dt}"
            )
        try:
            sample = label_sample(scene, observed, basis, strict=strict)
        except (CoverageError, SceneError, DataError) as e:
            raise type(e)(f"Sample {i}: {e}") from e
        if not strict and nearest_base(observed, basis)[1] > basis.epsilon:
            uncovered += 1
        samples.append(sample)
    if uncovered:
        logger.warning(
            "%d of %d observations lie beyond epsilon=%g of the basis",
            uncovered,
            len(samples),
            basis.epsilon,
        )
    dataset = Dataset.from_samples(samples, basis.M, uncovered=uncovered)
    logger.info("Labeled %d samples: %s", len(dataset), dataset.class_counts())
    return dataset
