"""
Closed-loop highway simulation.

Uncontrolled vehicles act reactively: at every replan instant each one
predicts its own possible bases with the calibrated predictor, discards the
ones that collide with the other uncontrolled vehicles' commitments (and with
the controlled vehicle when that vehicle is directly ahead), and commits to a
survivor chosen uniformly at random. Between replans it follows the committed
base. The controlled vehicle runs the MPC against keep-out tubes built from
every neighbour's predicted set.

Trials are independent and can run in a process pool; results are returned
in trial order regardless of the number of workers.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from .affordance import (
    LaneGeometry,
    Scene,
    VehicleState,
    contact_steps,
    extract_affordance,
)
from .basis import TrajectoryBasis
from .calibration import CalibratedPredictor
from .errors import ContractError, DataError, SceneError, SolverError
from .planner import (
    EgoState,
    MpcController,
    ObstacleField,
    PlannerConfig,
    build_obstacle_field,
    dubins_step,
    min_scaled_distance,
)
from .synthetic import sample_vehicles

logger = logging.getLogger(__name__)

FRONTAL_SIDE = "frontal_side"
REAR_END = "rear_end"
COLLISION_CLASSES = (FRONTAL_SIDE, REAR_END)
CONTROLLED_ID = "ego"
TRACE_COLUMNS = ("t", "id", "X", "Y", "v", "psi", "committed_base")


@dataclass(frozen=True)
class TrialConfig:
    """
    One randomized trial.

    Attributes:
        n_uncontrolled: Number of reactive vehicles.
        duration: Simulated time [s].
        dt: Simulation and planner step [s].
        replan_period: Time between commitments of uncontrolled vehicles [s].
        ignore_rear: Leave the vehicle behind in the ego lane to itself.
        seed: Seeds the initial scene and every random commitment.
        n_lanes, lane_width: Road.
        speed_range, gap_range: Initial-condition sampler.
        trap_radius: Bumper distance [m] at which a side counts as closed.
        trace: Keep the per-step trace in the outcome.
    """

    n_uncontrolled: int = 3
    duration: float = 20.0
    dt: float = 0.1
    replan_period: float = 1.0
    ignore_rear: bool = True
    seed: int = 0
    n_lanes: int = 3
    lane_width: float = 3.7
    speed_range: Tuple[float, float] = (20.0, 32.0)
    gap_range: Tuple[float, float] = (15.0, 50.0)
    trap_radius: float = 15.0
    trace: bool = False

    def __post_init__(self) -> None:
        if self.n_uncontrolled < 0 or self.duration < 0:
            raise ContractError("n_uncontrolled and duration must be non-negative")
        if self.dt <= 0 or self.replan_period <= 0:
            raise ContractError("dt and replan_period must be positive")

    @property
    def lanes(self) -> LaneGeometry:
        return LaneGeometry.uniform(self.n_lanes, self.lane_width)


@dataclass
class AgentState:
    """
    An uncontrolled vehicle and its current commitment.

    ``committed`` is in ``possible`` unless ``held`` is set, in which case the
    vehicle holds the straight base because every candidate was in contact
    at once.
    """

    vehicle: VehicleState
    committed: int
    committed_at: float
    anchor: Tuple[float, float, float]
    possible: Tuple[int, ...]
    held: bool = False


@dataclass
class WorldState:
    """
    Attributes:
        obstacles: Keep-out field the controlled vehicle planned against on
            the step that produced this state, None initially.
    """

    t: float
    ego: VehicleState
    agents: List[AgentState]
    lanes: LaneGeometry
    rng: np.random.Generator
    obstacles: Optional[ObstacleField] = None

    def vehicles(self) -> List[VehicleState]:
        return [self.ego] + [agent.vehicle for agent in self.agents]


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    pair: Tuple[str, str]
    kind: str
    striker: str
    involves_ego: bool
    trapped: bool = False


@dataclass
class TrialOutcome:
    seed: int
    n_uncontrolled: int
    events: List[CollisionEvent]
    min_scaled_clearance: float
    completed: bool
    end_time: float
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    trace: Optional[pd.DataFrame] = None

    @property
    def ego_events(self) -> List[CollisionEvent]:
        return [e for e in self.events if e.involves_ego]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "n_uncontrolled": self.n_uncontrolled,
            "events": [asdict(e) for e in self.events],
            "min_scaled_clearance": (
                None
                if not math.isfinite(self.min_scaled_clearance)
                else self.min_scaled_clearance
            ),
            "completed": self.completed,
            "end_time": self.end_time,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrialOutcome":
        try:
            events = [
                CollisionEvent(
                    float(e["time"]),
                    (str(e["pair"][0]), str(e["pair"][1])),
                    str(e["kind"]),
                    str(e["striker"]),
                    bool(e["involves_ego"]),
                    bool(e.get("trapped", False)),
                )
                for e in data["events"]
            ]
            clearance = data.get("min_scaled_clearance")
            return cls(
                int(data["seed"]),
                int(data["n_uncontrolled"]),
                events,
                math.inf if clearance is None else float(clearance),
                bool(data["completed"]),
                float(data["end_time"]),
                dict(data.get("diagnostics", {})),
            )
        except (KeyError, TypeError, IndexError) as e:
            raise DataError(f"Malformed trial outcome: {e}") from e


def make_trial_configs(
    n_trials: int,
    n_uncontrolled: Tuple[int, int],
    seed: int,
    **kwargs: Any,
) -> List[TrialConfig]:
    """Trial configs with vehicle counts and seeds derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n_trials)
    configs = []
    for child in children:
        trial_seed = int(child.generate_state(1)[0])
        count = int(
            np.random.default_rng(child).integers(n_uncontrolled[0], n_uncontrolled[1] + 1)
        )
        configs.append(TrialConfig(n_uncontrolled=count, seed=trial_seed, **kwargs))
    return configs


def _position_on(agent: AgentState, basis: TrajectoryBasis, t: Any) -> np.ndarray:
    X0, Y0, v0 = agent.anchor
    tau = np.atleast_1d(np.asarray(t, dtype=float) - agent.committed_at)
    deviation = basis.bases[agent.committed].sample_at(tau)
    return deviation + np.column_stack([X0 + v0 * tau, np.full(len(tau), Y0)])


def _agent_vehicle(
    agent: AgentState, basis: TrajectoryBasis, t: float, dt: float
) -> VehicleState:
    here, ahead = _position_on(agent, basis, np.array([t, t + dt]))
    dx, dy = ahead - here
    return replace(
        agent.vehicle,
        X=float(here[0]),
        Y=float(here[1]),
        v=max(0.0, float(dx) / dt),
        psi=float(math.atan2(dy, dx)) if dx > 0 else 0.0,
    )


def predicted_set(
    vehicle: VehicleState,
    world: WorldState,
    predictor: CalibratedPredictor,
    basis: TrajectoryBasis,
) -> Tuple[int, ...]:
    """Predicted-possible bases of ``vehicle``; the straight base if none."""
    others = tuple(v for v in world.vehicles() if v.id != vehicle.id)
    try:
        affordance = extract_affordance(Scene(vehicle, others, world.lanes))
    except SceneError:
        logger.debug("%s is off the road, predicting the straight base", vehicle.id)
        return (basis.straight_index(),)
    candidates = predictor.predict_set(affordance)
    return candidates if candidates else (basis.straight_index(),)


class Commitment(NamedTuple):
    index: int
    possible: Tuple[int, ...]
    held: bool = False


def uncontrolled_policy(
    agent_id: str,
    world: WorldState,
    predictor: CalibratedPredictor,
    basis: TrajectoryBasis,
) -> Commitment:
    """
    Commit an uncontrolled vehicle to a base.

    Candidates are the predicted set (the straight base when it is empty).
    A candidate is rejected if, over the basis horizon, it overlaps another
    uncontrolled vehicle following its commitment, overlaps the controlled
    vehicle at constant velocity when that vehicle is directly ahead in the
    same lane, or leaves the road. A survivor is chosen uniformly with the
    world RNG. Without survivors the vehicle takes the candidate with the
    longest time to first contact; if every candidate is in contact at once it
    holds the straight base and the commitment is marked ``held``.

    Returns:
        The committed index, the predicted-possible set and the hold flag.
    """
    agent = next(a for a in world.agents if a.vehicle.id == agent_id)
    vehicle = agent.vehicle
    candidates = predicted_set(vehicle, world, predictor, basis)
    times = basis.bases[0].times
    ramp = np.column_stack([vehicle.X + vehicle.v * times, np.full(len(times), vehicle.Y)])
    paths = basis.stack()[list(candidates)] + ramp[np.newaxis]

    obstacle_paths, obstacle_dims = [], []
    for other in world.agents:
        if other.vehicle.id == agent_id:
            continue
        obstacle_paths.append(_position_on(other, basis, world.t + times))
        obstacle_dims.append(other.vehicle.dims)
    ego = world.ego
    lanes = world.lanes
    if lanes.lane_index(ego.Y) == lanes.lane_index(vehicle.Y) and ego.X > vehicle.X:
        obstacle_paths.append(ego.advanced(times))
        obstacle_dims.append(ego.dims)

    onset = contact_steps(
        paths,
        vehicle.dims,
        np.array(obstacle_paths).reshape(-1, len(times), 2),
        np.array(obstacle_dims).reshape(-1, 2),
    )
    low, high = lanes.bounds
    off_road = (paths[..., 1] < low) | (paths[..., 1] > high)
    off_onset = np.where(off_road.any(axis=1), np.argmax(off_road, axis=1), -1)
    onset = np.where(
        (onset >= 0) & (off_onset >= 0),
        np.minimum(onset, off_onset),
        np.maximum(onset, off_onset),
    )

    survivors = [c for c, s in zip(candidates, onset) if s < 0]
    if survivors:
        return Commitment(survivors[int(world.rng.integers(len(survivors)))], candidates)
    latest = int(np.max(onset))
    if latest > 0:
        choice = candidates[int(np.argmax(onset))]
        logger.debug("%s has no safe candidate, latest contact at step %d", agent_id, latest)
        return Commitment(choice, candidates)
    logger.debug("%s is in contact on every candidate, holding straight", agent_id)
    return Commitment(basis.straight_index(), candidates, held=True)


def _commit(
    agent: AgentState,
    world: WorldState,
    predictor: CalibratedPredictor,
    basis: TrajectoryBasis,
) -> AgentState:
    commitment = uncontrolled_policy(agent.vehicle.id, world, predictor, basis)
    v = agent.vehicle
    return AgentState(
        v,
        commitment.index,
        world.t,
        (v.X, v.Y, v.v),
        commitment.possible,
        commitment.held,
    )


def sample_initial_world(
    config: TrialConfig,
    predictor: CalibratedPredictor,
    basis: TrajectoryBasis,
) -> WorldState:
    """Initial scene with the controlled vehicle mid-pack, all agents committed."""
    rng = np.random.default_rng(config.seed)
    lanes = config.lanes
    vehicles, ego_index = sample_vehicles(
        rng, lanes, config.n_uncontrolled + 1, config.speed_range, config.gap_range
    )
    ego = replace(vehicles[ego_index], id=CONTROLLED_ID)
    straight = basis.straight_index()
    agents = [
        AgentState(v, straight, 0.0, (v.X, v.Y, v.v), (straight,))
        for i, v in enumerate(vehicles)
        if i != ego_index
    ]
    world = WorldState(0.0, ego, agents, lanes, rng)
    for i, agent in enumerate(world.agents):
        world.agents[i] = _commit(agent, world, predictor, basis)
    return world


def _needs_replan(agent: AgentState, t: float, period: float) -> bool:
    return t - agent.committed_at >= period - 1e-9


def step_world(
    world: WorldState,
    dt: float,
    predictor: CalibratedPredictor,
    basis: TrajectoryBasis,
    controller: MpcController,
    replan_period: float = 1.0,
) -> WorldState:
    """
    Advance the world by ``dt``.

    Agents due for a replan commit first (in list order), then the controlled
    vehicle applies the MPC policy against all neighbours' predicted tubes,
    then everyone moves.

    Raises:
        SolverError: Propagated from the planner.
    """
    for i, agent in enumerate(world.agents):
        if _needs_replan(agent, world.t, replan_period):
            world.agents[i] = _commit(agent, world, predictor, basis)

    config = controller.config
    predictions = {
        agent.vehicle.id: predicted_set(agent.vehicle, world, predictor, basis)
        for agent in world.agents
    }
    scene = Scene(world.ego, tuple(a.vehicle for a in world.agents), world.lanes)
    obstacles = build_obstacle_field(
        scene,
        predictions,
        basis,
        config.horizon,
        config.dt,
        config.inflation,
        config.footprint_scale,
        config.ignore_rear,
    )
    ego = world.ego
    y_ref = world.lanes.lane_centers[world.lanes.lane_index(ego.Y)]
    u = controller(EgoState(ego.X, ego.Y, ego.v, ego.psi), obstacles, y_ref)
    moved = dubins_step(EgoState(ego.X, ego.Y, ego.v, ego.psi), u, dt)
    new_ego = replace(ego, X=moved.X, Y=moved.Y, v=max(0.0, moved.v), psi=moved.psi)

    t_next = world.t + dt
    agents = [
        replace(agent, vehicle=_agent_vehicle(agent, basis, t_next, dt))
        for agent in world.agents
    ]
    return WorldState(t_next, new_ego, agents, world.lanes, world.rng, obstacles)


def classify_contact(a: VehicleState, b: VehicleState) -> Tuple[str, str]:
    """
    Class and striking vehicle of a contact.

    The contact normal is the axis of least penetration. A longitudinal
    contact struck by the vehicle behind is a rear-end collision; everything
    else is frontal/side. On lateral contacts the striker is the vehicle
    moving faster sideways.

    Returns:
        (kind, striker id)
    """
    pen_x = (a.length + b.length) / 2 - abs(a.X - b.X)
    pen_y = (a.width + b.width) / 2 - abs(a.Y - b.Y)
    rear, front = (a, b) if a.X <= b.X else (b, a)
    if pen_x <= pen_y:
        if rear.v >= front.v:
            return REAR_END, rear.id
        return FRONTAL_SIDE, front.id
    lateral = [abs(v.v * math.sin(v.psi)) for v in (rear, front)]
    return FRONTAL_SIDE, front.id if lateral[1] > lateral[0] else rear.id


def _overlap(a: VehicleState, b: VehicleState) -> bool:
    return (
        abs(a.X - b.X) < (a.length + b.length) / 2
        and abs(a.Y - b.Y) < (a.width + b.width) / 2
    )


def is_trapped(world: WorldState, radius: float = 15.0) -> bool:
    """
    True if the controlled vehicle is boxed in on all four sides.

    A side is closed by a vehicle within ``radius`` (bumper distance) in the
    matching region; left and right are also closed by the road edge.
    """
    ego, lanes = world.ego, world.lanes
    lane = lanes.lane_index(ego.Y)
    closed = {
        "front": False,
        "rear": False,
        "left": lane + 1 >= lanes.n_lanes,
        "right": lane == 0,
    }
    for agent in world.agents:
        other = agent.vehicle
        gap = abs(other.X - ego.X) - (ego.length + other.length) / 2
        if gap > radius:
            continue
        offset = lanes.lane_index(other.Y) - lane
        if offset == 0:
            closed["front" if other.X > ego.X else "rear"] = True
        elif offset == 1:
            closed["left"] = True
        elif offset == -1:
            closed["right"] = True
    return all(closed.values())


def detect_collisions(world: WorldState, trap_radius: float = 15.0) -> List[CollisionEvent]:
    """Every overlapping pair at the current instant, classified."""
    vehicles = world.vehicles()
    events = []
    for i in range(len(vehicles)):
        for j in range(i + 1, len(vehicles)):
            a, b = vehicles[i], vehicles[j]
            if not _overlap(a, b):
                continue
            kind, striker = classify_contact(a, b)
            involves_ego = CONTROLLED_ID in (a.id, b.id)
            events.append(
                CollisionEvent(
                    round(world.t, 9),
                    tuple(sorted((a.id, b.id))),  # type: ignore[arg-type]
                    kind,
                    striker,
                    involves_ego,
                    involves_ego and is_trapped(world, trap_radius),
                )
            )
    return events


def _trace_rows(world: WorldState) -> List[Dict[str, Any]]:
    rows = [
        {
            "t": world.t,
            "id": world.ego.id,
            "X": world.ego.X,
            "Y": world.ego.Y,
            "v": world.ego.v,
            "psi": world.ego.psi,
            "committed_base": -1,
        }
    ]
    for agent in world.agents:
        v = agent.vehicle
        rows.append(
            {
                "t": world.t,
                "id": v.id,
                "X": v.X,
                "Y": v.Y,
                "v": v.v,
                "psi": v.psi,
                "committed_base": agent.committed,
            }
        )
    return rows


def run_trial(
    config: TrialConfig,
    predictor: CalibratedPredictor,
    basis: TrajectoryBasis,
    planner_config: Optional[PlannerConfig] = None,
) -> TrialOutcome:
    """
    Simulate one trial.

    Stops at the first collision involving the controlled vehicle or at the
    end of ``duration``. Contacts between the same pair are recorded once,
    at onset. A planner failure ends the trial as incomplete.
    """
    planner_config = replace(
        planner_config or PlannerConfig(), ignore_rear=config.ignore_rear
    )
    controller = MpcController(planner_config)
    world = sample_initial_world(config, predictor, basis)
    steps = int(round(config.duration / config.dt))
    events: List[CollisionEvent] = []
    active: set = set()
    min_clearance = math.inf
    rows: List[Dict[str, Any]] = _trace_rows(world) if config.trace else []
    completed = True
    diagnostics: Dict[str, Any] = {}

    for _ in range(steps):
        try:
            next_world = step_world(
                world, config.dt, predictor, basis, controller, config.replan_period
            )
        except SolverError as e:
            logger.warning("Trial %d: planner failed at t=%.1f: %s", config.seed, world.t, e)
            completed = False
            diagnostics = {"error": str(e), "t": world.t, **e.diagnostics}
            break
        if next_world.obstacles is not None:
            ego_now = np.array([[world.ego.X, world.ego.Y, world.ego.v, world.ego.psi]])
            clearance = min_scaled_distance(ego_now, next_world.obstacles)[0]
            min_clearance = min(min_clearance, float(clearance))
        world = next_world
        if config.trace:
            rows.extend(_trace_rows(world))

        current = detect_collisions(world, config.trap_radius)
        onsets = [e for e in current if e.pair not in active]
        active = {e.pair for e in current}
        events.extend(onsets)
        if any(e.involves_ego for e in onsets):
            break

    return TrialOutcome(
        config.seed,
        config.n_uncontrolled,
        events,
        min_clearance,
        completed,
        round(world.t, 9),
        diagnostics,
        pd.DataFrame(rows, columns=list(TRACE_COLUMNS)) if config.trace else None,
    )


TrialJob = Tuple[TrialConfig, CalibratedPredictor, TrajectoryBasis, PlannerConfig]


def _run_trial_job(job: TrialJob) -> TrialOutcome:
    return run_trial(*job)


def run_trials(
    configs: Sequence[TrialConfig],
    predictor: CalibratedPredictor,
    basis: TrajectoryBasis,
    planner_config: Optional[PlannerConfig] = None,
    workers: int = 1,
) -> List[TrialOutcome]:
    """Run trials, in a process pool when ``workers > 1``, in trial order."""
    planner_config = planner_config or PlannerConfig()
    jobs = [(c, predictor, basis, planner_config) for c in configs]
    logger.info("Running %d trials on %d worker(s)", len(jobs), workers)
    if workers <= 1:
        return [_run_trial_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_trial_job, jobs))


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    z = float(norm.ppf(1 - (1 - confidence) / 2))
    p = successes / n
    denom = 1 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    low = 0.0 if successes == 0 else max(0.0, center - half)
    high = 1.0 if successes == n else min(1.0, center + half)
    return (low, high)


@dataclass
class StatisticsReport:
    """
    Aggregated collision statistics.

    Counts under ``counts`` and ``by_n_uncontrolled`` cover collisions that
    involve the controlled vehicle; ``all_counts`` covers every pair.
    """

    n_trials: int
    counts: Dict[str, int]
    all_counts: Dict[str, int]
    by_n_uncontrolled: Dict[int, Dict[str, int]]
    rates: Dict[str, Dict[str, float]]
    traps: int
    incomplete: int
    fingerprint: str = ""

    def to_dict(self) -> Dict[str, Any]:
        document = asdict(self)
        document["by_n_uncontrolled"] = {
            str(k): v for k, v in sorted(self.by_n_uncontrolled.items())
        }
        return document

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"class": kind, "n_uncontrolled": n, "count": counts[kind]}
            for n, counts in sorted(self.by_n_uncontrolled.items())
            for kind in COLLISION_CLASSES
        ]
        return pd.DataFrame(rows, columns=["class", "n_uncontrolled", "count"])

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


def aggregate(
    outcomes: Sequence[TrialOutcome], confidence: float = 0.95
) -> StatisticsReport:
    """
    Fold trial outcomes, in order, into a report.

    Raises:
        ContractError: If there are no outcomes.
    """
    if not outcomes:
        raise ContractError("Cannot aggregate an empty list of outcomes")
    counts = dict.fromkeys(COLLISION_CLASSES, 0)
    all_counts = dict.fromkeys(COLLISION_CLASSES, 0)
    by_n: Dict[int, Dict[str, int]] = {}
    traps = 0
    trials_with = dict.fromkeys(COLLISION_CLASSES, 0)
    for outcome in outcomes:
        bucket = by_n.setdefault(
            outcome.n_uncontrolled, {"trials": 0, **dict.fromkeys(COLLISION_CLASSES, 0)}
        )
        bucket["trials"] += 1
        for event in outcome.events:
            all_counts[event.kind] += 1
            if event.involves_ego:
                counts[event.kind] += 1
                bucket[event.kind] += 1
                traps += int(event.trapped)
        for kind in COLLISION_CLASSES:
            trials_with[kind] += int(any(e.kind == kind for e in outcome.ego_events))
    n = len(outcomes)
    rates = {}
    for kind in COLLISION_CLASSES:
        low, high = wilson_interval(trials_with[kind], n, confidence)
        rates[kind] = {"rate": trials_with[kind] / n, "low": low, "high": high}
    return StatisticsReport(
        n,
        counts,
        all_counts,
        by_n,
        rates,
        traps,
        sum(not o.completed for o in outcomes),
    )


def write_trace(outcome: TrialOutcome, path: Union[str, Path]) -> None:
    """Per-step trace CSV of a trial run with ``trace=True``."""
    if outcome.trace is None:
        raise ContractError(f"Trial {outcome.seed} was run without tracing")
    outcome.trace.to_csv(path, index=False)
