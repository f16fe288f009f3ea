"""
Receding-horizon controller for the controlled vehicle.

The ego follows Euler-discretised Dubins car dynamics. Predicted positions of
the surrounding vehicles become time-varying elliptical keep-out regions;
their violation is penalised through a slack that is eliminated in closed
form, so the optimisation runs over the input sequence only (single
shooting). Gradients come from an adjoint pass through the rollout and the
bounded quasi-Newton solver in ``scipy.optimize`` keeps inputs inside their
box.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from .affordance import Scene
from .basis import TrajectoryBasis
from .errors import ConfigError, ContractError, SolverError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EgoState:
    X: float
    Y: float
    v: float
    psi: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.v, self.psi], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "EgoState":
        X, Y, v, psi = (float(x) for x in values)
        return cls(X, Y, v, psi)


@dataclass(frozen=True)
class ControlInput:
    a: float
    r: float


@dataclass(frozen=True)
class PlannerConfig:
    """
    Controller settings.

    Attributes:
        horizon: Number of steps N.
        dt: Step length [s].
        w_v, w_Y, w_psi, w_a, w_r: Quadratic cost weights.
        slack_weight: c_k, the same for every step.
        per_constraint_slack: One slack per (obstacle, prediction) instead of
            one per step.
        ignore_rear: Drop vehicles behind the ego in its own lane.
        footprint_scale: Multiplies half-lengths/widths of both footprints;
            sqrt(2) makes the ellipse contain the rectangle sum.
        inflation: Multiplies epsilon times the largest atom semi-axis.
        v_ref: Reference speed [m/s].
        y_ref: Reference lateral position; None tracks the start lane center.
        a_bounds, r_bounds: Input box.
        tol: Projected-gradient tolerance.
        max_iter: Iteration cap per start.
        multi_start: Also descend from braking and swerving starts.
    """

    horizon: int = 30
    dt: float = 0.1
    w_v: float = 1.0
    w_Y: float = 2.0
    w_psi: float = 10.0
    w_a: float = 0.1
    w_r: float = 1.0
    slack_weight: float = 100.0
    per_constraint_slack: bool = False
    ignore_rear: bool = True
    footprint_scale: float = math.sqrt(2.0)
    inflation: float = 1.0
    v_ref: float = 25.0
    y_ref: Optional[float] = None
    a_bounds: Tuple[float, float] = (-6.0, 3.0)
    r_bounds: Tuple[float, float] = (-0.3, 0.3)
    tol: float = 1e-6
    max_iter: int = 200
    multi_start: bool = True

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.dt <= 0:
            raise ConfigError("Planner horizon must be >= 1 and dt > 0")
        for name, (low, high) in (("a", self.a_bounds), ("r", self.r_bounds)):
            if not low <= 0 <= high:
                raise ConfigError(f"Bounds for {name} must contain 0, got {(low, high)}")
        weights = (self.w_v, self.w_Y, self.w_psi, self.w_a, self.w_r, self.slack_weight)
        if min(weights) < 0:
            raise ConfigError("Planner weights must be non-negative")
        if self.footprint_scale <= 0 or self.inflation < 0:
            raise ConfigError("footprint_scale must be positive, inflation >= 0")

    def bounds(self) -> List[Tuple[float, float]]:
        return [tuple(self.a_bounds), tuple(self.r_bounds)] * self.horizon


@dataclass(frozen=True)
class ObstacleField:
    """
    Keep-out ellipses over the horizon, one tube per (vehicle, prediction).

    Attributes:
        centers: Tube centers, shape (K, N + 1, 2).
        obstacle_axes: (a^i, b^i) of the owning vehicle, shape (K, 2).
        ego_axes: (a, b) of the ego.
        vehicle_ids: Owner of each tube.
        base_indices: Predicted base of each tube.
    """

    centers: np.ndarray
    obstacle_axes: np.ndarray
    ego_axes: Tuple[float, float]
    vehicle_ids: Tuple[str, ...] = ()
    base_indices: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        centers = np.asarray(self.centers, dtype=float)
        axes = np.asarray(self.obstacle_axes, dtype=float).reshape(-1, 2)
        if centers.ndim != 3 or centers.shape[2] != 2 or len(centers) != len(axes):
            raise ContractError(
                f"Centers {centers.shape} do not match axes {axes.shape}"
            )
        if np.any(axes <= 0) or min(self.ego_axes) <= 0:
            raise ContractError("Ellipse semi-axes must be positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "obstacle_axes", axes)

    @classmethod
    def empty(cls, horizon: int, ego_axes: Tuple[float, float] = (2.5, 0.9)) -> "ObstacleField":
        return cls(np.zeros((0, horizon + 1, 2)), np.zeros((0, 2)), ego_axes)

    @property
    def horizon(self) -> int:
        return int(self.centers.shape[1]) - 1

    @property
    def n_tubes(self) -> int:
        return int(self.centers.shape[0])

    @property
    def n_vehicles(self) -> int:
        return len(set(self.vehicle_ids))

    @property
    def combined_axes(self) -> np.ndarray:
        return self.obstacle_axes + np.asarray(self.ego_axes)


@dataclass
class PlanResult:
    """
    Attributes:
        states: x_0..x_N as rows (X, Y, v, psi).
        inputs: u_0..u_{N-1} as rows (a, r).
        slack: gamma_k for k = 0..N (gamma_0 is reported, not penalised).
        objective: Cost of the plan.
        iterations: Solver iterations of the winning start.
        converged: Projected-gradient tolerance met.
        start: Name of the winning start.
        history: Objective at each accepted iterate of the winning start.
    """

    states: np.ndarray
    inputs: np.ndarray
    slack: np.ndarray
    objective: float
    iterations: int
    converged: bool
    start: str = "zero"
    history: List[float] = field(default_factory=list)

    @property
    def first_input(self) -> ControlInput:
        return ControlInput(float(self.inputs[0, 0]), float(self.inputs[0, 1]))


def _step(
    X: float, Y: float, v: float, psi: float, a: float, r: float, dt: float
) -> Tuple[float, float, float, float]:
    return (
        X + v * math.cos(psi) * dt,
        Y + v * math.sin(psi) * dt,
        v + a * dt,
        psi + r * dt,
    )


def dubins_step(x: EgoState, u: ControlInput, dt: float) -> EgoState:
    """One Euler step of the Dubins car."""
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    return EgoState(*_step(x.X, x.Y, x.v, x.psi, u.a, u.r, dt))


def rollout(x0: EgoState, inputs: np.ndarray, dt: float) -> np.ndarray:
    """States x_0..x_N obtained by folding :func:`dubins_step` over ``inputs``."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
    states = np.empty((len(inputs) + 1, 4))
    state = (x0.X, x0.Y, x0.v, x0.psi)
    states[0] = state
    for k, (a, r) in enumerate(inputs):
        state = _step(*state, float(a), float(r), dt)
        states[k + 1] = state
    return states


def build_obstacle_field(
    scene: Scene,
    predictions: Mapping[str, Sequence[int]],
    basis: TrajectoryBasis,
    horizon: int,
    dt: float,
    inflation: float = 1.0,
    footprint_scale: float = 1.0,
    ignore_rear: bool = False,
) -> ObstacleField:
    """
    Keep-out tubes for every predicted base of every surrounding vehicle.

    Centers reconstruct each predicted base at the vehicle's current position
    and speed, interpolated at the planner's step times. Semi-axes are
    ``footprint_scale * length / 2 + inflation * epsilon * max(a_atom)`` and
    the same form for widths; the ego gets ``footprint_scale`` times its half
    dimensions.

    Args:
        scene: Scene with the controlled vehicle as ego.
        predictions: Predicted base indices per surrounding vehicle id.
        basis: Trajectory basis the indices refer to.
        horizon: Planner steps N.
        dt: Planner step [s].
        inflation: Scale of the epsilon-ball inflation.
        footprint_scale: Scale of the half-dimensions.
        ignore_rear: Skip vehicles behind the ego in the ego's lane.

    Raises:
        ContractError: If a vehicle has no prediction or an empty one.
    """
    ego = scene.ego
    ego_axes = (footprint_scale * ego.length / 2, footprint_scale * ego.width / 2)
    times = np.arange(horizon + 1) * dt
    pad_a = inflation * basis.epsilon * float(np.max(basis.atoms.a))
    pad_b = inflation * basis.epsilon * float(np.max(basis.atoms.b))
    ego_lane = scene.lanes.lane_index(ego.Y)

    centers, axes, owners, indices = [], [], [], []
    for other in scene.others:
        if other.id not in predictions or len(predictions[other.id]) == 0:
            raise ContractError(f"Vehicle '{other.id}' has no predicted bases")
        if (
            ignore_rear
            and scene.lanes.lane_index(other.Y) == ego_lane
            and other.X < ego.X
        ):
            continue
        ramp = np.column_stack([other.X + other.v * times, np.full(len(times), other.Y)])
        for j in predictions[other.id]:
            centers.append(basis.bases[int(j)].sample_at(times) + ramp)
            axes.append(
                (
                    footprint_scale * other.length / 2 + pad_a,
                    footprint_scale * other.width / 2 + pad_b,
                )
            )
            owners.append(other.id)
            indices.append(int(j))
    if not centers:
        return ObstacleField.empty(horizon, ego_axes)
    return ObstacleField(
        np.stack(centers), np.array(axes), ego_axes, tuple(owners), tuple(indices)
    )


def _ellipse_terms(positions: np.ndarray, field: ObstacleField) -> Tuple[np.ndarray, ...]:
    """LHS of every keep-out constraint, shape (N + 1, K), with its offsets."""
    axes = field.combined_axes
    diff = positions[:, np.newaxis, :] - np.transpose(field.centers, (1, 0, 2))
    scaled = diff / axes[np.newaxis]
    lhs = np.sum(scaled**2, axis=2)
    return lhs, diff, axes


def slack_values(states: np.ndarray, field: ObstacleField) -> np.ndarray:
    """gamma_k = max(0, 1 - min LHS_k) for every state row."""
    if field.n_tubes == 0:
        return np.zeros(len(states))
    lhs, _, _ = _ellipse_terms(np.asarray(states)[:, :2], field)
    return np.maximum(0.0, 1.0 - lhs.min(axis=1))


def min_scaled_distance(states: np.ndarray, field: ObstacleField) -> np.ndarray:
    """Ellipse-normalised distance to the nearest tube per state, inf if none."""
    if field.n_tubes == 0:
        return np.full(len(states), np.inf)
    lhs, _, _ = _ellipse_terms(np.asarray(states)[:, :2], field)
    return np.sqrt(lhs.min(axis=1))


def _cost_and_state_grads(
    states: np.ndarray,
    inputs: np.ndarray,
    field: ObstacleField,
    config: PlannerConfig,
    y_ref: float,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Cost, dJ/dx_k (partial, k = 0..N) and dJ/du_k (partial)."""
    dv = states[:, 2] - config.v_ref
    dY = states[:, 1] - y_ref
    psi = states[:, 3]
    state_cost = config.w_v * dv**2 + config.w_Y * dY**2 + config.w_psi * psi**2
    input_cost = config.w_a * inputs[:, 0] ** 2 + config.w_r * inputs[:, 1] ** 2
    cost = float(state_cost.sum() + input_cost.sum())

    gx = np.zeros_like(states)
    gx[:, 1] = 2 * config.w_Y * dY
    gx[:, 2] = 2 * config.w_v * dv
    gx[:, 3] = 2 * config.w_psi * psi
    gu = np.column_stack([2 * config.w_a * inputs[:, 0], 2 * config.w_r * inputs[:, 1]])

    if field.n_tubes:
        # x_0 is fixed; only x_1..x_N carry slack.
        lhs, diff, axes = _ellipse_terms(states[:, :2], field)
        lhs, diff = lhs[1:], diff[1:]
        dlhs = 2 * diff / axes[np.newaxis] ** 2
        c = config.slack_weight
        if config.per_constraint_slack:
            gamma = np.maximum(0.0, 1.0 - lhs)
            cost += c * float(np.sum(gamma**2))
            gx[1:, :2] += np.sum(-2 * c * gamma[..., np.newaxis] * dlhs, axis=1)
        else:
            worst = np.argmin(lhs, axis=1)
            rows = np.arange(len(worst))
            gamma = np.maximum(0.0, 1.0 - lhs[rows, worst])
            cost += c * float(np.sum(gamma**2))
            gx[1:, :2] += -2 * c * gamma[:, np.newaxis] * dlhs[rows, worst]
    return cost, gx, gu


def mpc_cost(
    states: np.ndarray,
    inputs: np.ndarray,
    field: ObstacleField,
    config: PlannerConfig,
    y_ref: Optional[float] = None,
) -> float:
    """
    Objective of a state/input sequence.

    sum_k h(x_k, u_k) + Q(x_N) + sum_{k>=1} c * gamma_k^2, where h tracks
    (v_ref, y_ref, heading 0) and penalises inputs, and Q repeats the state
    terms at x_N.

    Raises:
        ContractError: If the sequences are inconsistent.
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 2)
    if states.shape != (len(inputs) + 1, 4):
        raise ContractError(
            f"Need {len(inputs) + 1} states for {len(inputs)} inputs, got {states.shape}"
        )
    if field.n_tubes and field.horizon != len(inputs):
        raise ContractError(f"Field horizon {field.horizon} != {len(inputs)} steps")
    y_ref = config.y_ref if y_ref is None else y_ref
    y_ref = float(states[0, 1]) if y_ref is None else y_ref
    return _cost_and_state_grads(states, inputs, field, config, y_ref)[0]


def _objective_and_gradient(
    flat: np.ndarray,
    x0: EgoState,
    field: ObstacleField,
    config: PlannerConfig,
    y_ref: float,
) -> Tuple[float, np.ndarray]:
    inputs = flat.reshape(-1, 2)
    dt = config.dt
    states = rollout(x0, inputs, dt)
    cost, gx, gu = _cost_and_state_grads(states, inputs, field, config, y_ref)

    # Adjoint: lam_k = dJ/dx_k including everything downstream.
    lam = gx[-1].copy()
    grad = np.empty_like(inputs)
    for k in range(len(inputs) - 1, -1, -1):
        grad[k, 0] = gu[k, 0] + lam[2] * dt
        grad[k, 1] = gu[k, 1] + lam[3] * dt
        _, _, v, psi = states[k]
        c, s = math.cos(psi), math.sin(psi)
        carry = lam.copy()
        carry[2] += lam[0] * c * dt + lam[1] * s * dt
        carry[3] += -lam[0] * v * s * dt + lam[1] * v * c * dt
        lam = gx[k] + carry
    return cost, grad.ravel()


def _projected_gradient_norm(
    flat: np.ndarray, gradient: np.ndarray, bounds: Sequence[Tuple[float, float]]
) -> float:
    low, high = np.array(bounds).T
    return float(np.max(np.abs(np.clip(flat - gradient, low, high) - flat), initial=0.0))


def _primary_starts(
    config: PlannerConfig, warm_start: Optional[np.ndarray]
) -> List[Tuple[str, np.ndarray]]:
    N = config.horizon
    starts: List[Tuple[str, np.ndarray]] = []
    if warm_start is not None:
        starts.append(("warm", np.asarray(warm_start, dtype=float).reshape(N, 2)))
    starts.append(("zero", np.zeros((N, 2))))
    return starts


def _escape_starts(config: PlannerConfig) -> List[Tuple[str, np.ndarray]]:
    N = config.horizon
    brake = np.zeros((N, 2))
    brake[:, 0] = config.a_bounds[0]
    starts = [("brake", brake)]
    third = max(1, N // 3)
    for name, rate in (
        ("swerve_left", 0.5 * config.r_bounds[1]),
        ("swerve_right", 0.5 * config.r_bounds[0]),
    ):
        swerve = np.zeros((N, 2))
        swerve[:third, 1] = rate
        swerve[third : 2 * third, 1] = -rate
        starts.append((name, swerve))
    return starts


def _descend(
    name: str,
    start: np.ndarray,
    x0: EgoState,
    field: ObstacleField,
    config: PlannerConfig,
    y_ref: float,
) -> Optional[PlanResult]:
    bounds = config.bounds()
    low, high = np.array(bounds).T
    flat = np.clip(start.ravel(), low, high)
    initial, _ = _objective_and_gradient(flat, x0, field, config, y_ref)
    if not np.isfinite(initial):
        logger.warning("Skipping %s start with non-finite cost", name)
        return None
    history = [initial]

    def record(intermediate_result: Any) -> None:
        history.append(float(intermediate_result.fun))

    result = minimize(
        _objective_and_gradient,
        flat,
        args=(x0, field, config, y_ref),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        callback=record,
        options={"maxiter": config.max_iter, "gtol": config.tol, "ftol": 1e-15},
    )
    solution = np.clip(result.x, low, high)
    objective, gradient = _objective_and_gradient(solution, x0, field, config, y_ref)
    if not np.isfinite(objective) or objective > initial:
        solution = flat
        objective, gradient = _objective_and_gradient(flat, x0, field, config, y_ref)
    logger.debug("start %s: %.6g -> %.6g (%d it)", name, initial, objective, result.nit)
    inputs = solution.reshape(-1, 2)
    states = rollout(x0, inputs, config.dt)
    return PlanResult(
        states,
        inputs,
        slack_values(states, field),
        objective,
        int(result.nit),
        _projected_gradient_norm(solution, gradient, bounds) <= config.tol,
        name,
        history,
    )


def solve_mpc(
    x0: EgoState,
    field: ObstacleField,
    config: Optional[PlannerConfig] = None,
    warm_start: Optional[np.ndarray] = None,
    y_ref: Optional[float] = None,
) -> PlanResult:
    """
    Solve the finite-horizon problem from ``x0``.

    The warm start (if any) and the zero input are clipped into the input
    box and descended with L-BFGS-B using the exact adjoint gradient. When
    ``multi_start`` is on and the best plan still enters a keep-out ellipse,
    full braking and a left and right swerve are descended as well. The
    lowest objective wins; starts with a non-finite cost are skipped.

    Raises:
        ContractError: If the field horizon differs from the config horizon.
        SolverError: If no start yields a finite objective.
    """
    config = config or PlannerConfig()
    if field.horizon != config.horizon:
        raise ContractError(
            f"Field horizon {field.horizon} != planner horizon {config.horizon}"
        )
    y_ref = config.y_ref if y_ref is None else y_ref
    y_ref = x0.Y if y_ref is None else y_ref

    best: Optional[PlanResult] = None
    starts = _primary_starts(config, warm_start)
    escaped = False
    while starts:
        name, start = starts.pop(0)
        plan = _descend(name, start, x0, field, config, y_ref)
        if plan is not None and (best is None or plan.objective < best.objective):
            best = plan
        if not starts and config.multi_start and not escaped:
            escaped = True
            if best is None or np.max(best.slack[1:], initial=0.0) > 0:
                starts = _escape_starts(config)
    if best is None:
        raise SolverError(
            "No start produced a finite objective",
            {"x0": x0.to_array().tolist(), "tubes": field.n_tubes},
        )
    return best


class MpcController:
    """
    Receding-horizon policy with warm starting.

    Each call solves from the current state, applies the first input and
    keeps the remaining inputs, shifted by one step, as the next warm start.
    One instance belongs to one control loop.
    """

    def __init__(self, config: Optional[PlannerConfig] = None) -> None:
        self.config = config or PlannerConfig()
        self.last_plan: Optional[PlanResult] = None
        self._warm: Optional[np.ndarray] = None

    def reset(self) -> None:
        self.last_plan = None
        self._warm = None

    def solve(
        self, state: EgoState, field: ObstacleField, y_ref: Optional[float] = None
    ) -> PlanResult:
        plan = solve_mpc(state, field, self.config, self._warm, y_ref)
        self.last_plan = plan
        self._warm = np.vstack([plan.inputs[1:], plan.inputs[-1:]])
        return plan

    def __call__(
        self, state: EgoState, field: ObstacleField, y_ref: Optional[float] = None
    ) -> ControlInput:
        return self.solve(state, field, y_ref).first_input


def mpc_policy(
    state: EgoState,
    field: ObstacleField,
    controller: MpcController,
    y_ref: Optional[float] = None,
) -> ControlInput:
    """First input of a fresh solve; the controller keeps the warm start."""
    return controller(state, field, y_ref)


def plan_frame(plan: PlanResult) -> pd.DataFrame:
    """Plan as a table with columns k, X, Y, v, psi, a, r, slack."""
    frame = pd.DataFrame(plan.states, columns=["X", "Y", "v", "psi"])
    frame.insert(0, "k", np.arange(len(plan.states)))
    inputs = np.vstack([plan.inputs, np.full((1, 2), np.nan)])
    frame["a"] = inputs[:, 0]
    frame["r"] = inputs[:, 1]
    frame["slack"] = plan.slack
    return frame


def write_plan_trace(plan: PlanResult, path: Union[str, Path]) -> None:
    plan_frame(plan).to_csv(path, index=False)

