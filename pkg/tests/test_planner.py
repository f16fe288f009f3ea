"""
Tests for the Dubins rollout, keep-out tubes and the receding-horizon solver.
"""

import itertools

import numpy as np
import pandas as pd
import pytest

from calipred.affordance import LaneGeometry, Scene, VehicleState
from calipred.errors import ConfigError, ContractError
from calipred.planner import (
    ControlInput,
    EgoState,
    MpcController,
    ObstacleField,
    PlannerConfig,
    _objective_and_gradient,
    build_obstacle_field,
    dubins_step,
    min_scaled_distance,
    mpc_cost,
    mpc_policy,
    plan_frame,
    rollout,
    slack_values,
    solve_mpc,
    write_plan_trace,
)

MIDDLE = 5.55
AXES = (2.5, 0.9)


def _blocking_field(horizon: int = 30, X: float = 30.0, Y: float = MIDDLE) -> ObstacleField:
    centers = np.tile([X, Y], (1, horizon + 1, 1)).astype(float)
    return ObstacleField(centers, np.array([AXES]), AXES, ("block",), (0,))


class TestDynamics:
    """Test the Euler-discretised Dubins car."""

    def test_single_step(self):
        x = dubins_step(EgoState(0.0, 0.0, 10.0, 0.0), ControlInput(1.0, 0.2), 0.1)
        assert (x.X, x.Y, x.v, x.psi) == pytest.approx((1.0, 0.0, 10.1, 0.02))

    def test_rollout_folds_single_steps(self):
        rng = np.random.default_rng(0)
        inputs = rng.uniform([-6, -0.3], [3, 0.3], size=(15, 2))
        state = EgoState(3.0, 5.0, 20.0, 0.05)
        states = rollout(state, inputs, 0.1)
        for k, (a, r) in enumerate(inputs):
            state = dubins_step(state, ControlInput(a, r), 0.1)
            np.testing.assert_array_equal(states[k + 1], state.to_array())

    def test_zero_input_keeps_heading(self):
        states = rollout(EgoState(0.0, 1.0, 10.0), np.zeros((5, 2)), 0.1)
        np.testing.assert_allclose(states[:, 0], np.arange(6) * 1.0)
        np.testing.assert_allclose(states[:, 1], 1.0)

    def test_bad_dt(self):
        with pytest.raises(ContractError):
            dubins_step(EgoState(0, 0, 1), ControlInput(0, 0), 0.0)

    def test_state_array_roundtrip(self):
        state = EgoState(1.0, 2.0, 3.0, 0.1)
        assert EgoState.from_array(state.to_array()) == state


class TestPlannerConfig:
    """Test controller settings validation."""

    def test_defaults(self):
        config = PlannerConfig()
        assert config.horizon == 30
        assert config.footprint_scale == pytest.approx(np.sqrt(2.0))
        assert len(config.bounds()) == 60

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"horizon": 0},
            {"dt": -0.1},
            {"a_bounds": (1.0, 3.0)},
            {"w_v": -1.0},
            {"footprint_scale": 0.0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PlannerConfig(**kwargs)


class TestObstacleField:
    """Test keep-out tubes and their construction."""

    def test_empty(self):
        field = ObstacleField.empty(10)
        assert field.n_tubes == 0
        assert field.horizon == 10
        assert np.all(np.isinf(min_scaled_distance(np.zeros((3, 4)), field)))
        assert slack_values(np.zeros((3, 4)), field).tolist() == [0.0, 0.0, 0.0]

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            ObstacleField(np.zeros((2, 5, 2)), np.ones((1, 2)), AXES)

    def test_non_positive_axes(self):
        with pytest.raises(ContractError):
            ObstacleField(np.zeros((1, 5, 2)), np.zeros((1, 2)), AXES)

    def test_slack_inside_and_outside(self):
        field = _blocking_field(horizon=1, X=0.0, Y=0.0)
        states = np.array([[0.0, 0.0, 0.0, 0.0], [10.0, 0.0, 0.0, 0.0]])
        np.testing.assert_allclose(slack_values(states, field), [1.0, 0.0])
        np.testing.assert_allclose(min_scaled_distance(states, field), [0.0, 2.0])

    def _scene(self):
        ego = VehicleState("ego", 0.0, MIDDLE, 25.0)
        others = (
            VehicleState("front", 30.0, MIDDLE, 20.0),
            VehicleState("rear", -20.0, MIDDLE, 28.0),
            VehicleState("left", 5.0, 9.25, 25.0),
        )
        return Scene(ego, others, LaneGeometry())

    def test_one_tube_per_prediction(self, basis):
        predictions = {"front": [0], "rear": [0], "left": list(range(min(2, basis.M)))}
        field = build_obstacle_field(self._scene(), predictions, basis, 30, 0.1)
        assert field.n_tubes == 2 + min(2, basis.M)
        assert field.centers.shape == (field.n_tubes, 31, 2)
        assert field.n_vehicles == 3

    def test_ignore_rear(self, basis):
        predictions = {"front": [0], "rear": [0], "left": [0]}
        field = build_obstacle_field(
            self._scene(), predictions, basis, 30, 0.1, ignore_rear=True
        )
        assert "rear" not in field.vehicle_ids
        assert set(field.vehicle_ids) == {"front", "left"}

    def test_axes_include_inflation(self, basis):
        field = build_obstacle_field(
            self._scene(), {"front": [0], "rear": [0], "left": [0]}, basis, 30, 0.1,
            inflation=1.0, footprint_scale=1.0,
        )
        pad_a = basis.epsilon * float(np.max(basis.atoms.a))
        pad_b = basis.epsilon * float(np.max(basis.atoms.b))
        np.testing.assert_allclose(field.obstacle_axes[0], [2.5 + pad_a, 0.9 + pad_b])
        assert field.ego_axes == pytest.approx((2.5, 0.9))

    def test_centers_follow_the_base(self, basis):
        field = build_obstacle_field(
            self._scene(), {"front": [0], "rear": [0], "left": [0]}, basis, 30, 0.1
        )
        times = np.arange(31) * 0.1
        expected = basis.bases[0].sample_at(times) + np.column_stack(
            [30.0 + 20.0 * times, np.full(31, MIDDLE)]
        )
        np.testing.assert_allclose(field.centers[0], expected)

    def test_missing_prediction(self, basis):
        with pytest.raises(ContractError):
            build_obstacle_field(self._scene(), {"front": [0]}, basis, 30, 0.1)

    def test_no_neighbours(self, basis):
        scene = Scene(VehicleState("ego", 0.0, MIDDLE, 25.0))
        assert build_obstacle_field(scene, {}, basis, 30, 0.1).n_tubes == 0


class TestCost:
    """Test the objective and its adjoint gradient."""

    def test_regulated_state_costs_nothing(self):
        config = PlannerConfig(horizon=5)
        states = rollout(EgoState(0.0, MIDDLE, 25.0), np.zeros((5, 2)), 0.1)
        assert mpc_cost(states, np.zeros((5, 2)), ObstacleField.empty(5), config) == 0.0

    def test_inconsistent_sequences(self):
        with pytest.raises(ContractError):
            mpc_cost(np.zeros((3, 4)), np.zeros((5, 2)), ObstacleField.empty(5), PlannerConfig())

    def test_slack_penalty(self):
        config = PlannerConfig(horizon=1, slack_weight=10.0, w_v=0.0, w_Y=0.0, w_psi=0.0)
        field = _blocking_field(horizon=1, X=0.0, Y=0.0)
        states = np.array([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
        # gamma_0 is not penalised; gamma_1 = 1
        assert mpc_cost(states, np.zeros((1, 2)), field, config) == pytest.approx(10.0)

    @pytest.mark.parametrize("per_constraint_slack", [False, True])
    def test_gradient_matches_finite_differences(self, per_constraint_slack):
        rng = np.random.default_rng(3)
        config = PlannerConfig(horizon=12, per_constraint_slack=per_constraint_slack)
        centers = np.stack(
            [
                np.column_stack([12.0 + 15.0 * np.arange(13) * 0.1, np.full(13, MIDDLE)]),
                np.column_stack([8.0 + 20.0 * np.arange(13) * 0.1, np.full(13, 7.0)]),
            ]
        )
        field = ObstacleField(centers, np.array([[3.0, 1.2], [3.0, 1.2]]), (3.5, 1.3))
        x0 = EgoState(0.0, MIDDLE, 22.0, 0.02)
        for _ in range(5):
            flat = rng.uniform([-6, -0.3] * 12, [3, 0.3] * 12)
            _, grad = _objective_and_gradient(flat, x0, field, config, MIDDLE)
            numeric = np.empty_like(flat)
            h = 1e-6
            for i in range(len(flat)):
                up, down = flat.copy(), flat.copy()
                up[i] += h
                down[i] -= h
                numeric[i] = (
                    _objective_and_gradient(up, x0, field, config, MIDDLE)[0]
                    - _objective_and_gradient(down, x0, field, config, MIDDLE)[0]
                ) / (2 * h)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-4)


class TestSolveMpc:
    """Test the receding-horizon optimisation."""

    def test_regulation_without_obstacles(self):
        config = PlannerConfig(horizon=10, v_ref=20.0)
        plan = solve_mpc(EgoState(0.0, MIDDLE, 20.0), ObstacleField.empty(10), config)
        assert plan.objective < 1e-6
        np.testing.assert_allclose(plan.inputs, 0.0, atol=1e-4)
        assert plan.states.shape == (11, 4)

    def test_returns_to_reference_lane(self):
        config = PlannerConfig(horizon=30, v_ref=20.0)
        plan = solve_mpc(
            EgoState(0.0, MIDDLE + 1.0, 20.0), ObstacleField.empty(30), config, y_ref=MIDDLE
        )
        assert abs(plan.states[-1, 1] - MIDDLE) < 1.0
        assert plan.history[-1] <= plan.history[0]

    def test_one_step_beats_a_grid(self):
        config = PlannerConfig(horizon=1, v_ref=25.0)
        field = _blocking_field(horizon=1, X=5.0, Y=MIDDLE + 1.0)
        x0 = EgoState(0.0, MIDDLE, 20.0, 0.0)
        plan = solve_mpc(x0, field, config, y_ref=MIDDLE)
        grid = np.inf
        for a, r in itertools.product(np.linspace(-6, 3, 21), np.linspace(-0.3, 0.3, 21)):
            inputs = np.array([[a, r]])
            grid = min(grid, mpc_cost(rollout(x0, inputs, 0.1), inputs, field, config, MIDDLE))
        assert plan.objective <= grid + 1e-3

    def test_inputs_stay_in_the_box(self):
        config = PlannerConfig(horizon=30, v_ref=40.0)
        plan = solve_mpc(EgoState(0.0, MIDDLE, 10.0), ObstacleField.empty(30), config)
        assert np.all(plan.inputs[:, 0] <= 3.0 + 1e-12)
        assert np.all(np.abs(plan.inputs[:, 1]) <= 0.3 + 1e-12)

    def test_avoids_a_blocked_lane(self):
        config = PlannerConfig(slack_weight=1e6, v_ref=15.0, max_iter=500)
        field = _blocking_field()
        plan = solve_mpc(EgoState(0.0, MIDDLE, 15.0), field, config)
        assert np.min(min_scaled_distance(plan.states[1:], field)) >= 0.95

    def test_swerves_around_a_blocked_lane_by_default(self):
        field = _blocking_field()
        plan = solve_mpc(EgoState(0.0, MIDDLE, 25.0), field, PlannerConfig())
        assert np.max(np.abs(plan.states[:, 1] - MIDDLE)) > 1.0
        # The quadratic penalty leaves a shallow intrusion at the default weight.
        assert np.min(min_scaled_distance(plan.states[1:], field)) >= 0.8

    def test_heavier_slack_weight_violates_less(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            X, offset, v = rng.uniform(15.0, 40.0), rng.uniform(-1.5, 1.5), rng.uniform(12.0, 20.0)
            field = _blocking_field(X=X, Y=MIDDLE + offset)
            x0 = EgoState(0.0, MIDDLE, v)
            light = solve_mpc(x0, field, PlannerConfig(slack_weight=10.0, v_ref=v))
            heavy = solve_mpc(x0, field, PlannerConfig(slack_weight=1e4, v_ref=v))
            assert np.max(heavy.slack[1:]) <= np.max(light.slack[1:]) + 1e-3

    def test_identical_solves_are_identical(self):
        field = _blocking_field(X=25.0, Y=MIDDLE + 0.5)
        x0 = EgoState(0.0, MIDDLE, 20.0)
        first = solve_mpc(x0, field, PlannerConfig(v_ref=20.0))
        second = solve_mpc(x0, field, PlannerConfig(v_ref=20.0))
        np.testing.assert_array_equal(first.inputs, second.inputs)
        assert first.start == second.start

    def test_states_are_the_rollout_of_the_inputs(self):
        field = _blocking_field(X=25.0, Y=MIDDLE - 0.7)
        x0 = EgoState(0.0, MIDDLE, 18.0, 0.01)
        config = PlannerConfig(v_ref=20.0)
        plan = solve_mpc(x0, field, config)
        np.testing.assert_array_equal(plan.states, rollout(x0, plan.inputs, config.dt))

    def test_escape_starts_only_when_needed(self):
        config = PlannerConfig(horizon=10, v_ref=20.0)
        plan = solve_mpc(EgoState(0.0, MIDDLE, 20.0), ObstacleField.empty(10), config)
        assert plan.start == "zero"

    def test_horizon_mismatch(self):
        with pytest.raises(ContractError):
            solve_mpc(EgoState(0.0, MIDDLE, 20.0), ObstacleField.empty(10), PlannerConfig())


class TestMpcController:
    """Test the warm-started control loop."""

    def test_applies_the_first_input(self):
        controller = MpcController(PlannerConfig(horizon=10, v_ref=22.0))
        u = controller(EgoState(0.0, MIDDLE, 20.0), ObstacleField.empty(10))
        assert u == controller.last_plan.first_input
        assert u.a > 0

    def test_second_solve_starts_warm(self):
        controller = MpcController(PlannerConfig(horizon=10, v_ref=22.0, multi_start=False))
        state = EgoState(0.0, MIDDLE, 20.0)
        controller.solve(state, ObstacleField.empty(10))
        second = controller.solve(state, ObstacleField.empty(10))
        assert second.start in ("warm", "zero")
        assert np.isfinite(second.objective)

    def test_settles_in_a_stationary_world(self):
        config = PlannerConfig(horizon=10, v_ref=20.0)
        controller = MpcController(config)
        field = ObstacleField.empty(10)
        state = EgoState(0.0, MIDDLE + 0.5, 18.0, 0.02)
        for _ in range(100):
            u = controller(state, field, MIDDLE)
            state = dubins_step(state, u, config.dt)
        assert abs(u.a) < 0.05
        assert abs(u.r) < 0.01
        assert state.v == pytest.approx(20.0, abs=0.1)
        assert state.Y == pytest.approx(MIDDLE, abs=0.05)

    def test_reset(self):
        controller = MpcController(PlannerConfig(horizon=5))
        mpc_policy(EgoState(0.0, MIDDLE, 20.0), ObstacleField.empty(5), controller)
        controller.reset()
        assert controller.last_plan is None


class TestPlanTrace:
    """Test the tabular plan output."""

    def test_columns(self):
        plan = solve_mpc(
            EgoState(0.0, MIDDLE, 20.0), ObstacleField.empty(5), PlannerConfig(horizon=5)
        )
        frame = plan_frame(plan)
        assert list(frame.columns) == ["k", "X", "Y", "v", "psi", "a", "r", "slack"]
        assert len(frame) == 6
        assert np.isnan(frame["a"].iloc[-1])

    def test_written_trace(self, tmp_path):
        plan = solve_mpc(
            EgoState(0.0, MIDDLE, 20.0), ObstacleField.empty(5), PlannerConfig(horizon=5)
        )
        path = tmp_path / "plan.csv"
        write_plan_trace(plan, path)
        frame = pd.read_csv(path)
        assert frame["k"].tolist() == list(range(6))
