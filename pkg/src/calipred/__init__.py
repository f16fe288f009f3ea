"""
calipred: calibrated set-valued trajectory prediction for highway driving.

This library provides tools for:
- Sparsifying a trajectory corpus into an epsilon-covering basis
- Describing a driving scene by a fixed-length affordance vector
- Training a multi-label scorer over the basis
- Calibrating it by post-bloating (with a high-confidence bound on the
  false-negative rate) or by split conformal prediction
- Planning around every predicted trajectory with a soft-constrained MPC
- Running closed-loop highway trials and collecting collision statistics

Example:
    >>> from calipred import CalipredPipeline, load_config
    >>> pipeline = CalipredPipeline(load_config(), "runs/a")
    >>> summaries = pipeline.run_all()
    >>> summaries["evaluate"]["empirical_fnr"] <= summaries["evaluate"]["epsilon"]
    True

    # Lower-level building blocks
    >>> from calipred import greedy_sparsify, train, calibrate
    >>> basis = greedy_sparsify(corpus, epsilon=1.0, atoms=AtomSet.constant(30))
    >>> result = train(dataset)
    >>> predictor = calibrate(result.params, calibration_set, "post_bloat")
    >>> predictor.predict_set(extract_affordance(scene))
    (0, 3, 7)

Command Line Usage:
    $ calipred sparsify --out runs/a
    $ calipred label --out runs/a
    $ calipred train --out runs/a
    $ calipred calibrate --out runs/a --method post_bloat --confidence 0.99
    $ calipred evaluate --out runs/a
    $ calipred simulate --out runs/a
    $ calipred report --out runs/a
"""

from .affordance import (
    Affordance,
    Dataset,
    LaneGeometry,
    Scene,
    VehicleState,
    collision_check,
    dataset_build,
    extract_affordance,
    label_sample,
)
from .basis import (
    AtomSet,
    Trajectory,
    TrajectoryBasis,
    atomic_distance,
    deviation_encode,
    greedy_sparsify,
    nearest_base,
)
from .calibration import (
    CalibratedPredictor,
    calibrate,
    conformal_calibrate,
    evaluate_fnr,
    post_bloat,
    rcp_epsilon,
)
from .config import PipelineConfig, load_config
from .errors import CalipredError
from .integration import CalipredPipeline
from .parser import CorpusParser, ingest_corpus
from .planner import MpcController, PlannerConfig, dubins_step, mpc_policy, solve_mpc
from .predictor import LossConfig, NetworkParams, TrainConfig, forward, train
from .simulator import StatisticsReport, TrialConfig, aggregate, run_trial, run_trials
from .synthetic import BehaviorPolicy, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "Affordance",
    "AtomSet",
    "BehaviorPolicy",
    "CalibratedPredictor",
    "CalipredError",
    "CalipredPipeline",
    "CorpusParser",
    "Dataset",
    "LaneGeometry",
    "LossConfig",
    "MpcController",
    "NetworkParams",
    "PipelineConfig",
    "PlannerConfig",
    "Scene",
    "StatisticsReport",
    "TrainConfig",
    "Trajectory",
    "TrajectoryBasis",
    "TrialConfig",
    "VehicleState",
    "aggregate",
    "atomic_distance",
    "calibrate",
    "collision_check",
    "conformal_calibrate",
    "dataset_build",
    "deviation_encode",
    "dubins_step",
    "evaluate_fnr",
    "extract_affordance",
    "forward",
    "generate_synthetic",
    "greedy_sparsify",
    "ingest_corpus",
    "label_sample",
    "load_config",
    "mpc_policy",
    "nearest_base",
    "post_bloat",
    "rcp_epsilon",
    "run_trial",
    "run_trials",
    "solve_mpc",
    "train",
]
