# tests/conftest.py
from typing import List, Tuple

import pytest

from calipred.affordance import Dataset, Scene, dataset_build
from calipred.basis import DEFAULT_T, AtomSet, Trajectory, TrajectoryBasis, greedy_sparsify
from calipred.calibration import POST_BLOAT, CalibratedPredictor, calibrate
from calipred.predictor import LossConfig, TrainConfig, TrainResult, train
from calipred.synthetic import BehaviorPolicy, generate_synthetic

EPSILON = 1.0


def _labeled(basis: TrajectoryBasis, n: int, seed: int, prefix: str) -> Dataset:
    pairs = generate_synthetic(BehaviorPolicy(), n, seed=seed, prefix=prefix)
    return dataset_build(pairs, basis, strict=False)


@pytest.fixture(scope="session")
def corpus_pairs() -> List[Tuple[Scene, Trajectory]]:
    """
    A session-scoped synthetic corpus of (scene, observation) pairs.
    """
    print("\n--- Generating synthetic corpus (once per session) ---")
    return list(generate_synthetic(BehaviorPolicy(), 300, seed=11, prefix="corpus"))


@pytest.fixture(scope="session")
def corpus(corpus_pairs) -> List[Trajectory]:
    return [observed for _, observed in corpus_pairs]


@pytest.fixture(scope="session")
def basis(corpus) -> TrajectoryBasis:
    """
    A session-scoped basis sparsified from the corpus with the default atoms.
    """
    print("\n--- Sparsifying corpus (once per session) ---")
    return greedy_sparsify(corpus, EPSILON, AtomSet.constant(DEFAULT_T))


@pytest.fixture(scope="session")
def train_set(basis) -> Dataset:
    return _labeled(basis, 800, seed=12, prefix="train")


@pytest.fixture(scope="session")
def calibration_set(basis) -> Dataset:
    return _labeled(basis, 600, seed=13, prefix="calibration")


@pytest.fixture(scope="session")
def heldout_set(basis) -> Dataset:
    return _labeled(basis, 1500, seed=14, prefix="heldout")


@pytest.fixture(scope="session")
def trained(train_set) -> TrainResult:
    """
    A small scorer trained once per session; accuracy is not the point here.
    """
    print("\n--- Training scorer (once per session) ---")
    return train(
        train_set,
        (16, 16),
        LossConfig(),
        TrainConfig(learning_rate=0.05, batch_size=64, epochs=30, seed=0),
    )


@pytest.fixture(scope="session")
def predictor(trained, calibration_set) -> CalibratedPredictor:
    """A post-bloated predictor built from the session scorer."""
    return calibrate(trained.params, calibration_set, POST_BLOAT, confidence=0.99)


@pytest.fixture(scope="session")
def tiny_config() -> dict:
    """
    A pipeline config small enough to run every stage in a few seconds.
    """
    return {
        "seed": 5,
        "data": {
            "n_corpus": 120,
            "n_train": 200,
            "n_calibration": 200,
            "n_heldout": 200,
        },
        "network": {"hidden": [8]},
        "training": {"epochs": 3, "batch_size": 32},
        "calibration": {"sizes": [120, 200]},
        "planner": {"max_iter": 20, "multi_start": False},
        "simulator": {"n_trials": 2, "n_uncontrolled": [1, 2], "duration": 0.3},
    }
