"""
Integration module for the complete calipred pipeline.

This module runs the stages in order, each reading the artifacts of the
previous one from a single output directory and writing its own:

    sparsify  -> basis.json
    label     -> train.csv, calibration.csv, heldout.csv
    train     -> model.json
    calibrate -> calibration.json
    evaluate  -> evaluation.json
    simulate  -> outcomes.json (and traces/ when tracing)
    report    -> statistics.json, statistics.csv

Every artifact carries the fingerprint of the stage that wrote it, and every
stage checks the fingerprints of its inputs against the current config.
"""

import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .affordance import Dataset, Scene, dataset_build
from .basis import (
    Trajectory,
    TrajectoryBasis,
    coverage_report,
    greedy_sparsify,
    load_basis,
    save_basis,
)
from .calibration import (
    CONFORMAL,
    CalibratedPredictor,
    calibrate,
    conformal_table,
    evaluate_fnr,
    load_calibration,
    rcp_table,
    save_calibration,
)
from .config import PipelineConfig, derive_seed, load_config, workers_from_env
from .errors import ArtifactError, ConfigError, DataError
from .parser import (
    TRAJECTORIES_FILE,
    CorpusParser,
    read_dataset,
    write_dataset,
)
from .predictor import NetworkParams, load_model, save_model, train
from .simulator import (
    StatisticsReport,
    TrialOutcome,
    aggregate,
    make_trial_configs,
    run_trials,
    write_trace,
)
from .synthetic import BehaviorPolicy, iter_synthetic

logger = logging.getLogger(__name__)

BASIS_FILE = "basis.json"
SPLIT_FILES = {
    "train": "train.csv",
    "calibration": "calibration.csv",
    "heldout": "heldout.csv",
}
MODEL_FILE = "model.json"
CALIBRATION_FILE = "calibration.json"
EVALUATION_FILE = "evaluation.json"
OUTCOMES_FILE = "outcomes.json"
STATISTICS_JSON = "statistics.json"
STATISTICS_CSV = "statistics.csv"
TRACES_DIR = "traces"

# Stream keys for derive_seed; one per independent random stream.
CORPUS_STREAM = 0
SPLIT_STREAMS = {"train": 1, "calibration": 2, "heldout": 3}
TRAINING_STREAM = 4
SIMULATION_STREAM = 5

Pair = Tuple[Scene, Trajectory]


def _write_json(document: Dict[str, Any], path: Path) -> None:
    path.write_text(json.dumps(document, indent=2), encoding="utf-8")


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise DataError(f"{path} must hold a JSON object")
    return document


class CalipredPipeline:
    """
    High-level interface for the complete calipred workflow.

    Attributes:
        config: The pipeline configuration.
        out: Directory holding every artifact.
        workers: Process count for the simulation stage.

    Example:
        >>> pipeline = CalipredPipeline(load_config("pipeline.json"), "runs/a")
        >>> pipeline.sparsify()["M"]
        17
        >>> pipeline.label(); pipeline.train(); pipeline.calibrate()
    """

    def __init__(
        self,
        config: Optional[PipelineConfig] = None,
        out: Union[str, Path] = "artifacts",
        workers: Optional[int] = None,
    ) -> None:
        self.config = config or PipelineConfig()
        self.out = Path(out)
        self.workers = workers if workers is not None else workers_from_env()

    @classmethod
    def from_file(
        cls,
        path: Optional[Union[str, Path]],
        out: Union[str, Path],
        seed: Optional[int] = None,
    ) -> "CalipredPipeline":
        return cls(load_config(path, seed), out)

    def path(self, name: str) -> Path:
        return self.out / name

    def _require(self, name: str, stage: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise ArtifactError(f"Missing artifact {path}; run '{stage}' first")
        return path

    def _fingerprint(self, stage: str) -> str:
        return self.config.fingerprint(stage)

    def _policy(self) -> BehaviorPolicy:
        return BehaviorPolicy(self.config.data.maneuver_weights)

    def _synthetic(self, n: int, stream: int, prefix: str) -> Iterator[Pair]:
        cfg = self.config
        for draw in iter_synthetic(
            self._policy(),
            n,
            derive_seed(cfg.seed, stream),
            cfg.lanes.geometry(),
            cfg.geometry.T,
            cfg.geometry.dt,
            cfg.data.n_others,
            cfg.data.speed_range,
            cfg.data.gap_range,
            prefix,
        ):
            yield draw.scene, draw.observed

    def _parser(self) -> CorpusParser:
        geometry = self.config.geometry
        return CorpusParser(geometry.dt, geometry.T, self.config.lanes.geometry())

    # Stages

    def corpus(self) -> List[Trajectory]:
        """
        Trajectories to sparsify.

        Returns:
            Synthetic draws from the corpus stream, or every trajectory of
            the corpus directory named by ``data.source``.
        """
        data = self.config.data
        if data.source == "synthetic":
            pairs = self._synthetic(data.n_corpus, CORPUS_STREAM, "corpus")
            return [traj for _, traj in pairs]
        return self._parser().read_trajectories(Path(data.source) / TRAJECTORIES_FILE)

    def sparsify(self) -> Dict[str, Any]:
        """
        Build the trajectory basis and write basis.json.

        Returns:
            Summary with M, the corpus size and the largest cover distance.

        Raises:
            ContractError: If the corpus is empty.
        """
        geometry = self.config.geometry
        corpus = self.corpus()
        basis = greedy_sparsify(corpus, geometry.epsilon, geometry.atoms())
        basis = dataclasses.replace(basis, fingerprint=self._fingerprint("sparsify"))
        report = coverage_report(corpus, basis)
        self.out.mkdir(parents=True, exist_ok=True)
        save_basis(basis, self.path(BASIS_FILE))
        logger.info("Sparsified %d trajectories into %d bases", len(corpus), basis.M)
        return {
            "stage": "sparsify",
            "M": basis.M,
            "corpus": len(corpus),
            "epsilon": basis.epsilon,
            "max_distance": report["max_distance"],
            "path": str(self.path(BASIS_FILE)),
        }

    def load_basis(self) -> TrajectoryBasis:
        path = self._require(BASIS_FILE, "sparsify")
        return load_basis(path, self._fingerprint("sparsify"))

    def splits(self) -> Dict[str, List[Pair]]:
        """
        The three labeled splits as (scene, observation) pairs.

        Synthetic splits come from independent derived streams. A corpus
        directory is shuffled with a seeded permutation and cut in order
        into train, calibration and held-out parts.
        """
        data = self.config.data
        sizes = {
            "train": data.n_train,
            "calibration": data.n_calibration,
            "heldout": data.n_heldout,
        }
        if data.source == "synthetic":
            return {
                name: list(self._synthetic(n, SPLIT_STREAMS[name], name))
                for name, n in sizes.items()
            }
        pairs = self._parser().ingest_corpus(data.source)
        order = np.random.default_rng(derive_seed(self.config.seed, SPLIT_STREAMS["train"]))
        shuffled = [pairs[i] for i in order.permutation(len(pairs))]
        splits, start = {}, 0
        for name, n in sizes.items():
            splits[name] = shuffled[start : start + n]
            start += n
        if start > len(pairs):
            logger.warning(
                "Corpus has %d samples, fewer than the %d requested; later splits are short",
                len(pairs),
                start,
            )
        return splits

    def label(self) -> Dict[str, Any]:
        """
        Label train, calibration and held-out splits against the basis.

        Labeling is lenient: observations beyond epsilon are flagged with
        their nearest base and counted.
        """
        basis = self.load_basis()
        fingerprint = self._fingerprint("label")
        summary: Dict[str, Any] = {"stage": "label", "M": basis.M}
        for name, pairs in self.splits().items():
            dataset = dataset_build(pairs, basis, strict=False)
            dataset.fingerprint = fingerprint
            write_dataset(dataset, self.path(SPLIT_FILES[name]))
            summary[name] = {"n": len(dataset), "uncovered": dataset.uncovered}
        return summary

    def load_split(self, name: str) -> Dataset:
        path = self._require(SPLIT_FILES[name], "label")
        return read_dataset(path, self._fingerprint("label"))

    def train(self) -> Dict[str, Any]:
        """
        Fit the scorer on train.csv and write model.json.

        The initialisation and batch-order seed is derived from the master
        seed and ``training.seed`` together.
        """
        cfg = self.config
        dataset = self.load_split("train")
        train_config = dataclasses.replace(
            cfg.training,
            seed=derive_seed(cfg.seed, TRAINING_STREAM, cfg.training.seed),
        )
        result = train(dataset, cfg.network.hidden, cfg.loss, train_config)
        params = result.params
        params.corpus_fingerprint = dataset.fingerprint
        params.fingerprint = self._fingerprint("train")
        save_model(params, self.path(MODEL_FILE), cfg.loss)
        return {
            "stage": "train",
            "n": len(dataset),
            "sizes": list(params.sizes),
            "epochs": len(result.history),
            "final_loss": result.final_loss,
        }

    def load_model(self) -> NetworkParams:
        path = self._require(MODEL_FILE, "train")
        return load_model(path, self._fingerprint("train"))

    def calibrate(self) -> Dict[str, Any]:
        """Calibrate the model on calibration.csv and write calibration.json."""
        cfg = self.config
        params = self.load_model()
        dataset = self.load_split("calibration")
        predictor = calibrate(
            params,
            dataset,
            cfg.calibration.method,
            cfg.calibration.confidence,
            cfg.calibration.epsilon,
            cfg.loss.gamma1,
        )
        predictor.fingerprint = self._fingerprint("calibrate")
        save_calibration(predictor, self.path(CALIBRATION_FILE))
        return {"stage": "calibrate", "method": predictor.method, **predictor.guarantee()}

    def load_predictor(self) -> CalibratedPredictor:
        params = self.load_model()
        path = self._require(CALIBRATION_FILE, "calibrate")
        return load_calibration(path, params, self._fingerprint("calibrate"))

    def evaluate(self) -> Dict[str, Any]:
        """
        Held-out false-negative rate of the calibrated predictor, plus the
        size sweep (post-bloating) or miscoverage sweep (conformal).
        """
        cfg = self.config.calibration
        predictor = self.load_predictor()
        calibration = self.load_split("calibration")
        heldout = self.load_split("heldout")
        fnr = evaluate_fnr(predictor, heldout)
        if predictor.method == CONFORMAL:
            table = [
                dataclasses.asdict(row)
                for row in conformal_table(predictor.params, calibration, heldout, cfg.epsilons)
            ]
        else:
            sizes = [n for n in cfg.sizes if n <= len(calibration)] or [len(calibration)]
            table = [
                dataclasses.asdict(row)
                for row in rcp_table(
                    predictor.params,
                    calibration,
                    heldout,
                    sizes,
                    cfg.confidence,
                    self.config.loss.gamma1,
                )
            ]
        document = {
            "method": predictor.method,
            "empirical_fnr": fnr,
            "n_heldout": len(heldout),
            **predictor.guarantee(),
            "within_bound": fnr <= predictor.epsilon,
            "table": table,
            "fingerprint": self._fingerprint("evaluate"),
        }
        _write_json(document, self.path(EVALUATION_FILE))
        logger.info("Held-out FNR %.5f against epsilon %.5f", fnr, predictor.epsilon)
        return {"stage": "evaluate", "empirical_fnr": fnr, **predictor.guarantee()}

    def simulate(self) -> Dict[str, Any]:
        """Run the closed-loop trials and write outcomes.json."""
        cfg = self.config
        sim = cfg.simulator
        basis = self.load_basis()
        predictor = self.load_predictor()
        configs = make_trial_configs(
            sim.n_trials,
            sim.n_uncontrolled,
            derive_seed(cfg.seed, SIMULATION_STREAM),
            duration=sim.duration,
            dt=sim.dt,
            replan_period=sim.replan_period,
            ignore_rear=cfg.planner.ignore_rear,
            n_lanes=cfg.lanes.n_lanes,
            lane_width=cfg.lanes.lane_width,
            speed_range=sim.speed_range,
            gap_range=sim.gap_range,
            trap_radius=sim.trap_radius,
            trace=sim.trace,
        )
        outcomes = run_trials(configs, predictor, basis, cfg.planner, self.workers)
        if sim.trace:
            traces = self.path(TRACES_DIR)
            traces.mkdir(parents=True, exist_ok=True)
            for i, outcome in enumerate(outcomes):
                write_trace(outcome, traces / f"trial_{i:04d}.csv")
        _write_json(
            {
                "fingerprint": self._fingerprint("simulate"),
                "outcomes": [o.to_dict() for o in outcomes],
            },
            self.path(OUTCOMES_FILE),
        )
        events = sum(len(o.ego_events) for o in outcomes)
        return {
            "stage": "simulate",
            "trials": len(outcomes),
            "ego_collisions": events,
            "incomplete": sum(not o.completed for o in outcomes),
        }

    def load_outcomes(self) -> List[TrialOutcome]:
        path = self._require(OUTCOMES_FILE, "simulate")
        document = _read_json(path)
        if document.get("fingerprint") != self._fingerprint("simulate"):
            raise ConfigError(
                f"{path} was produced with a different configuration; rerun 'simulate'"
            )
        return [TrialOutcome.from_dict(o) for o in document.get("outcomes", [])]

    def report(self) -> StatisticsReport:
        """Aggregate outcomes.json into statistics.json and statistics.csv."""
        report = aggregate(self.load_outcomes())
        report.fingerprint = self._fingerprint("simulate")
        self.path(STATISTICS_JSON).write_text(report.to_json(), encoding="utf-8")
        report.to_csv(self.path(STATISTICS_CSV))
        return report

    def run_all(self) -> Dict[str, Dict[str, Any]]:
        """Every stage in order; the report is returned as a dict."""
        summaries = {
            "sparsify": self.sparsify(),
            "label": self.label(),
            "train": self.train(),
            "calibrate": self.calibrate(),
            "evaluate": self.evaluate(),
            "simulate": self.simulate(),
        }
        summaries["report"] = self.report().to_dict()
        return summaries
