"""
End-to-end tests for the stage pipeline.
"""

import json

import pandas as pd
import pytest

from calipred.config import PipelineConfig
from calipred.errors import ArtifactError, ConfigError
from calipred.integration import (
    BASIS_FILE,
    CALIBRATION_FILE,
    EVALUATION_FILE,
    MODEL_FILE,
    OUTCOMES_FILE,
    SPLIT_FILES,
    STATISTICS_CSV,
    STATISTICS_JSON,
    CalipredPipeline,
)
from calipred.parser import write_corpus
from calipred.simulator import COLLISION_CLASSES


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, tiny_config):
    """
    A complete tiny run, shared by the tests that only read its artifacts.
    """
    out = tmp_path_factory.mktemp("run")
    pipeline = CalipredPipeline(PipelineConfig.from_dict(tiny_config), out, workers=1)
    summaries = pipeline.run_all()
    return pipeline, summaries


class TestRunAll:
    """Test a full pipeline run."""

    def test_every_artifact_is_written(self, finished_run):
        pipeline, _ = finished_run
        names = [
            BASIS_FILE,
            MODEL_FILE,
            CALIBRATION_FILE,
            EVALUATION_FILE,
            OUTCOMES_FILE,
            STATISTICS_JSON,
            STATISTICS_CSV,
            *SPLIT_FILES.values(),
        ]
        for name in names:
            assert pipeline.path(name).exists(), name

    def test_summaries(self, finished_run):
        _, summaries = finished_run
        assert summaries["sparsify"]["M"] >= 1
        assert summaries["sparsify"]["max_distance"] <= 1.0
        assert summaries["label"]["train"]["n"] == 200
        assert summaries["train"]["epochs"] == 3
        assert summaries["calibrate"]["N2"] == 200
        assert summaries["simulate"]["trials"] == 2
        assert summaries["report"]["n_trials"] == 2

    def test_evaluation_document(self, finished_run):
        pipeline, _ = finished_run
        document = json.loads(pipeline.path(EVALUATION_FILE).read_text())
        assert document["method"] == "post_bloat"
        assert [row["n2"] for row in document["table"]] == [120, 200]
        assert 0.0 <= document["empirical_fnr"] <= 1.0
        assert document["n_heldout"] == 200

    def test_statistics_csv(self, finished_run):
        pipeline, _ = finished_run
        frame = pd.read_csv(pipeline.path(STATISTICS_CSV))
        assert set(frame["class"]) <= set(COLLISION_CLASSES)

    def test_predictor_reloads(self, finished_run):
        pipeline, _ = finished_run
        predictor = pipeline.load_predictor()
        assert predictor.M == pipeline.load_basis().M
        assert pipeline.load_split("heldout").M == predictor.M

    def test_same_seed_same_basis(self, finished_run, tiny_config, tmp_path):
        pipeline, _ = finished_run
        again = CalipredPipeline(PipelineConfig.from_dict(tiny_config), tmp_path)
        again.sparsify()
        assert again.path(BASIS_FILE).read_text() == pipeline.path(BASIS_FILE).read_text()

    def test_changed_config_is_refused(self, finished_run, tiny_config):
        pipeline, _ = finished_run
        changed = dict(tiny_config, seed=tiny_config["seed"] + 1)
        stale = CalipredPipeline(PipelineConfig.from_dict(changed), pipeline.out)
        with pytest.raises(ConfigError):
            stale.load_basis()
        with pytest.raises(ConfigError):
            stale.report()

    def test_downstream_change_keeps_upstream_artifacts(self, finished_run, tiny_config):
        pipeline, _ = finished_run
        changed = dict(tiny_config, simulator=dict(tiny_config["simulator"], n_trials=3))
        later = CalipredPipeline(PipelineConfig.from_dict(changed), pipeline.out)
        assert later.load_predictor().M == pipeline.load_predictor().M
        with pytest.raises(ConfigError, match="rerun 'simulate'"):
            later.load_outcomes()


class TestStages:
    """Test stages run on their own."""

    def test_missing_upstream_artifact(self, tiny_config, tmp_path):
        pipeline = CalipredPipeline(PipelineConfig.from_dict(tiny_config), tmp_path)
        with pytest.raises(ArtifactError, match="run 'sparsify' first"):
            pipeline.label()
        with pytest.raises(ArtifactError, match="run 'simulate' first"):
            pipeline.report()

    def test_conformal_calibration(self, tiny_config, tmp_path):
        data = dict(
            tiny_config,
            calibration={"method": "conformal", "epsilon": 0.1, "epsilons": [0.1, 0.2]},
        )
        pipeline = CalipredPipeline(PipelineConfig.from_dict(data), tmp_path)
        pipeline.sparsify()
        pipeline.label()
        pipeline.train()
        summary = pipeline.calibrate()
        assert summary["method"] == "conformal"
        assert summary["confidence"] is None
        pipeline.evaluate()
        document = json.loads(pipeline.path(EVALUATION_FILE).read_text())
        assert [row["epsilon"] for row in document["table"]] == [0.1, 0.2]

    def test_corpus_directory_source(self, corpus_pairs, tiny_config, tmp_path):
        corpus_dir = tmp_path / "corpus"
        write_corpus(corpus_pairs[:150], corpus_dir)
        data = dict(
            tiny_config,
            data={
                "source": str(corpus_dir),
                "n_train": 60,
                "n_calibration": 50,
                "n_heldout": 40,
            },
        )
        pipeline = CalipredPipeline(PipelineConfig.from_dict(data), tmp_path / "run")
        assert pipeline.sparsify()["corpus"] == 150
        summary = pipeline.label()
        assert [summary[name]["n"] for name in ("train", "calibration", "heldout")] == [60, 50, 40]

    def test_traces(self, tiny_config, tmp_path):
        data = dict(
            tiny_config,
            simulator=dict(tiny_config["simulator"], n_trials=1, trace=True),
        )
        pipeline = CalipredPipeline(PipelineConfig.from_dict(data), tmp_path)
        pipeline.run_all()
        traces = sorted((tmp_path / "traces").glob("*.csv"))
        assert [p.name for p in traces] == ["trial_0000.csv"]
