"""
Tests for the pipeline configuration.
"""

import json

import pytest

from calipred.config import (
    STAGE_BLOCKS,
    WORKERS_ENV,
    PipelineConfig,
    derive_seed,
    fingerprint,
    load_config,
    workers_from_env,
)
from calipred.errors import ConfigError


class TestPipelineConfig:
    """Test config parsing and validation."""

    def test_defaults(self):
        config = PipelineConfig()
        assert config.seed == 0
        assert config.geometry.T == 30
        assert config.geometry.epsilon == 1.0
        assert config.lanes.n_lanes == 3
        assert config.calibration.method == "post_bloat"
        assert config.planner.horizon * config.planner.dt == pytest.approx(3.0)

    def test_from_dict_fills_defaults(self, tiny_config):
        config = PipelineConfig.from_dict(tiny_config)
        assert config.seed == 5
        assert config.network.hidden == (8,)
        assert config.calibration.sizes == (120, 200)
        assert config.simulator.n_uncontrolled == (1, 2)
        assert config.geometry.a == 2.0

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="bogus"):
            PipelineConfig.from_dict({"bogus": {}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="Unknown keys in 'planner'"):
            PipelineConfig.from_dict({"planner": {"horizonn": 30}})

    def test_block_must_be_an_object(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"data": [1, 2]})

    @pytest.mark.parametrize(
        "data",
        [
            {"seed": -1},
            {"seed": "x"},
            {"geometry": {"epsilon": 0.0}},
            {"lanes": {"n_lanes": 0}},
            {"data": {"n_others": [4, 2]}},
            {"network": {"hidden": []}},
            {"calibration": {"method": "svm"}},
            {"calibration": {"confidence": 1.0}},
            {"simulator": {"n_trials": 0}},
            {"planner": {"horizon": 20}},
            {"simulator": {"dt": 0.2}},
        ],
    )
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(data)

    def test_with_seed(self):
        assert PipelineConfig().with_seed(7).seed == 7
        assert PipelineConfig().with_seed(None).seed == 0


class TestFingerprint:
    """Test stage fingerprints."""

    def test_stable(self):
        assert fingerprint(PipelineConfig(), "train") == fingerprint(PipelineConfig(), "train")

    def test_depends_on_the_seed(self):
        assert PipelineConfig().fingerprint("label") != PipelineConfig(seed=1).fingerprint("label")

    def test_downstream_block_does_not_touch_upstream_stages(self):
        base = PipelineConfig()
        changed = PipelineConfig.from_dict({"simulator": {"n_trials": 3}})
        assert base.fingerprint("calibrate") == changed.fingerprint("calibrate")
        assert base.fingerprint("simulate") != changed.fingerprint("simulate")

    def test_upstream_block_changes_every_downstream_stage(self):
        base = PipelineConfig()
        changed = PipelineConfig.from_dict({"geometry": {"epsilon": 0.5}})
        for stage in STAGE_BLOCKS:
            assert base.fingerprint(stage) != changed.fingerprint(stage)

    def test_stages_differ(self):
        config = PipelineConfig()
        assert config.fingerprint("calibrate") != config.fingerprint("evaluate")

    def test_unknown_stage(self):
        with pytest.raises(ConfigError):
            fingerprint(PipelineConfig(), "deploy")


class TestLoadConfig:
    """Test config files."""

    def test_no_path_gives_defaults(self):
        assert load_config(None, seed=3) == PipelineConfig(seed=3)

    def test_from_file(self, tiny_config, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(tiny_config))
        config = load_config(path)
        assert config == PipelineConfig.from_dict(tiny_config)
        assert load_config(path, seed=9).seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.json")

    def test_not_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{seed: 1")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(path)


class TestSeedsAndWorkers:
    """Test derived seeds and the worker count."""

    def test_derive_seed(self):
        assert derive_seed(0, 1) == derive_seed(0, 1)
        assert len({derive_seed(0, k) for k in range(10)}) == 10
        assert derive_seed(0, 1) != derive_seed(1, 1)

    def test_workers_default(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert workers_from_env(2) == 2

    def test_workers_from_env(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "4")
        assert workers_from_env() == 4

    @pytest.mark.parametrize("raw", ["four", "0"])
    def test_bad_workers(self, monkeypatch, raw):
        monkeypatch.setenv(WORKERS_ENV, raw)
        with pytest.raises(ConfigError):
            workers_from_env()
