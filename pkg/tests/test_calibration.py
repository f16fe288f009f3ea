"""
Tests for the binomial bound, post-bloating and conformal calibration.
"""

import logging
import math

import numpy as np
import pytest
from scipy.stats import binom

from calipred.affordance import Dataset, Flag, dataset_build
from calipred.calibration import (
    CONFORMAL,
    POST_BLOAT,
    CalibratedPredictor,
    RcpBound,
    binom_cdf,
    calibrate,
    conformal_calibrate,
    conformal_quantile,
    conformal_table,
    evaluate_fnr,
    load_calibration,
    post_bloat,
    rcp_epsilon,
    rcp_table,
    save_calibration,
)
from calipred.errors import ConfigError, ContractError, InfeasibleError
from calipred.synthetic import BehaviorPolicy, generate_synthetic

# Calibration sizes and published bounds of the post-bloating size sweep.
# The first row is stated at 99% confidence; the remaining rows match the
# same bound at 90%.
SWEEP = [
    (15946, 0.99, 0.0019),
    (23919, 0.90, 0.00103),
    (31893, 0.90, 0.00077),
    (39866, 0.90, 0.00062),
    (47839, 0.90, 0.00052),
    (55813, 0.90, 0.00044),
    (63786, 0.90, 0.00039),
]


class TestBinomCdf:
    """Test the binomial cumulative distribution."""

    def test_boundaries(self):
        assert binom_cdf(0.0, 3, 10) == 1.0
        assert binom_cdf(0.3, 10, 10) == 1.0
        assert binom_cdf(1.0, 3, 10) == 0.0

    def test_symmetric_case(self):
        assert binom_cdf(0.5, 1, 3) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("N", [10, 500, 20000])
    def test_matches_scipy(self, N):
        for epsilon in (1e-4, 0.01, 0.2, 0.7):
            for k in (0, 1, 18, N // 2, N - 1):
                if k > N:
                    continue
                assert binom_cdf(epsilon, k, N) == pytest.approx(
                    float(binom.cdf(k, N, epsilon)), abs=1e-12
                )

    def test_decreasing_in_epsilon(self):
        values = [binom_cdf(e, 18, 2000) for e in np.linspace(0.0, 0.05, 30)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("args", [(-0.1, 1, 3), (1.5, 1, 3), (0.5, 4, 3), (0.5, -1, 3)])
    def test_invalid(self, args):
        with pytest.raises(ContractError):
            binom_cdf(*args)


class TestRcpEpsilon:
    """Test the post-bloating generalisation bound."""

    @pytest.mark.parametrize("n2,confidence,expected", SWEEP)
    def test_reproduces_size_sweep(self, n2, confidence, expected):
        assert rcp_epsilon(confidence, 17, n2) == pytest.approx(expected, rel=0.05)

    def test_smallest_satisfying_epsilon(self):
        epsilon = rcp_epsilon(0.99, 17, 5000)
        assert binom_cdf(epsilon, 18, 5000) <= 0.01
        assert binom_cdf(epsilon - 1e-6, 18, 5000) > 0.01

    def test_more_data_tightens_the_bound(self):
        bounds = [rcp_epsilon(0.99, 17, n) for n in (100, 1000, 10000)]
        assert bounds == sorted(bounds, reverse=True)

    def test_higher_confidence_loosens_the_bound(self):
        assert rcp_epsilon(0.99, 17, 5000) > rcp_epsilon(0.9, 17, 5000)

    def test_too_few_samples(self):
        with pytest.raises(InfeasibleError):
            rcp_epsilon(0.99, 17, 18)

    def test_invalid_confidence(self):
        with pytest.raises(ContractError):
            rcp_epsilon(1.0, 17, 100)

    def test_bound_record(self):
        bound = RcpBound.compute(0.99, 17, 15946)
        assert bound.helly == 18
        assert bound.N2 == 15946


class TestPostBloat:
    """Test post-bloating."""

    def test_no_false_negatives_on_the_calibration_set(self, predictor, calibration_set):
        assert evaluate_fnr(predictor, calibration_set) == 0.0

    def test_sound_on_random_subsets(self, trained, calibration_set):
        rng = np.random.default_rng(0)
        for _ in range(5):
            subset = calibration_set.subset(rng.choice(len(calibration_set), 200, replace=False))
            thresholds = post_bloat(trained.params, subset).thresholds
            scores = trained.params(subset.features)
            rows = np.arange(len(subset))
            assert np.all(scores[rows, subset.positive_index()] >= thresholds[subset.positive_index()])

    def test_threshold_is_minimum_positive_score(self):
        flags = np.array([[1, 0], [1, 0], [0, 1]])
        scores = np.array([[0.9, 0.1], [0.4, 0.2], [0.3, 0.6]])
        dataset = Dataset(np.zeros((3, 21)), flags)
        result = post_bloat(lambda x: scores, dataset)
        np.testing.assert_allclose(result.thresholds, [0.4, 0.6])
        assert result.positive_counts.tolist() == [2, 1]

    def test_base_without_positives_keeps_gamma1(self, caplog):
        flags = np.array([[1, 0, 0], [1, 0, 2]])
        dataset = Dataset(np.zeros((2, 21)), flags)
        with caplog.at_level(logging.WARNING):
            result = post_bloat(lambda x: np.full((2, 3), 0.5), dataset, gamma1=0.7)
        np.testing.assert_allclose(result.thresholds, [0.5, 0.7, 0.7])
        assert "no calibration positives" in caplog.text

    def test_empty_calibration_set(self, trained):
        with pytest.raises(ContractError):
            post_bloat(trained.params, Dataset.empty(trained.params.M))

    def test_predictor_carries_the_guarantee(self, predictor, calibration_set):
        guarantee = predictor.guarantee()
        assert guarantee["N2"] == len(calibration_set)
        assert guarantee["confidence"] == 0.99
        assert guarantee["epsilon"] == pytest.approx(
            rcp_epsilon(0.99, predictor.M, len(calibration_set))
        )

    def test_predict_set_is_sorted(self, predictor, heldout_set):
        chosen = predictor.predict_set(heldout_set.features[0])
        assert list(chosen) == sorted(chosen)


class TestConformal:
    """Test split conformal calibration."""

    def test_quantile_example(self):
        assert conformal_quantile([0.3, 0.1, 0.4, 0.2], 0.25) == pytest.approx(0.4)

    def test_quantile_per_column(self):
        residuals = np.array([[0.1, 1.0], [0.2, 2.0], [0.3, 3.0], [0.4, 4.0]])
        np.testing.assert_allclose(conformal_quantile(residuals, 0.25), [0.4, 4.0])

    def test_rank_beyond_sample_size(self):
        with pytest.raises(InfeasibleError):
            conformal_quantile([0.1, 0.2, 0.3, 0.4], 0.1)

    def test_invalid_epsilon(self):
        with pytest.raises(ContractError):
            conformal_quantile([0.1], 0.0)

    def test_expected_coverage_band(self):
        n, epsilon = 2000, 0.1
        expected = math.ceil((n + 1) * (1 - epsilon)) / (n + 1)
        assert 1 - epsilon <= expected <= 1 - epsilon + 2 / (n + 2)

    @pytest.mark.slow
    def test_monte_carlo_coverage(self):
        rng = np.random.default_rng(1)
        n, epsilon = 2000, 0.1
        coverages = []
        for _ in range(100):
            d = conformal_quantile(rng.exponential(size=n), epsilon)
            coverages.append(np.mean(rng.exponential(size=10000) <= d))
        mean = float(np.mean(coverages))
        standard_error = float(np.std(coverages, ddof=1) / np.sqrt(len(coverages)))
        assert 1 - epsilon - 3 * standard_error <= mean <= 1 - epsilon + 2 / (n + 2) + 0.01

    def test_thresholds_are_one_minus_d(self, trained, calibration_set):
        conformal = conformal_calibrate(trained.params, calibration_set, 0.1)
        np.testing.assert_allclose(conformal.thresholds, 1.0 - conformal.d)
        assert conformal.d_bar == pytest.approx(float(np.dot(conformal.class_fractions, conformal.d)))

    def test_calibrated_predictor(self, trained, calibration_set):
        result = calibrate(trained.params, calibration_set, CONFORMAL, epsilon=0.1)
        assert result.method == CONFORMAL
        assert result.confidence is None
        assert result.epsilon == 0.1
        assert result.details["d_bar"] >= 0.0

    def test_d_bar_grows_as_epsilon_shrinks(self, trained, calibration_set, heldout_set):
        rows = conformal_table(trained.params, calibration_set, heldout_set, (0.01, 0.05, 0.1))
        d_bars = [row.d_bar for row in rows]
        assert d_bars == sorted(d_bars, reverse=True)
        assert all(0.0 <= row.empirical_miscoverage <= 1.0 for row in rows)


class TestEvaluation:
    """Test held-out evaluation and the sweeps."""

    def test_rcp_table(self, trained, calibration_set, heldout_set):
        rows = rcp_table(trained.params, calibration_set, heldout_set, (200, 600))
        assert [row.n2 for row in rows] == [200, 600]
        assert rows[0].epsilon > rows[1].epsilon
        assert all(0.0 <= row.empirical_fnr <= 1.0 for row in rows)

    def test_rcp_table_size_too_large(self, trained, calibration_set, heldout_set):
        with pytest.raises(InfeasibleError):
            rcp_table(trained.params, calibration_set, heldout_set, (len(calibration_set) + 1,))

    def test_evaluate_fnr_on_empty_set(self, predictor):
        with pytest.raises(ContractError):
            evaluate_fnr(predictor, Dataset.empty(predictor.M))

    def test_unknown_method(self, trained, calibration_set):
        with pytest.raises(ConfigError):
            calibrate(trained.params, calibration_set, "svm")

    def test_threshold_shape_checked(self, trained):
        with pytest.raises(ContractError):
            CalibratedPredictor(trained.params, np.zeros(1), POST_BLOAT, 0.1, 0.99, 10)

    @pytest.mark.slow
    def test_held_out_fnr_respects_the_bound(self, trained, basis):
        """Fresh calibration and held-out draws; violations stay rare."""
        violations = 0
        repeats = 20
        for r in range(repeats):
            calibration = dataset_build(
                generate_synthetic(BehaviorPolicy(), 1000, seed=1000 + r), basis, strict=False
            )
            heldout = dataset_build(
                generate_synthetic(BehaviorPolicy(), 4000, seed=2000 + r), basis, strict=False
            )
            result = calibrate(trained.params, calibration, POST_BLOAT, confidence=0.99)
            violations += int(evaluate_fnr(result, heldout) > result.epsilon)
        assert violations <= 2


class TestCalibrationArtifact:
    """Test the calibration report."""

    def test_saved_report_loads_back(self, predictor, tmp_path):
        path = tmp_path / "calibration.json"
        predictor_copy = CalibratedPredictor(
            predictor.params,
            predictor.thresholds,
            predictor.method,
            predictor.epsilon,
            predictor.confidence,
            predictor.n_calibration,
            predictor.details,
            "abc",
        )
        save_calibration(predictor_copy, path)
        loaded = load_calibration(path, predictor.params, expected_fingerprint="abc")
        np.testing.assert_array_equal(loaded.thresholds, predictor.thresholds)
        assert loaded.guarantee() == predictor.guarantee()

    def test_fingerprint_mismatch(self, predictor, tmp_path):
        path = tmp_path / "calibration.json"
        save_calibration(predictor, path)
        with pytest.raises(ConfigError):
            load_calibration(path, predictor.params, expected_fingerprint="other")

    def test_missing(self, predictor, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_calibration(tmp_path / "none.json", predictor.params)


def test_flag_codes():
    assert (int(Flag.NEG_SAFE), int(Flag.POS), int(Flag.NEG_COLLIDING)) == (0, 1, 2)
