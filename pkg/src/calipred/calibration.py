"""
Calibration of the trained scorer into a set predictor with a bounded
false-negative rate.

Two methods are provided:

- ``post_bloat``: lower each per-base threshold to the smallest score any
  calibration positive of that base received. The probability that a fresh
  sample's true base is excluded is then at most the RCP bound
  ``rcp_epsilon(confidence, M, N2)`` with the given confidence.
- ``conformal``: split conformal regression per output coordinate on the
  residuals ``|1{POS} - score|``. A base is kept iff ``1`` lies inside the
  interval ``[score - d, score + d]``, i.e. ``score >= 1 - d``.

Both produce a :class:`CalibratedPredictor` that carries the network, the
thresholds and the certified ``(epsilon, confidence, N2)`` triple.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln

from .affordance import Dataset, Flag
from .errors import ConfigError, ContractError, DataError, InfeasibleError
from .predictor import NetworkParams

logger = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray], np.ndarray]

POST_BLOAT = "post_bloat"
CONFORMAL = "conformal"
METHODS = (POST_BLOAT, CONFORMAL)


def binom_cdf(epsilon: float, k: int, N: int) -> float:
    """
    Binomial cumulative distribution ``P[Bin(N, epsilon) <= k]``.

    Terms are evaluated in log space from log-gamma binomial coefficients and
    summed smallest-first with exact floating-point summation.

    Raises:
        ContractError: If epsilon is outside [0, 1] or k outside [0, N].
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must be in [0, 1], got {epsilon}")
    if int(k) != k or int(N) != N or not 0 <= k <= N:
        raise ContractError(f"Need integers 0 <= k <= N, got k={k}, N={N}")
    k, N = int(k), int(N)
    if k == N or epsilon == 0.0:
        return 1.0
    if epsilon == 1.0:
        return 0.0
    j = np.arange(k + 1, dtype=float)
    log_terms = (
        gammaln(N + 1)
        - gammaln(j + 1)
        - gammaln(N - j + 1)
        + j * math.log(epsilon)
        + (N - j) * math.log1p(-epsilon)
    )
    total = math.fsum(np.sort(np.exp(log_terms)))
    return min(1.0, max(0.0, total))


def rcp_epsilon(confidence: float, M: int, N2: int) -> float:
    """
    Smallest epsilon with ``binom_cdf(epsilon, M + 1, N2) <= 1 - confidence``.

    The returned value satisfies the bound and moving 1e-6 to the left
    violates it.

    Args:
        confidence: Desired confidence, strictly between 0 and 1.
        M: Number of bases (the Helly dimension is M + 1).
        N2: Calibration set size.

    Raises:
        ContractError: If confidence is not in (0, 1) or M < 1.
        InfeasibleError: If N2 <= M + 1.
    """
    if not 0.0 < confidence < 1.0:
        raise ContractError(f"confidence must be in (0, 1), got {confidence}")
    if M < 1:
        raise ContractError(f"M must be positive, got {M}")
    helly = M + 1
    if N2 <= helly:
        raise InfeasibleError(
            f"Calibration size N2={N2} must exceed the Helly dimension {helly}"
        )
    delta = 1.0 - confidence
    root = brentq(
        lambda e: binom_cdf(e, helly, N2) - delta, 0.0, 1.0, xtol=1e-13, rtol=1e-12
    )
    epsilon = min(1.0, root + 2e-10)
    while binom_cdf(epsilon, helly, N2) > delta:
        epsilon = min(1.0, epsilon + 1e-9)
    return epsilon


@dataclass(frozen=True)
class RcpBound:
    """The certified triple of the post-bloating guarantee."""

    epsilon: float
    confidence: float
    N2: int
    helly: int

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ContractError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.N2 < self.helly:
            raise ContractError(f"N2={self.N2} is below helly={self.helly}")

    @classmethod
    def compute(cls, confidence: float, M: int, N2: int) -> "RcpBound":
        return cls(rcp_epsilon(confidence, M, N2), confidence, N2, M + 1)


@dataclass(frozen=True)
class PostBloatThresholds:
    """
    Attributes:
        thresholds: c*, one per base.
        positive_counts: Calibration positives per base.
    """

    thresholds: np.ndarray
    positive_counts: np.ndarray


def _scores(scorer: Scorer, dataset: Dataset) -> np.ndarray:
    scores = np.asarray(scorer(dataset.features), dtype=float).reshape(len(dataset), -1)
    if scores.shape[1] != dataset.M:
        raise ContractError(
            f"Scorer returns {scores.shape[1]} outputs, dataset has {dataset.M} bases"
        )
    return scores


def post_bloat(
    scorer: Scorer, calibration: Dataset, gamma1: float = 0.7
) -> PostBloatThresholds:
    """
    Per-base thresholds from the minimum positive score on the calibration set.

    Bases without any positive sample keep ``gamma1``; a warning lists them.

    Raises:
        ContractError: If the calibration set is empty.
    """
    if len(calibration) == 0:
        raise ContractError("Post-bloating needs a non-empty calibration set")
    scores = _scores(scorer, calibration)
    positive = calibration.flags == Flag.POS
    counts = positive.sum(axis=0)
    masked = np.where(positive, scores, np.inf)
    thresholds = np.where(counts > 0, masked.min(axis=0), gamma1)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        logger.warning(
            "%d bases have no calibration positives, threshold set to %g: %s",
            len(empty),
            gamma1,
            empty.tolist(),
        )
    return PostBloatThresholds(thresholds, counts)


def conformal_quantile(residuals: Any, epsilon: float) -> Union[float, np.ndarray]:
    """
    Split conformal radius: the ceil((n + 1)(1 - epsilon))-th smallest residual.

    Args:
        residuals: Shape (n,) or (n, M); the quantile is taken per column.
        epsilon: Miscoverage level in (0, 1).

    Raises:
        ContractError: If epsilon is outside (0, 1) or there are no residuals.
        InfeasibleError: If the rank exceeds n.
    """
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"epsilon must be in (0, 1), got {epsilon}")
    r = np.asarray(residuals, dtype=float)
    n = r.shape[0]
    if n == 0:
        raise ContractError("Conformal calibration needs at least one residual")
    rank = math.ceil((n + 1) * (1.0 - epsilon) - 1e-9)
    if rank > n:
        raise InfeasibleError(
            f"epsilon={epsilon} needs rank {rank} but only {n} calibration residuals"
        )
    ordered = np.sort(r, axis=0)
    d = ordered[max(rank, 1) - 1]
    return float(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True)
class ConformalCalibration:
    """
    Attributes:
        d: Confidence range per base.
        epsilon: Miscoverage level.
        n: Calibration size.
        class_fractions: p_i, share of calibration samples whose POS is i.
        d_bar: Sum of p_i * d_i.
    """

    d: np.ndarray
    epsilon: float
    n: int
    class_fractions: np.ndarray
    d_bar: float

    @property
    def thresholds(self) -> np.ndarray:
        return 1.0 - self.d


def conformal_calibrate(
    scorer: Scorer, calibration: Dataset, epsilon: float
) -> ConformalCalibration:
    """
    Split conformal calibration per base coordinate.

    Targets are the POS indicators; residuals are ``|Y - f(X)|``.
    """
    if len(calibration) == 0:
        raise ContractError("Conformal calibration needs a non-empty calibration set")
    scores = _scores(scorer, calibration)
    targets = (calibration.flags == Flag.POS).astype(float)
    d = np.asarray(conformal_quantile(np.abs(targets - scores), epsilon))
    fractions = calibration.positive_counts() / len(calibration)
    return ConformalCalibration(
        d, epsilon, len(calibration), fractions, float(np.dot(fractions, d))
    )


@dataclass
class CalibratedPredictor:
    """
    A scorer with thresholds and the guarantee they certify.

    Attributes:
        params: Network weights.
        thresholds: Per-base thresholds c.
        method: ``post_bloat`` or ``conformal``.
        epsilon: Certified miscoverage bound.
        confidence: Confidence of the bound (None for conformal).
        n_calibration: Calibration set size N2.
        details: Method-specific values (counts, d, d_bar).
        fingerprint: Config fingerprint of the calibration stage.
    """

    params: NetworkParams
    thresholds: np.ndarray
    method: str
    epsilon: float
    confidence: Optional[float]
    n_calibration: int
    details: Dict[str, Any] = field(default_factory=dict)
    fingerprint: str = ""

    def __post_init__(self) -> None:
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        if self.method not in METHODS:
            raise ConfigError(f"Unknown calibration method '{self.method}'")
        if self.thresholds.shape != (self.params.M,):
            raise ContractError(
                f"Expected {self.params.M} thresholds, got {self.thresholds.shape}"
            )

    @property
    def M(self) -> int:
        return self.params.M

    def scores(self, features: Any) -> np.ndarray:
        return self.params(features)

    def predict_mask(self, features: Any) -> np.ndarray:
        return self.params(features) >= self.thresholds

    def predict_set(self, affordance: Any) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.predict_mask(affordance)))

    def guarantee(self) -> Dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "confidence": self.confidence,
            "N2": self.n_calibration,
        }


def calibrate(
    params: NetworkParams,
    calibration: Dataset,
    method: str = POST_BLOAT,
    confidence: float = 0.99,
    epsilon: float = 0.05,
    gamma1: float = 0.7,
) -> CalibratedPredictor:
    """
    Calibrate ``params`` on a held-aside set with either method.

    For ``post_bloat`` the certified epsilon comes from :func:`rcp_epsilon`;
    for ``conformal`` the requested ``epsilon`` is certified in expectation.
    """
    if method == POST_BLOAT:
        bloat = post_bloat(params, calibration, gamma1)
        bound = RcpBound.compute(confidence, params.M, len(calibration))
        logger.info(
            "Post-bloated on N2=%d: FNR <= %.5f with confidence %g",
            bound.N2,
            bound.epsilon,
            confidence,
        )
        return CalibratedPredictor(
            params,
            bloat.thresholds,
            POST_BLOAT,
            bound.epsilon,
            confidence,
            bound.N2,
            {"positive_counts": bloat.positive_counts.tolist(), "helly": bound.helly},
        )
    if method == CONFORMAL:
        conformal = conformal_calibrate(params, calibration, epsilon)
        logger.info(
            "Conformal calibration on n=%d at epsilon=%g: d_bar=%.4f",
            conformal.n,
            epsilon,
            conformal.d_bar,
        )
        return CalibratedPredictor(
            params,
            conformal.thresholds,
            CONFORMAL,
            epsilon,
            None,
            conformal.n,
            {
                "d": conformal.d.tolist(),
                "d_bar": conformal.d_bar,
                "class_fractions": conformal.class_fractions.tolist(),
            },
        )
    raise ConfigError(f"Unknown calibration method '{method}', use one of {METHODS}")


def _mask_fnr(mask: np.ndarray, dataset: Dataset) -> float:
    rows = np.arange(len(dataset))
    return float(np.mean(~mask[rows, dataset.positive_index()]))


def evaluate_fnr(predictor: CalibratedPredictor, heldout: Dataset) -> float:
    """
    Fraction of held-out samples whose POS base is not predicted.

    Raises:
        ContractError: If the held-out set is empty.
    """
    if len(heldout) == 0:
        raise ContractError("Cannot evaluate on an empty held-out set")
    return _mask_fnr(predictor.predict_mask(heldout.features), heldout)


@dataclass(frozen=True)
class RcpRow:
    n2: int
    epsilon: float
    empirical_fnr: float


@dataclass(frozen=True)
class ConformalRow:
    epsilon: float
    d_bar: float
    empirical_fnr: float
    empirical_miscoverage: float


def rcp_table(
    scorer: Scorer,
    calibration: Dataset,
    heldout: Dataset,
    sizes: Sequence[int],
    confidence: float = 0.99,
    gamma1: float = 0.7,
) -> List[RcpRow]:
    """
    Post-bloating size sweep.

    Each row post-bloats on the first ``n2`` calibration samples and reports
    the RCP bound next to the held-out false-negative rate.
    """
    held_scores = _scores(scorer, heldout)
    rows = []
    for n2 in sizes:
        if n2 > len(calibration):
            raise InfeasibleError(
                f"Requested N2={n2} but only {len(calibration)} calibration samples"
            )
        bloat = post_bloat(scorer, calibration.subset(np.arange(n2)), gamma1)
        fnr = _mask_fnr(held_scores >= bloat.thresholds, heldout)
        rows.append(RcpRow(int(n2), rcp_epsilon(confidence, calibration.M, n2), fnr))
    return rows


def conformal_table(
    scorer: Scorer,
    calibration: Dataset,
    heldout: Dataset,
    epsilons: Sequence[float],
) -> List[ConformalRow]:
    """
    Conformal miscoverage sweep.

    ``empirical_fnr`` counts held-out samples whose POS base falls outside its
    interval; ``empirical_miscoverage`` counts residuals above d over every
    coordinate, the quantity the conformal guarantee is about.
    """
    held_scores = _scores(scorer, heldout)
    targets = (heldout.flags == Flag.POS).astype(float)
    rows = []
    for epsilon in epsilons:
        conformal = conformal_calibrate(scorer, calibration, epsilon)
        fnr = _mask_fnr(held_scores >= conformal.thresholds, heldout)
        miscoverage = float(np.mean(np.abs(targets - held_scores) > conformal.d))
        rows.append(ConformalRow(float(epsilon), conformal.d_bar, fnr, miscoverage))
    return rows


def save_calibration(
    predictor: CalibratedPredictor,
    path: Union[str, Path],
    table: Optional[List[Dict[str, Any]]] = None,
) -> None:
    """Write the calibration report JSON."""
    document = {
        "method": predictor.method,
        "thresholds": predictor.thresholds.tolist(),
        "epsilon": predictor.epsilon,
        "confidence": predictor.confidence,
        "N2": predictor.n_calibration,
        "details": predictor.details,
        "model_fingerprint": predictor.params.fingerprint,
        "fingerprint": predictor.fingerprint,
        "table": table or [],
    }
    Path(path).write_text(json.dumps(document, indent=2), encoding="utf-8")


def load_calibration(
    path: Union[str, Path],
    params: NetworkParams,
    expected_fingerprint: Optional[str] = None,
) -> CalibratedPredictor:
    """
    Rebuild a CalibratedPredictor from its report and the model it calibrated.

    Raises:
        FileNotFoundError: If the report does not exist.
        DataError: If the report is malformed.
        ConfigError: On fingerprint mismatch.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Calibration report not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
        predictor = CalibratedPredictor(
            params,
            np.asarray(document["thresholds"], dtype=float),
            document["method"],
            float(document["epsilon"]),
            document.get("confidence"),
            int(document["N2"]),
            document.get("details", {}),
            document.get("fingerprint", ""),
        )
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"Malformed calibration report {path}: {e}") from e
    if expected_fingerprint is not None and predictor.fingerprint != expected_fingerprint:
        raise ConfigError(
            f"Calibration report {path} does not match the current config; "
            "rerun 'calibrate'"
        )
    if document.get("model_fingerprint", params.fingerprint) != params.fingerprint:
        raise ConfigError(f"Calibration report {path} was made for a different model")
    return predictor
