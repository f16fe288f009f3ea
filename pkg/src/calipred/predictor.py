"""
Feedforward scorer mapping an affordance vector to per-base scores.

The network has two ReLU hidden layers and a logistic-sigmoid output layer,
one output per base trajectory. Inputs are standardised with the training
split's mean and standard deviation, which are stored with the weights so a
saved model is self-contained.

Example:
    >>> result = train(dataset, (64, 64), LossConfig(), TrainConfig(seed=1))
    >>> scores = forward(result.params, extract_affordance(scene))
    >>> candidates = predict_set(result.params, thresholds, extract_affordance(scene))
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .affordance import N_FEATURES, Dataset, Flag
from .errors import ConfigError, ContractError, DataError, TrainingError

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 64)
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """
    Margins and weights of the three-flag hinge loss.

    Positive scores are pushed above ``gamma1``; negative scores below
    ``gamma2``. Negatives that would collide are weighted by ``w0bar``.
    """

    gamma1: float = 0.7
    gamma2: float = 0.3
    w1: float = 1.0
    w0: float = 1.0
    w0bar: float = 5.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.gamma2 < self.gamma1 <= 1.0):
            raise ConfigError(
                f"Need 0 <= gamma2 < gamma1 <= 1, got gamma1={self.gamma1}, "
                f"gamma2={self.gamma2}"
            )
        if min(self.w1, self.w0, self.w0bar) <= 0:
            raise ConfigError("Loss weights must be positive")
        if self.w0bar < self.w0:
            raise ConfigError(f"w0bar ({self.w0bar}) must be >= w0 ({self.w0})")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """
    Mini-batch gradient descent settings.

    Attributes:
        learning_rate: Fixed step size.
        batch_size: Samples per step (the last batch of an epoch may be short).
        epochs: Number of passes over the data.
        seed: Seeds initialisation and shuffling.
        l2: Coefficient of 0.5 * l2 * ||W||^2 over weight matrices.
    """

    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("learning_rate, batch_size and epochs must be positive")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be non-negative, got {self.l2}")


@dataclass
class NetworkParams:
    """
    Weights of the scorer.

    Attributes:
        weights: One (fan_in, fan_out) matrix per layer.
        biases: One (fan_out,) vector per layer.
        mean: Per-feature input mean used for standardisation.
        scale: Per-feature input scale (floored standard deviation).
        seed: Training seed, if the params came from :func:`train`.
        corpus_fingerprint: Fingerprint of the dataset the model was fit on.
        fingerprint: Config fingerprint of the producing stage.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    scale: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    seed: Optional[int] = None
    corpus_fingerprint: str = ""
    fingerprint: str = ""

    def __post_init__(self) -> None:
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if not self.weights or len(self.weights) != len(self.biases):
            raise ContractError("Need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractError(f"Layer {i} has shapes {w.shape} and {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ContractError(f"Layer {i} input does not match layer {i - 1}")
        if self.mean.shape != (self.sizes[0],) or self.scale.shape != self.mean.shape:
            raise ContractError("Standardisation vectors must match the input size")
        if np.any(self.scale <= 0):
            raise ContractError("Standardisation scale must be positive")
        arrays = self.weights + self.biases + [self.mean, self.scale]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise DataError("Network parameters must be finite")

    @property
    def sizes(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def M(self) -> int:
        return self.sizes[-1]

    def __call__(self, features: Any) -> np.ndarray:
        return forward(self, features)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.mean.copy(),
            self.scale.copy(),
            self.seed,
            self.corpus_fingerprint,
            self.fingerprint,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sizes": list(self.sizes),
            "activation": {"hidden": "relu", "output": "sigmoid"},
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "seed": self.seed,
            "corpus_fingerprint": self.corpus_fingerprint,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkParams":
        try:
            sizes = [int(s) for s in data["sizes"]]
            weights = [
                np.asarray(flat, dtype=float).reshape(sizes[i], sizes[i + 1])
                for i, flat in enumerate(data["weights"])
            ]
            return cls(
                weights,
                [np.asarray(b, dtype=float) for b in data["biases"]],
                np.asarray(data.get("mean", np.zeros(sizes[0])), dtype=float),
                np.asarray(data.get("scale", np.ones(sizes[0])), dtype=float),
                data.get("seed"),
                data.get("corpus_fingerprint", ""),
                data.get("fingerprint", ""),
            )
        except (KeyError, IndexError, TypeError, ValueError) as e:
            if isinstance(e, (ContractError, DataError)):
                raise
            raise DataError(f"Malformed model document: {e}") from e


class Gradients(NamedTuple):
    """Per-layer gradients, shaped like ``NetworkParams.weights/biases``."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]


@dataclass
class TrainResult:
    """Outcome of :func:`train`."""

    params: NetworkParams
    history: List[float]
    final_loss: float
    loss_config: LossConfig
    train_config: TrainConfig


def init_params(sizes: Sequence[int], seed: int = 0) -> NetworkParams:
    """
    Glorot-uniform weights and zero biases.

    Args:
        sizes: Layer widths, e.g. (21, 64, 64, M).
        seed: Seed for the weight draw.
    """
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ContractError(f"Invalid layer sizes {tuple(sizes)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(
        weights, biases, np.zeros(sizes[0]), np.ones(sizes[0]), seed=seed
    )


def _as_batch(params: NetworkParams, features: Any) -> Tuple[np.ndarray, bool]:
    x = np.asarray(features, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != params.sizes[0]:
        raise ContractError(
            f"Expected input dimension {params.sizes[0]}, got shape {np.shape(features)}"
        )
    return x, single


def _activations(
    params: NetworkParams, x: np.ndarray
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Layer outputs (input first) and pre-activations for a batch."""
    outputs = [(x - params.mean) / params.scale]
    pre = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = outputs[-1] @ w + b
        pre.append(z)
        outputs.append(expit(z) if i == last else np.maximum(z, 0.0))
    return outputs, pre


def forward(params: NetworkParams, features: Any) -> np.ndarray:
    """
    Score each base for one affordance vector or a batch of them.

    Args:
        params: Network weights.
        features: Shape (21,) or (n, 21); an Affordance is accepted.

    Returns:
        Scores in (0, 1), shape (M,) or (n, M).

    Raises:
        ContractError: If the input dimension is wrong.
    """
    x, single = _as_batch(params, features)
    y = _activations(params, x)[0][-1]
    return y[0] if single else y


def _loss_slopes(
    y: np.ndarray, flags: np.ndarray, cfg: LossConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise hinge terms and their derivatives with respect to y."""
    pos = flags == Flag.POS
    neg_weight = np.where(flags == Flag.NEG_COLLIDING, cfg.w0bar, cfg.w0)
    pos_gap = cfg.gamma1 - y
    neg_gap = y - cfg.gamma2
    terms = np.where(
        pos, cfg.w1 * np.maximum(pos_gap, 0.0), neg_weight * np.maximum(neg_gap, 0.0)
    )
    slopes = np.where(
        pos,
        np.where(pos_gap > 0, -cfg.w1, 0.0),
        np.where(neg_gap > 0, neg_weight, 0.0),
    )
    return terms, slopes


def loss(y: Any, flags: Any, cfg: LossConfig) -> float:
    """
    Weighted three-flag hinge loss.

    For one sample, J = sum over outputs of w1*[POS]*max(0, gamma1 - y_i)
    + w0*[NEG_SAFE]*max(0, y_i - gamma2) + w0bar*[NEG_COLLIDING]*max(0, y_i - gamma2).
    A batch of shape (n, M) returns the mean of the per-sample sums.
    """
    y = np.asarray(y, dtype=float)
    flags = np.asarray(flags)
    if y.shape != flags.shape:
        raise ContractError(f"Scores {y.shape} and flags {flags.shape} differ in shape")
    terms, _ = _loss_slopes(y, flags, cfg)
    if terms.ndim == 1:
        return float(terms.sum())
    return float(terms.sum(axis=1).mean())


def objective(
    params: NetworkParams,
    features: np.ndarray,
    flags: np.ndarray,
    cfg: LossConfig,
    l2: float = 0.0,
) -> float:
    """Mean batch loss plus the optional L2 penalty."""
    value = loss(forward(params, np.atleast_2d(features)), np.atleast_2d(flags), cfg)
    if l2:
        value += 0.5 * l2 * sum(float(np.sum(w * w)) for w in params.weights)
    return value


def grad(
    params: NetworkParams,
    features: np.ndarray,
    flags: np.ndarray,
    cfg: LossConfig,
    l2: float = 0.0,
) -> Gradients:
    """
    Exact gradient of :func:`objective` by backpropagation.

    Subgradient 0 is taken at ReLU and hinge kinks.

    Raises:
        ContractError: If the batch is empty.
    """
    x, _ = _as_batch(params, features)
    flags = np.atleast_2d(np.asarray(flags))
    if len(x) == 0:
        raise ContractError("Gradient needs a non-empty batch")
    outputs, pre = _activations(params, x)
    y = outputs[-1]
    _, slopes = _loss_slopes(y, flags, cfg)
    delta = slopes * y * (1.0 - y) / len(x)

    dW: List[np.ndarray] = [np.empty(0)] * len(params.weights)
    db: List[np.ndarray] = [np.empty(0)] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        dW[i] = outputs[i].T @ delta + l2 * params.weights[i]
        db[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i].T) * (pre[i - 1] > 0)
    return Gradients(dW, db)


def _standardisation(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    scale = np.maximum(features.std(axis=0), STD_FLOOR)
    return mean, scale


def train(
    dataset: Dataset,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    loss_config: Optional[LossConfig] = None,
    train_config: Optional[TrainConfig] = None,
) -> TrainResult:
    """
    Fit the scorer by plain mini-batch gradient descent.

    Training is deterministic given ``train_config.seed``: the same seed
    draws the same initial weights and the same batch order.

    Args:
        dataset: Labeled samples (features n x 21, flags n x M).
        hidden: Hidden layer widths.
        loss_config: Loss margins and weights.
        train_config: Optimiser settings.

    Returns:
        TrainResult with the fitted params and per-epoch full-data loss.

    Raises:
        ContractError: If the dataset is empty.
        TrainingError: If the loss becomes non-finite.
    """
    loss_config = loss_config or LossConfig()
    train_config = train_config or TrainConfig()
    n = len(dataset)
    if n == 0:
        raise ContractError("Cannot train on an empty dataset")

    sizes = (N_FEATURES, *[int(h) for h in hidden], dataset.M)
    params = init_params(sizes, train_config.seed)
    params.mean, params.scale = _standardisation(dataset.features)
    rng = np.random.default_rng([train_config.seed, 1])

    logger.info(
        "Training %s network on %d samples for %d epochs",
        "x".join(str(s) for s in sizes),
        n,
        train_config.epochs,
    )
    history: List[float] = []
    lr, l2 = train_config.learning_rate, train_config.l2
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            g = grad(params, dataset.features[batch], dataset.flags[batch], loss_config, l2)
            for i in range(len(params.weights)):
                params.weights[i] -= lr * g.weights[i]
                params.biases[i] -= lr * g.biases[i]
        value = objective(params, dataset.features, dataset.flags, loss_config, l2)
        if not np.isfinite(value):
            raise TrainingError(f"Loss became non-finite at epoch {epoch}", epoch)
        history.append(value)
        logger.debug("epoch %d loss %.6f", epoch, value)
        if value == 0.0:
            logger.info("All margins satisfied after %d epochs", epoch + 1)
            break

    final = history[-1]
    logger.info("Training finished with loss %.6f", final)
    return TrainResult(params, history, final, loss_config, train_config)


def predict_mask(params: NetworkParams, thresholds: Any, features: Any) -> np.ndarray:
    """Boolean membership ``y_i >= c_i`` for one input or a batch."""
    c = np.asarray(thresholds, dtype=float)
    if c.shape != (params.M,):
        raise ContractError(f"Expected {params.M} thresholds, got shape {c.shape}")
    return forward(params, features) >= c


def predict_set(
    params: NetworkParams, thresholds: Any, affordance: Any
) -> Tuple[int, ...]:
    """
    Indices of bases deemed possible, ascending.

    The set may be empty; callers decide how to handle that.
    """
    return tuple(int(i) for i in np.flatnonzero(predict_mask(params, thresholds, affordance)))


def save_model(
    params: NetworkParams,
    path: Union[str, Path],
    loss_config: Optional[LossConfig] = None,
) -> None:
    """Write the model JSON document."""
    document = params.to_dict()
    if loss_config is not None:
        document["loss"] = loss_config.to_dict()
    Path(path).write_text(json.dumps(document, indent=2), encoding="utf-8")


def load_model(
    path: Union[str, Path], expected_fingerprint: Optional[str] = None
) -> NetworkParams:
    """
    Read a model JSON document.

    Raises:
        FileNotFoundError: If the file does not exist.
        DataError: If the document is malformed.
        ConfigError: If the embedded fingerprint differs from the expected one.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Model file {path} is not valid JSON: {e}") from e
    params = NetworkParams.from_dict(document)
    if expected_fingerprint is not None and params.fingerprint != expected_fingerprint:
        raise ConfigError(
            f"Model {path} was produced with config fingerprint "
            f"{params.fingerprint[:12]}, current config expects "
            f"{expected_fingerprint[:12]}; rerun 'train'"
        )
    return params


def load_loss_config(path: Union[str, Path]) -> LossConfig:
    """Loss settings stored next to the weights, defaults if absent."""
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    return LossConfig(**document.get("loss", {}))
