"""
Trajectory basis construction for set-valued prediction.

This module represents fixed-horizon planar trajectories, measures the
distance between them with an atomic norm induced by per-timestep
uncertainty ellipses, and sparsifies a corpus of trajectories into a small
epsilon-covering basis with the greedy set-cover rule.

Trajectories are stored deviation-encoded: each sample is the offset from
the straight path the vehicle would follow at its initial speed. Absolute
positions are reconstructed at use sites from the vehicle's current state.

Example:
    >>> from calipred.basis import AtomSet, greedy_sparsify
    >>> atoms = AtomSet.constant(30, a=2.0, b=0.5)
    >>> basis = greedy_sparsify(corpus, epsilon=1.0, atoms=atoms)
    >>> index, distance = nearest_base(corpus[0], basis)
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .errors import ConfigError, ContractError, DataError

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.1
DEFAULT_T = 30


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    A fixed-horizon sampled planar path.

    Attributes:
        samples: Array of shape (T, 2) holding (x, y) in meters at times
            0, dt, ..., (T-1)*dt.
        dt: Sampling step in seconds.
        source_id: Identifier of the record the trajectory came from.
        v0: Initial speed of the vehicle in m/s.
    """

    samples: np.ndarray
    dt: float = DEFAULT_DT
    source_id: str = ""
    v0: float = 0.0

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != 2 or samples.shape[0] < 1:
            raise ContractError(
                f"Trajectory samples must have shape (T, 2), got {samples.shape}"
            )
        if not np.all(np.isfinite(samples)):
            raise DataError(f"Trajectory '{self.source_id}' has non-finite samples")
        if not self.dt > 0:
            raise ContractError(f"Sampling step must be positive, got {self.dt}")
        object.__setattr__(self, "samples", _frozen(samples))

    @property
    def T(self) -> int:
        """Number of samples."""
        return int(self.samples.shape[0])

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.T) * self.dt

    def absolute(self, X0: float, Y0: float, v0: float) -> np.ndarray:
        """
        Reconstruct absolute positions from a deviation-encoded trajectory.

        Args:
            X0: Current longitudinal position of the vehicle.
            Y0: Current lateral position of the vehicle.
            v0: Current speed used for the constant-velocity ramp.

        Returns:
            Array of shape (T, 2) with absolute (X, Y).
        """
        ramp = np.column_stack([X0 + v0 * self.times, np.full(self.T, Y0)])
        return ramp + self.samples

    def sample_at(self, times: np.ndarray) -> np.ndarray:
        """Linearly interpolate deviations at arbitrary times (clamped)."""
        times = np.asarray(times, dtype=float)
        own = self.times
        return np.column_stack(
            [
                np.interp(times, own, self.samples[:, 0]),
                np.interp(times, own, self.samples[:, 1]),
            ]
        )

    def same_as(self, other: "Trajectory") -> bool:
        return self.T == other.T and np.array_equal(self.samples, other.samples)


@dataclass(frozen=True, eq=False)
class AtomSet:
    """
    Per-timestep uncertainty ellipses defining the atomic norm.

    Attributes:
        a: Longitudinal semi-axes, shape (T,), meters.
        b: Lateral semi-axes, shape (T,), meters.
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.a, dtype=float).reshape(-1)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if a.shape != b.shape:
            raise ContractError("Atom semi-axes a and b must have equal length")
        if not (np.all(a > 0) and np.all(b > 0)):
            raise ContractError("Atom semi-axes must be strictly positive")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ContractError("Atom semi-axes must be finite")
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "b", _frozen(b))

    @classmethod
    def constant(cls, T: int, a: float = 2.0, b: float = 0.5) -> "AtomSet":
        """Atoms with the same ellipse at every timestep."""
        return cls(np.full(T, a), np.full(T, b))

    @property
    def T(self) -> int:
        return int(self.a.shape[0])

    def scales(self) -> np.ndarray:
        """Return the (T, 2) array of semi-axes."""
        return np.column_stack([self.a, self.b])


@dataclass(frozen=True, eq=False)
class TrajectoryBasis:
    """
    An epsilon-covering set of base trajectories.

    Attributes:
        bases: The M deviation-encoded base trajectories.
        epsilon: Cover radius in atomic-norm units.
        atoms: The atom set the cover radius is measured with.
        fingerprint: Config fingerprint of the stage that produced the basis.
    """

    bases: Tuple[Trajectory, ...]
    epsilon: float
    atoms: AtomSet
    fingerprint: str = ""
    _stack: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        bases = tuple(self.bases)
        if not bases:
            raise ContractError("A trajectory basis needs at least one base")
        if not self.epsilon > 0:
            raise ContractError(f"Cover radius must be positive, got {self.epsilon}")
        stack = stack_trajectories(bases)
        if stack.shape[1] != self.atoms.T:
            raise ContractError(
                f"Atom set has {self.atoms.T} steps, bases have {stack.shape[1]}"
            )
        for i in range(len(bases)):
            for j in range(i + 1, len(bases)):
                if bases[i].same_as(bases[j]):
                    raise ContractError(f"Bases {i} and {j} are identical")
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "_stack", _frozen(stack))

    @property
    def M(self) -> int:
        """Number of base trajectories."""
        return len(self.bases)

    @property
    def T(self) -> int:
        return self.bases[0].T

    @property
    def dt(self) -> float:
        return self.bases[0].dt

    @property
    def horizon(self) -> float:
        return self.T * self.dt

    def stack(self) -> np.ndarray:
        """Return all bases as a read-only array of shape (M, T, 2)."""
        return self._stack

    def straight_index(self) -> int:
        """Index of the base closest to the constant-velocity straight path."""
        zero = Trajectory(np.zeros((self.T, 2)), dt=self.dt)
        return nearest_base(zero, self)[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dt": self.dt,
            "T": self.T,
            "epsilon": self.epsilon,
            "atoms": {"a": self.atoms.a.tolist(), "b": self.atoms.b.tolist()},
            "bases": [base.samples.tolist() for base in self.bases],
            "source_ids": [base.source_id for base in self.bases],
            "v0": [base.v0 for base in self.bases],
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrajectoryBasis":
        try:
            dt = float(data["dt"])
            source_ids = data.get("source_ids") or [""] * len(data["bases"])
            speeds = data.get("v0") or [0.0] * len(data["bases"])
            bases = tuple(
                Trajectory(np.asarray(samples), dt=dt, source_id=str(sid), v0=v0)
                for samples, sid, v0 in zip(data["bases"], source_ids, speeds)
            )
            atoms = AtomSet(data["atoms"]["a"], data["atoms"]["b"])
            return cls(
                bases,
                float(data["epsilon"]),
                atoms,
                fingerprint=str(data.get("fingerprint", "")),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"Malformed basis document: {e}")


def stack_trajectories(corpus: Sequence[Trajectory]) -> np.ndarray:
    """
    Stack trajectories into one (n, T, 2) array.

    Raises:
        ContractError: If the corpus is empty or lengths differ.
    """
    if len(corpus) == 0:
        raise ContractError("Corpus must not be empty")
    T = corpus[0].T
    for i, traj in enumerate(corpus):
        if traj.T != T:
            raise ContractError(
                f"Trajectory {i} has {traj.T} samples, expected {T}"
            )
    return np.stack([traj.samples for traj in corpus])


def deviation_encode(raw: Trajectory, v0: float) -> Trajectory:
    """
    Encode a trajectory as its deviation from constant-velocity driving.

    Sample t of the result is ``raw[t] - (v0 * t * dt, 0)``.

    Args:
        raw: Trajectory in coordinates relative to its starting point.
        v0: Initial speed in m/s.

    Returns:
        The deviation-encoded trajectory carrying ``v0`` as metadata.

    Raises:
        ContractError: If v0 is negative.
        DataError: If v0 is not finite.
    """
    if not np.isfinite(v0):
        raise DataError(f"Initial speed must be finite, got {v0}")
    if v0 < 0:
        raise ContractError(f"Initial speed must be non-negative, got {v0}")
    ramp = np.column_stack([v0 * raw.times, np.zeros(raw.T)])
    return Trajectory(raw.samples - ramp, dt=raw.dt, source_id=raw.source_id, v0=v0)


def _distances_to(
    samples: np.ndarray, stack: np.ndarray, scales: np.ndarray
) -> np.ndarray:
    scaled = (stack - samples[np.newaxis]) / scales[np.newaxis]
    return np.sqrt(np.sum(scaled**2, axis=2)).max(axis=1)


def atomic_distance(p: Trajectory, q: Trajectory, atoms: AtomSet) -> float:
    """
    Atomic-norm distance between two trajectories.

    The distance is the largest ellipse-scaled deviation over timesteps:
    ``max_t sqrt(((p.x_t - q.x_t)/a_t)^2 + ((p.y_t - q.y_t)/b_t)^2)``.
    A distance below epsilon means every sample of ``q`` lies inside the
    uncertainty ellipse of ``p`` scaled by epsilon.

    Raises:
        ContractError: If the trajectories or atoms disagree in length.
    """
    if p.T != q.T:
        raise ContractError(f"Trajectory lengths differ: {p.T} vs {q.T}")
    if atoms.T != p.T:
        raise ContractError(f"Atom set has {atoms.T} steps, trajectories {p.T}")
    return float(_distances_to(p.samples, q.samples[np.newaxis], atoms.scales())[0])


def distances_to_basis(traj: Trajectory, basis: TrajectoryBasis) -> np.ndarray:
    """Distances from one trajectory to every base, shape (M,)."""
    if traj.T != basis.T:
        raise ContractError(f"Trajectory has {traj.T} samples, basis {basis.T}")
    return _distances_to(traj.samples, basis.stack(), basis.atoms.scales())


def cover_graph(
    corpus: Sequence[Trajectory],
    epsilon: float,
    atoms: AtomSet,
    chunk_size: Optional[int] = None,
) -> sparse.csr_matrix:
    """
    Build the epsilon-neighbourhood graph of a corpus.

    Node i is adjacent to node j iff ``atomic_distance(i, j) <= epsilon``;
    every node is adjacent to itself.

    Args:
        corpus: Non-empty list of equal-length trajectories.
        epsilon: Cover radius.
        atoms: Atom set defining the distance.
        chunk_size: Rows computed per block; by default sized so a block
            holds about four million scaled offsets.

    Returns:
        Symmetric boolean adjacency matrix in CSR format.
    """
    stack = stack_trajectories(corpus)
    if stack.shape[1] != atoms.T:
        raise ContractError(
            f"Atom set has {atoms.T} steps, corpus has {stack.shape[1]}"
        )
    scales = atoms.scales()
    n = stack.shape[0]
    if chunk_size is None:
        chunk_size = max(1, 4_000_000 // (n * stack.shape[1] * 2))
    blocks = []
    for start in range(0, n, chunk_size):
        rows = stack[start : start + chunk_size]
        scaled = (rows[:, np.newaxis] - stack[np.newaxis]) / scales
        dist = np.sqrt(np.sum(scaled**2, axis=3)).max(axis=2)
        adjacent = dist <= epsilon
        adjacent[np.arange(len(rows)), np.arange(start, start + len(rows))] = True
        blocks.append(sparse.csr_matrix(adjacent))
    return sparse.vstack(blocks, format="csr")


def greedy_sparsify(
    corpus: Sequence[Trajectory], epsilon: float, atoms: AtomSet
) -> TrajectoryBasis:
    """
    Sparsify a corpus into an epsilon-covering basis by greedy set cover.

    Each round picks the corpus member whose neighbourhood covers the most
    still-uncovered members; ties go to the lowest corpus index. The result
    is deterministic for a given corpus order.

    Args:
        corpus: Non-empty list of deviation-encoded trajectories.
        epsilon: Cover radius in atomic-norm units.
        atoms: Atom set defining the distance.

    Returns:
        A TrajectoryBasis whose bases are selected corpus members.
    """
    graph = cover_graph(corpus, epsilon, atoms).astype(np.int64)
    uncovered = np.ones(graph.shape[0], dtype=np.int64)
    selected: List[int] = []
    while uncovered.any():
        gains = graph.dot(uncovered)
        best = int(np.argmax(gains))
        selected.append(best)
        uncovered[graph.indices[graph.indptr[best] : graph.indptr[best + 1]]] = 0
    logger.info(
        "Greedy cover selected %d bases for %d trajectories at epsilon=%g",
        len(selected),
        len(corpus),
        epsilon,
    )
    # Duplicate trajectories are mutually adjacent, so a selected base is
    # never identical to an earlier one.
    return TrajectoryBasis(tuple(corpus[i] for i in selected), epsilon, atoms)


def nearest_base(traj: Trajectory, basis: TrajectoryBasis) -> Tuple[int, float]:
    """
    Find the base trajectory closest to ``traj``.

    Returns:
        (index, distance) with ties broken by the lowest base index.
    """
    dist = distances_to_basis(traj, basis)
    index = int(np.argmin(dist))
    return index, float(dist[index])


def coverage_report(
    corpus: Sequence[Trajectory], basis: TrajectoryBasis
) -> Dict[str, Any]:
    """
    Summarise how a corpus distributes over a basis.

    Returns:
        Dictionary with per-base member counts, class fractions and the
        largest corpus-to-basis distance.
    """
    counts = np.zeros(basis.M, dtype=int)
    worst = 0.0
    for traj in corpus:
        index, dist = nearest_base(traj, basis)
        counts[index] += 1
        worst = max(worst, dist)
    total = max(int(counts.sum()), 1)
    return {
        "counts": counts.tolist(),
        "fractions": (counts / total).tolist(),
        "max_distance": worst,
        "covered": bool(worst <= basis.epsilon),
    }


def save_basis(basis: TrajectoryBasis, path: Union[str, Path]) -> None:
    """Write a basis as JSON."""
    Path(path).write_text(json.dumps(basis.to_dict(), indent=2), encoding="utf-8")


def load_basis(
    path: Union[str, Path], expected_fingerprint: Optional[str] = None
) -> TrajectoryBasis:
    """
    Read a basis JSON document.

    Args:
        path: Location of the basis file.
        expected_fingerprint: If given, the stored fingerprint must match.

    Raises:
        FileNotFoundError: If the file does not exist.
        DataError: If the document is malformed.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Basis file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Basis file {path} is not valid JSON: {e}")
    basis = TrajectoryBasis.from_dict(data)
    if expected_fingerprint is not None and basis.fingerprint != expected_fingerprint:
        raise ConfigError(
            f"Basis {path} was produced with a different configuration "
            f"({basis.fingerprint[:12]} != {expected_fingerprint[:12]})"
        )
    return basis
