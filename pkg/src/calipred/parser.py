"""
CSV ingestion and writing for trajectory corpora, scenes and datasets.

A corpus directory holds two files:

- ``trajectories.csv`` with header ``traj_id,step,x,y,v0``: one row per
  sample, steps 0..T-1 per trajectory, positions in metres. Each trajectory
  is re-anchored so its first sample is the origin, then deviation-encoded
  with its ``v0``.
- ``scenes.csv`` with header ``sample_id,role,id,X,Y,v,psi,length,width``:
  one row per vehicle, ``role`` is ``ego`` for exactly one row per sample
  and ``other`` otherwise. ``sample_id`` matches ``traj_id`` of the ego's
  observed trajectory.

A trajectories file on its own is enough for sparsification.

Example:
    >>> from calipred.parser import CorpusParser
    >>> parser = CorpusParser(dt=0.1)
    >>> pairs = parser.ingest_corpus("data/corpus")
    >>> scene, observed = pairs[0]
"""

import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .affordance import AFFORDANCE_FIELDS, Dataset, LaneGeometry, Scene, VehicleState
from .basis import DEFAULT_DT, Trajectory, deviation_encode
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("traj_id", "step", "x", "y", "v0")
SCENE_COLUMNS = ("sample_id", "role", "id", "X", "Y", "v", "psi", "length", "width")
TRAJECTORIES_FILE = "trajectories.csv"
SCENES_FILE = "scenes.csv"
FINGERPRINT_PREFIX = "# fingerprint:"

Pair = Tuple[Scene, Trajectory]


def _check_path(path: Union[str, Path]) -> Path:
    if path is None or str(path).strip() == "":
        raise DataError("File path cannot be empty")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return path


def _to_float(cell: str) -> float:
    # float() inverts repr() exactly; pd.to_numeric may differ in the last ulp.
    try:
        return float(cell)
    except ValueError:
        return math.nan


def _read_table(
    path: Path, columns: Sequence[str], numeric: Sequence[str]
) -> pd.DataFrame:
    """Read a CSV, check its header and that numeric cells are finite numbers."""
    try:
        frame = pd.read_csv(path, comment="#", dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path} is empty; expected header {','.join(columns)}") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path} is missing columns: {', '.join(missing)}")
    extra = [c for c in frame.columns if c not in columns]
    if extra:
        raise DataError(f"{path} has unexpected columns: {', '.join(extra)}")

    # File line of a data row: header is line 1 (comment lines are skipped).
    offset = 2 + _comment_lines(path)
    for column in numeric:
        values = frame[column].map(_to_float)
        bad = ~np.isfinite(values.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(
                f"{path}: line {row + offset}, column '{column}' has invalid value "
                f"{frame[column].iloc[row]!r}",
                row=row + offset,
                column=column,
            )
        frame[column] = values
    return frame


def _comment_lines(path: Path) -> int:
    count = 0
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            count += 1
    return count


class CorpusParser:
    """
    Reader for trajectory corpora and scene files.

    The parser is stateless apart from its settings and can be reused.

    Attributes:
        dt: Sampling step of the trajectories [s].
        T: Expected samples per trajectory; None accepts the first seen.
        lanes: Road geometry attached to parsed scenes.
    """

    def __init__(
        self,
        dt: float = DEFAULT_DT,
        T: Optional[int] = None,
        lanes: Optional[LaneGeometry] = None,
    ) -> None:
        self.dt = dt
        self.T = T
        self.lanes = lanes or LaneGeometry()

    def read_trajectories(self, path: Union[str, Path]) -> List[Trajectory]:
        """
        Read and deviation-encode every trajectory in a trajectories CSV.

        Raises:
            FileNotFoundError: If the file does not exist.
            DataError: On schema violations, non-finite cells, gaps in the
                step sequence or inconsistent lengths.
        """
        path = _check_path(path)
        frame = _read_table(path, TRAJECTORY_COLUMNS, ("step", "x", "y", "v0"))
        trajectories: List[Trajectory] = []
        expected = self.T
        for traj_id, group in frame.groupby("traj_id", sort=False):
            group = group.sort_values("step")
            steps = group["step"].to_numpy()
            if not np.array_equal(steps, np.arange(len(steps))):
                raise DataError(
                    f"{path}: trajectory '{traj_id}' steps are not 0..{len(steps) - 1}",
                    column="step",
                )
            if expected is None:
                expected = len(steps)
            if len(steps) != expected:
                raise DataError(
                    f"{path}: trajectory '{traj_id}' has {len(steps)} samples, "
                    f"expected {expected}"
                )
            v0 = float(group["v0"].iloc[0])
            xy = group[["x", "y"]].to_numpy(dtype=float)
            raw = Trajectory(xy - xy[0], self.dt, str(traj_id), v0)
            trajectories.append(deviation_encode(raw, v0))
        logger.info("Read %d trajectories from %s", len(trajectories), path)
        return trajectories

    def read_scenes(self, path: Union[str, Path]) -> Dict[str, Scene]:
        """
        Read a scenes CSV into scenes keyed by sample id, in file order.

        Raises:
            DataError: On schema violations or a sample without exactly one ego.
        """
        path = _check_path(path)
        frame = _read_table(
            path, SCENE_COLUMNS, ("X", "Y", "v", "psi", "length", "width")
        )
        scenes: Dict[str, Scene] = {}
        for sample_id, group in frame.groupby("sample_id", sort=False):
            roles = group["role"].str.strip().str.lower()
            unknown = set(roles) - {"ego", "other"}
            if unknown:
                raise DataError(
                    f"{path}: sample '{sample_id}' has unknown roles {sorted(unknown)}",
                    column="role",
                )
            if int((roles == "ego").sum()) != 1:
                raise DataError(
                    f"{path}: sample '{sample_id}' needs exactly one ego row",
                    column="role",
                )
            vehicles = [
                VehicleState(
                    str(row.id),
                    float(row.X),
                    float(row.Y),
                    float(row.v),
                    float(row.psi),
                    float(row.length),
                    float(row.width),
                )
                for row in group.itertuples(index=False)
            ]
            ego = vehicles[int(np.flatnonzero((roles == "ego").to_numpy())[0])]
            others = tuple(v for v in vehicles if v is not ego)
            scenes[str(sample_id)] = Scene(ego, others, self.lanes)
        return scenes

    def ingest_corpus(self, path: Union[str, Path]) -> List[Pair]:
        """
        Read a corpus directory into (scene, observed trajectory) pairs.

        Pairs follow the order of samples in the scenes file.

        Raises:
            FileNotFoundError: If either file is missing.
            DataError: If the two files do not cover the same sample ids.
        """
        directory = _check_path(path)
        trajectories = {
            t.source_id: t
            for t in self.read_trajectories(directory / TRAJECTORIES_FILE)
        }
        scenes = self.read_scenes(directory / SCENES_FILE)
        missing = [s for s in scenes if s not in trajectories]
        orphans = [t for t in trajectories if t not in scenes]
        if missing or orphans:
            raise DataError(
                f"{directory}: scenes without trajectories {missing[:5]}, "
                f"trajectories without scenes {orphans[:5]}"
            )
        return [(scenes[s], trajectories[s]) for s in scenes]


def ingest_corpus(
    path: Union[str, Path],
    dt: float = DEFAULT_DT,
    T: Optional[int] = None,
    lanes: Optional[LaneGeometry] = None,
) -> List[Pair]:
    """Module-level shortcut for :meth:`CorpusParser.ingest_corpus`."""
    return CorpusParser(dt, T, lanes).ingest_corpus(path)


def write_corpus(pairs: Iterable[Pair], path: Union[str, Path]) -> None:
    """
    Write pairs as a corpus directory readable by :func:`ingest_corpus`.

    Trajectories are written in absolute coordinates relative to their
    first sample.
    """
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    traj_rows: List[Dict[str, object]] = []
    scene_rows: List[Dict[str, object]] = []
    for scene, observed in pairs:
        sample_id = observed.source_id
        absolute = observed.absolute(0.0, 0.0, observed.v0)
        for step, (x, y) in enumerate(absolute):
            traj_rows.append(
                {"traj_id": sample_id, "step": step, "x": x, "y": y, "v0": observed.v0}
            )
        for vehicle in scene.vehicles():
            scene_rows.append(
                {
                    "sample_id": sample_id,
                    "role": "ego" if vehicle is scene.ego else "other",
                    "id": vehicle.id,
                    "X": vehicle.X,
                    "Y": vehicle.Y,
                    "v": vehicle.v,
                    "psi": vehicle.psi,
                    "length": vehicle.length,
                    "width": vehicle.width,
                }
            )
    pd.DataFrame(traj_rows, columns=list(TRAJECTORY_COLUMNS)).to_csv(
        directory / TRAJECTORIES_FILE, index=False, float_format="%.17g"
    )
    pd.DataFrame(scene_rows, columns=list(SCENE_COLUMNS)).to_csv(
        directory / SCENES_FILE, index=False, float_format="%.17g"
    )


def flag_columns(M: int) -> List[str]:
    return [f"flag_{i}" for i in range(M)]


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """
    Write a dataset as flat CSV: 21 affordance columns, then M flag columns.

    The first line carries the producing stage's fingerprint as a comment.
    """
    frame = pd.DataFrame(dataset.features, columns=list(AFFORDANCE_FIELDS))
    flags = pd.DataFrame(dataset.flags.astype(int), columns=flag_columns(dataset.M))
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"{FINGERPRINT_PREFIX} {dataset.fingerprint}\n")
        pd.concat([frame, flags], axis=1).to_csv(
            handle, index=False, float_format="%.17g"
        )


def read_fingerprint(path: Union[str, Path]) -> str:
    with Path(path).open(encoding="utf-8") as handle:
        first = handle.readline()
    if first.startswith(FINGERPRINT_PREFIX):
        return first[len(FINGERPRINT_PREFIX) :].strip()
    return ""


def read_dataset(
    path: Union[str, Path], expected_fingerprint: Optional[str] = None
) -> Dataset:
    """
    Read a dataset CSV written by :func:`write_dataset`.

    Raises:
        FileNotFoundError: If the file is missing.
        DataError: On schema violations or flag values outside {0, 1, 2}.
        ConfigError: If the embedded fingerprint differs from the expected one.
    """
    path = _check_path(path)
    fingerprint = read_fingerprint(path)
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise ConfigError(
            f"{path} was produced with a different configuration; rerun 'label'"
        )
    header = pd.read_csv(path, comment="#", nrows=0).columns
    flag_names = [c for c in header if c.startswith("flag_")]
    columns = list(AFFORDANCE_FIELDS) + flag_names
    frame = _read_table(path, columns, columns)
    flags = frame[flag_names].to_numpy(dtype=float)
    if not np.all(np.isin(flags, (0, 1, 2))):
        raise DataError(f"{path}: flag values must be 0, 1 or 2")
    return Dataset(
        frame[list(AFFORDANCE_FIELDS)].to_numpy(dtype=float),
        flags.astype(np.int8),
        fingerprint=fingerprint,
    )
