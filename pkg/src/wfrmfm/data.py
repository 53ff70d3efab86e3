"""Weighted point clouds, snapshot datasets, and their flat CSV format.

A snapshot file holds every recorded cell as one row:

    time,cond,mass,x0,...,x{d-1}

with UTF-8 text and '.' as the decimal separator.  The `cond` column is an
integer condition id (-1 when the dataset has no conditions).  Rows are
grouped by the `time` column into per-snapshot clouds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import DataError

__all__ = ["WeightedCloud", "SnapshotDataset", "load_snapshots", "save_snapshots"]


@dataclass
class WeightedCloud:
    """A finite collection of points with nonnegative masses.

    ``points`` has shape (n, d) and ``masses`` shape (n,).  At least one
    mass must be positive for the cloud to represent anything.
    """

    points: np.ndarray
    masses: np.ndarray
    time: float = 0.0
    condition_id: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.points.ndim != 2:
            raise DataError(f"points must be (n, d), got shape {self.points.shape}")
        if self.masses.shape != (self.points.shape[0],):
            raise DataError(
                f"masses shape {self.masses.shape} does not match "
                f"{self.points.shape[0]} points"
            )
        if not np.all(np.isfinite(self.points)) or not np.all(np.isfinite(self.masses)):
            raise DataError("points and masses must be finite")
        if np.any(self.masses < 0):
            raise DataError("masses must be nonnegative")
        if not np.any(self.masses > 0):
            raise DataError("cloud must carry some positive mass")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def scaled(self, factor: float) -> "WeightedCloud":
        """Same cloud with all masses multiplied by ``factor``."""
        return WeightedCloud(self.points, self.masses * factor,
                             time=self.time, condition_id=self.condition_id)


@dataclass
class SnapshotDataset:
    """Ordered population snapshots over a strictly increasing time grid."""

    snapshots: list  # list[WeightedCloud]
    time_grid: np.ndarray
    dim: int = field(default=0)

    def __post_init__(self):
        self.time_grid = np.asarray(self.time_grid, dtype=np.float64)
        if len(self.snapshots) != self.time_grid.shape[0]:
            raise DataError("one snapshot per time point required")
        if len(self.snapshots) < 2:
            raise DataError("a dataset needs at least two snapshots")
        if np.any(np.diff(self.time_grid) <= 0):
            raise DataError("time grid must be strictly increasing")
        dims = {c.dim for c in self.snapshots}
        if len(dims) != 1:
            raise DataError(f"snapshots disagree on dimension: {sorted(dims)}")
        self.dim = dims.pop()

    @property
    def n_segments(self) -> int:
        return len(self.snapshots) - 1

    def normalized_times(self) -> np.ndarray:
        """Time grid affinely mapped onto [0, 1]."""
        t = self.time_grid
        return (t - t[0]) / (t[-1] - t[0])

    def counts(self) -> np.ndarray:
        return np.array([c.n for c in self.snapshots], dtype=np.int64)


def save_snapshots(dataset: SnapshotDataset, path) -> None:
    """Write a dataset in the flat snapshot CSV format."""
    d = dataset.dim
    header = ["time", "cond", "mass"] + [f"x{i}" for i in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, cloud in zip(dataset.time_grid, dataset.snapshots):
            cond = -1 if cloud.condition_id is None else int(cloud.condition_id)
            for i in range(cloud.n):
                row = [repr(float(t)), cond, repr(float(cloud.masses[i]))]
                row += [repr(float(v)) for v in cloud.points[i]]
                writer.writerow(row)


def load_snapshots(path) -> SnapshotDataset:
    """Read a snapshot CSV back into a dataset.

    Raises ``DataError`` with the offending line number on ragged rows,
    non-numeric fields, NaN values, or an empty body.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 4 or header[:3] != ["time", "cond", "mass"]:
            raise DataError(f"{path}: bad header {header!r}")
        d = len(header) - 3
        times, conds, masses, coords = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + d:
                raise DataError(f"{path}:{lineno}: expected {3 + d} fields, got {len(row)}")
            try:
                t = float(row[0])
                cond = int(row[1])
                m = float(row[2])
                xs = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            vals = [t, m] + xs
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            times.append(t)
            conds.append(cond)
            masses.append(m)
            coords.append(xs)
    if not times:
        raise DataError(f"{path}: no data rows")
    times_arr = np.asarray(times)
    order = np.argsort(times_arr, kind="stable")
    grid = np.unique(times_arr)
    snapshots = []
    coords_arr = np.asarray(coords, dtype=np.float64)
    masses_arr = np.asarray(masses, dtype=np.float64)
    conds_arr = np.asarray(conds, dtype=np.int64)
    for t in grid:
        sel = order[times_arr[order] == t]
        cond_vals = set(conds_arr[sel].tolist())
        cond = cond_vals.pop() if len(cond_vals) == 1 else -1
        snapshots.append(WeightedCloud(
            coords_arr[sel], masses_arr[sel], time=float(t),
            condition_id=None if cond == -1 else int(cond),
        ))
    return SnapshotDataset(snapshots=snapshots, time_grid=grid)
