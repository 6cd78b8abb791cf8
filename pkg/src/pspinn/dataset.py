"""Labeled and collocation datasets in the ``(x0, t) -> x`` layout.

Points are stored column-wise in a :class:`PointSet`; one row per
``(trajectory, time)`` pair.  Labeled sets carry the true state ``x``,
collocation sets do not.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    FormatVersionMismatch,
    IoFailure,
    PinnError,
    TooFewTrajectories,
    TrajectoryFailed,
)
from .solver import SolveConfig, grid_times, simulate

DATASET_MAGIC = b"PNND"
DATASET_VERSION = 1
SPLITS = ("train", "validation", "test", "collocation")


class LabeledPoint(NamedTuple):
    x0: np.ndarray
    t: float
    x: np.ndarray
    trajectory_id: int


class CollocationPoint(NamedTuple):
    x0: np.ndarray
    t: float
    trajectory_id: int


def _as_rows(values, n):
    a = np.asarray(values, dtype=float)
    return a if a.ndim == 2 and a.shape[0] == n else a.reshape(n, -1)


@dataclass
class PointSet:
    trajectory_id: np.ndarray
    x0: np.ndarray
    t: np.ndarray
    x: np.ndarray | None = None

    def __post_init__(self):
        self.trajectory_id = np.asarray(self.trajectory_id, dtype=np.int64).reshape(-1)
        n = self.trajectory_id.size
        self.x0 = _as_rows(self.x0, n)
        self.t = np.asarray(self.t, dtype=float).reshape(n)
        if self.x is not None:
            self.x = _as_rows(self.x, n)
            if self.x.shape != self.x0.shape:
                raise DimensionMismatch("x and x0 must have the same shape")

    @classmethod
    def empty(cls, dim, labeled=True):
        return cls(np.empty(0, np.int64), np.empty((0, dim)), np.empty(0), np.empty((0, dim)) if labeled else None)

    def __len__(self):
        return self.trajectory_id.size

    def __getitem__(self, i):
        if self.x is None:
            return CollocationPoint(self.x0[i], float(self.t[i]), int(self.trajectory_id[i]))
        return LabeledPoint(self.x0[i], float(self.t[i]), self.x[i], int(self.trajectory_id[i]))

    @property
    def dim(self):
        return self.x0.shape[1]

    @property
    def labeled(self):
        return self.x is not None

    @property
    def inputs(self):
        return np.hstack([self.x0, self.t[:, None]])

    def select(self, index):
        return PointSet(
            self.trajectory_id[index],
            self.x0[index],
            self.t[index],
            None if self.x is None else self.x[index],
        )

    def trajectory_ids(self):
        """Distinct trajectory ids in order of first appearance."""
        ids, first = np.unique(self.trajectory_id, return_index=True)
        return ids[np.argsort(first)]

    def initial_conditions(self):
        """One ``x0`` row per trajectory, in order of first appearance."""
        _, first = np.unique(self.trajectory_id, return_index=True)
        return self.x0[np.sort(first)]

    def equals(self, other):
        """Bitwise equality of every column."""
        same_labels = (self.x is None and other.x is None) or (
            self.x is not None and other.x is not None and np.array_equal(self.x, other.x)
        )
        return (
            same_labels
            and np.array_equal(self.trajectory_id, other.trajectory_id)
            and np.array_equal(self.x0, other.x0)
            and np.array_equal(self.t, other.t)
        )


def concat(sets):
    sets = list(sets)
    labeled = sets[0].labeled
    return PointSet(
        np.concatenate([s.trajectory_id for s in sets]),
        np.concatenate([s.x0 for s in sets]),
        np.concatenate([s.t for s in sets]),
        np.concatenate([s.x for s in sets]) if labeled else None,
    )


def trajectories_to_points(trajectories):
    if not trajectories:
        raise ValueError("no trajectories to flatten")
    parts = []
    for tr in trajectories:
        n = len(tr.times)
        parts.append(PointSet(np.full(n, tr.trajectory_id), np.tile(tr.x0, (n, 1)), tr.times, tr.states))
    return concat(parts)


def _simulate_task(args):
    model, x0, cfg, dt, tid = args
    try:
        return simulate(model, x0, cfg, dt, tid)
    except PinnError as exc:
        raise TrajectoryFailed(tid, exc) from exc


def simulate_many(model, ics, cfg, dt, threads=1, first_id=0):
    """Simulate every row of ``ics``; results are ordered by trajectory id."""
    ics = np.atleast_2d(np.asarray(ics, dtype=float))
    if ics.shape[1] != model.state_dim:
        raise DimensionMismatch(f"initial conditions have {ics.shape[1]} columns, model has {model.state_dim}")
    tasks = [(model, x0, cfg, dt, first_id + i) for i, x0 in enumerate(ics)]
    if threads <= 1 or len(tasks) <= 1:
        return [_simulate_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_simulate_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))


def generate_labeled(model, ics, horizon, dt, cfg=None, threads=1, first_id=0):
    """Simulate each initial condition over ``[0, horizon]`` and flatten to points."""
    base = cfg or SolveConfig()
    cfg = SolveConfig((0.0, float(horizon)), base.rtol, base.atol, base.max_step, base.initial_step)
    trajectories = simulate_many(model, ics, cfg, dt, threads, first_id)
    return trajectories, trajectories_to_points(trajectories)


def _rank_within_trajectory(points):
    order = np.lexsort((points.t, points.trajectory_id))
    sorted_ids = points.trajectory_id[order]
    starts = np.r_[0, np.nonzero(np.diff(sorted_ids))[0] + 1]
    run_start = np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order)) - run_start
    return rank


def thin(points, stride, offset=0):
    """Keep grid indices ``offset, offset + stride, ...`` of every trajectory."""
    if stride < 1 or not 0 <= offset < stride:
        raise ValueError(f"need stride >= 1 and 0 <= offset < stride, got {stride}, {offset}")
    if stride == 1 or len(points) == 0:
        return points
    rank = _rank_within_trajectory(points)
    keep = (rank >= offset) & ((rank - offset) % stride == 0)
    return points.select(keep)


def build_collocation(ics, time_grid, stride=1, offset=0, first_id=0):
    """Pair every collocation initial condition with the (thinned) time grid."""
    ics = np.atleast_2d(np.asarray(ics, dtype=float))
    times = np.asarray(time_grid, dtype=float)[offset::stride]
    n_ic, n_t = len(ics), len(times)
    return PointSet(
        np.repeat(np.arange(first_id, first_id + n_ic), n_t),
        np.repeat(ics, n_t, axis=0),
        np.tile(times, n_ic),
    )


def points_per_trajectory(n_grid, stride):
    return (n_grid - 1) // stride + 1


@dataclass
class SplitDataset:
    train: PointSet
    validation: PointSet
    test: PointSet
    collocation: PointSet | None = None
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def split(self, name):
        return getattr(self, name)


def allocate_counts(n, ratios):
    """Largest-remainder apportionment of ``n`` items to ``ratios``."""
    raw = np.asarray(ratios, dtype=float) * n
    counts = np.floor(raw).astype(int)
    remainder = n - counts.sum()
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split_by_trajectory(points, ratios=(0.8, 0.1, 0.1), seed=0):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    ids = points.trajectory_ids()
    counts = allocate_counts(len(ids), ratios)
    if np.any(counts == 0):
        raise TooFewTrajectories(f"{len(ids)} trajectories cannot fill splits {ratios}: counts {counts.tolist()}")
    shuffled = np.random.default_rng(seed).permutation(ids)
    bounds = np.cumsum(counts)
    groups = np.split(shuffled, bounds[:-1])
    parts = [points.select(np.isin(points.trajectory_id, g)) for g in groups]
    return SplitDataset(parts[0], parts[1], parts[2], None, ratios, int(seed))


# ---------------------------------------------------------------- persistence

_BIN_HEADER = struct.Struct("<4sBBQI")


def _columns(points):
    cols = [points.trajectory_id.astype(float)[:, None], points.x0, points.t[:, None]]
    if points.labeled:
        cols.append(points.x)
    return np.hstack(cols) if len(points) else np.empty((0, 2 * points.dim + 2 if points.labeled else points.dim + 2))


def _header(dim, labeled, names=None):
    names = names or [str(i + 1) for i in range(dim)]
    cols = ["trajectory_id"] + [f"x0_{n}" for n in names] + ["t"]
    if labeled:
        cols += [f"x_{n}" for n in names]
    return cols


def _from_table(table, dim, labeled):
    return PointSet(
        table[:, 0].astype(np.int64),
        table[:, 1 : 1 + dim],
        table[:, 1 + dim],
        table[:, 2 + dim :] if labeled else None,
    )


def points_to_csv_bytes(points, names=None):
    buf = io.StringIO()
    buf.write(",".join(_header(points.dim, points.labeled, names)) + "\n")
    table = _columns(points)
    if len(table):
        fmt = ["%d"] + ["%.17g"] * (table.shape[1] - 1)
        np.savetxt(buf, table, fmt=fmt, delimiter=",")
    return buf.getvalue().encode()


def points_from_csv(path, dim, labeled):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise FormatVersionMismatch(f"{path}: missing header")
    expected = len(_header(dim, labeled))
    if len(lines[0].split(",")) != expected:
        raise FormatVersionMismatch(f"{path}: header has {len(lines[0].split(','))} columns, expected {expected}")
    if len(lines) == 1:
        return PointSet.empty(dim, labeled)
    table = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    if table.shape[1] != expected:
        raise FormatVersionMismatch(f"{path}: rows have {table.shape[1]} columns, expected {expected}")
    return _from_table(table, dim, labeled)


def points_to_binary(points):
    table = _columns(points)
    payload = _BIN_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, int(points.labeled), len(points), points.dim)
    payload += np.ascontiguousarray(table, dtype="<f8").tobytes()
    return payload + hashlib.sha256(payload).digest()


def points_from_binary(blob, source="<bytes>"):
    if len(blob) < _BIN_HEADER.size + 32 or blob[:4] != DATASET_MAGIC:
        raise FormatVersionMismatch(f"{source}: not a PNND container")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumMismatch(f"{source}: container checksum mismatch")
    _, version, labeled, rows, dim = _BIN_HEADER.unpack_from(payload, 0)
    if version != DATASET_VERSION:
        raise FormatVersionMismatch(f"{source}: version {version}, expected {DATASET_VERSION}")
    n_cols = 2 * dim + 2 if labeled else dim + 2
    body = payload[_BIN_HEADER.size :]
    if len(body) != rows * n_cols * 8:
        raise FormatVersionMismatch(f"{source}: body size does not match {rows} x {n_cols}")
    table = np.frombuffer(body, "<f8").reshape(rows, n_cols).astype(np.float64)
    return _from_table(table, dim, bool(labeled))


def _write(path, data):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def save_dataset(dataset, path, binary=True, state_names=None):
    """Write every split as CSV (plus PNND when ``binary``) and a metadata sidecar."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {root}: {exc}") from exc
    dim = dataset.train.dim
    files = {}
    for name in SPLITS:
        points = dataset.split(name)
        if points is None:
            continue
        csv = points_to_csv_bytes(points, state_names)
        _write(root / f"{name}.csv", csv)
        entry = {"rows": len(points), "labeled": points.labeled, "csv_sha256": hashlib.sha256(csv).hexdigest()}
        if binary:
            blob = points_to_binary(points)
            _write(root / f"{name}.pnnd", blob)
            entry["pnnd_sha256"] = hashlib.sha256(blob).hexdigest()
        files[name] = entry
    meta = {
        "format": "pnnd-dataset",
        "version": DATASET_VERSION,
        "dim": dim,
        "state_names": list(state_names) if state_names else None,
        "ratios": list(dataset.ratios),
        "seed": dataset.seed,
        "files": files,
        "metadata": dataset.metadata,
    }
    _write(root / "metadata.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return root


def load_dataset(path, prefer_binary=True):
    root = Path(path)
    try:
        meta = json.loads((root / "metadata.json").read_text())
    except FileNotFoundError as exc:
        raise IoFailure(f"{root} has no metadata.json") from exc
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read {root / 'metadata.json'}: {exc}") from exc
    if meta.get("version") != DATASET_VERSION:
        raise FormatVersionMismatch(f"{root}: dataset version {meta.get('version')}, expected {DATASET_VERSION}")
    dim = int(meta["dim"])
    splits = {}
    for name, entry in meta["files"].items():
        pnnd, csv = root / f"{name}.pnnd", root / f"{name}.csv"
        if prefer_binary and pnnd.exists() and "pnnd_sha256" in entry:
            blob = pnnd.read_bytes()
            if hashlib.sha256(blob).hexdigest() != entry["pnnd_sha256"]:
                raise ChecksumMismatch(f"{pnnd}: checksum differs from metadata")
            points = points_from_binary(blob, pnnd)
        else:
            try:
                blob = csv.read_bytes()
            except OSError as exc:
                raise IoFailure(f"cannot read {csv}: {exc}") from exc
            if hashlib.sha256(blob).hexdigest() != entry["csv_sha256"]:
                raise ChecksumMismatch(f"{csv}: checksum differs from metadata")
            points = points_from_csv(csv, dim, entry["labeled"])
        if points.dim != dim or len(points) != entry["rows"]:
            raise FormatVersionMismatch(f"{name}: shape does not match metadata")
        splits[name] = points
    missing = [s for s in SPLITS[:3] if s not in splits]
    if missing:
        raise FormatVersionMismatch(f"{root}: missing splits {missing}")
    return SplitDataset(
        splits["train"],
        splits["validation"],
        splits["test"],
        splits.get("collocation"),
        tuple(meta["ratios"]),
        int(meta["seed"]),
        meta.get("metadata", {}),
    )


def time_grid(horizon, dt):
    return grid_times((0.0, float(horizon)), dt)


def expected_point_count(n_trajectories, horizon, dt, stride=1):
    n_grid = len(time_grid(horizon, dt))
    return n_trajectories * points_per_trajectory(n_grid, stride)

