"""Accuracy metrics, inference benchmarks and trajectory exports."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import PointSet, trajectories_to_points
from .errors import DimensionMismatch, EmptySolution, IoFailure
from .nn import forward
from .solver import SolveConfig, grid_times, integrate_adaptive, sample_on_grid


@dataclass
class Metrics:
    mae: float
    mse: float
    max_ae: float
    per_state: dict = field(default_factory=dict)
    per_timestep: dict = field(default_factory=dict)
    n_points: int = 0
    state_names: tuple = ()

    def summary(self):
        return {"mae": self.mae, "mse": self.mse, "max_ae": self.max_ae, "n_points": self.n_points}

    def to_report(self):
        """Plain-text report; floats use ``repr`` so the file is reproducible bit for bit."""
        lines = [
            f"points = {self.n_points}",
            f"mae = {self.mae!r}",
            f"mse = {self.mse!r}",
            f"max_ae = {self.max_ae!r}",
            "",
            "state, mae, mse, max_ae",
        ]
        for i, name in enumerate(self.state_names):
            ps = self.per_state
            lines.append(f"{name}, {float(ps['mae'][i])!r}, {float(ps['mse'][i])!r}, {float(ps['max_ae'][i])!r}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        ps = {k: [float(v) for v in vals] for k, vals in self.per_state.items()}
        return json.dumps(
            {**self.summary(), "state_names": list(self.state_names), "per_state": ps}, indent=2, sort_keys=True
        )

    def timestep_table(self):
        ts = self.per_timestep
        rows = ["t,mae,max_ae"]
        rows += [f"{float(t)!r},{float(a)!r},{float(m)!r}" for t, a, m in zip(ts["t"], ts["mae"], ts["max_ae"])]
        return "\n".join(rows) + "\n"


def metrics_from_errors(abs_err, t, state_names=()):
    """Aggregate an ``(N, d)`` array of absolute errors."""
    abs_err = np.asarray(abs_err, dtype=float)
    if abs_err.size == 0:
        raise EmptySolution("no points to evaluate")
    sq = abs_err * abs_err
    times, inverse = np.unique(np.asarray(t, dtype=float), return_inverse=True)
    counts = np.bincount(inverse).astype(float)
    mae_t = np.bincount(inverse, weights=abs_err.mean(axis=1)) / counts
    max_t = np.full(len(times), -np.inf)
    np.maximum.at(max_t, inverse, abs_err.max(axis=1))
    return Metrics(
        mae=float(abs_err.mean()),
        mse=float(sq.mean()),
        max_ae=float(abs_err.max()),
        per_state={"mae": abs_err.mean(axis=0), "mse": sq.mean(axis=0), "max_ae": abs_err.max(axis=0)},
        per_timestep={"t": times, "mae": mae_t, "max_ae": max_t},
        n_points=len(abs_err),
        state_names=tuple(state_names) or tuple(f"x{i + 1}" for i in range(abs_err.shape[1])),
    )


def evaluate(model, test, state_names=()):
    """Pooled MAE / MSE / MaxAE of the surrogate on labeled test points.

    ``test`` is a labeled :class:`PointSet` or a list of trajectories.
    """
    points = test if isinstance(test, PointSet) else trajectories_to_points(list(test))
    if len(points) == 0:
        raise EmptySolution("test set is empty")
    if points.dim != model.output_dim:
        raise DimensionMismatch(f"test states have {points.dim} columns, model predicts {model.output_dim}")
    pred = forward(model, points.inputs)
    return metrics_from_errors(np.abs(pred - points.x), points.t, state_names)


# ---------------------------------------------------------------- timing


@dataclass
class TimingRow:
    method: str
    n_trajectories: int
    wall_ms: float
    repeats: int
    min_ms: float
    max_ms: float


@dataclass
class TimingTable:
    rows: list = field(default_factory=list)

    def get(self, method, n):
        for r in self.rows:
            if r.method == method and r.n_trajectories == n:
                return r
        raise KeyError((method, n))

    def sizes(self):
        return sorted({r.n_trajectories for r in self.rows})

    def to_csv(self):
        out = ["method,n_trajectories,wall_ms,repeats,min_ms,max_ms"]
        out += [f"{r.method},{r.n_trajectories},{r.wall_ms:.4f},{r.repeats},{r.min_ms:.4f},{r.max_ms:.4f}" for r in self.rows]
        return "\n".join(out) + "\n"

    def to_text(self):
        sizes = self.sizes()
        head = "Used Method | " + " | ".join(f"{n} Trajectories" for n in sizes)
        lines = [head]
        for method, label in (("solver", "ODE solver"), ("surrogate", "PINN")):
            cells = []
            for n in sizes:
                try:
                    r = self.get(method, n)
                    cells.append(f"{r.wall_ms:.3f} [{r.min_ms:.3f}, {r.max_ms:.3f}]")
                except KeyError:
                    cells.append("-")
            lines.append(f"{label} | " + " | ".join(cells))
        return "\n".join(lines) + "\n"


def surrogate_inputs(ics, times):
    ics = np.atleast_2d(ics)
    n_ic, n_t = len(ics), len(times)
    u = np.empty((n_ic, n_t, ics.shape[1] + 1))
    u[:, :, :-1] = ics[:, None, :]
    u[:, :, -1] = times[None, :]
    return u.reshape(n_ic * n_t, -1)


def predict_trajectories(model, ics, times):
    """Surrogate states on ``times`` for every initial condition: ``(n_ic, n_t, d)``."""
    ics = np.atleast_2d(ics)
    return forward(model, surrogate_inputs(ics, times)).reshape(len(ics), len(times), -1)


def _time_it(fn, repeats):
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1e3)
    return statistics.median(samples), min(samples), max(samples)


def bench_inference(model, component, ic_sets, solver_cfg=None, dt=1e-3, repeats=5, warmup=True):
    """Time the adaptive solver against the batched surrogate.

    The solver integrates each initial condition sequentially; the surrogate
    evaluates all ``(x0, t)`` grid points of a set in one forward pass.
    Medians of ``repeats`` runs are reported together with min/max.
    Empty sets are skipped.
    """
    if repeats < 3:
        raise ValueError("at least 3 repeats are required")
    cfg = solver_cfg or SolveConfig()
    times = grid_times(cfg.t_span, dt)
    table = TimingTable()
    for ics in ic_sets:
        ics = np.asarray(ics, dtype=float)
        if ics.size == 0:
            continue
        ics = np.atleast_2d(ics)

        def run_solver():
            for x0 in ics:
                sample_on_grid(integrate_adaptive(component, x0, cfg), dt)

        def run_surrogate():
            predict_trajectories(model, ics, times)

        for method, fn in (("solver", run_solver), ("surrogate", run_surrogate)):
            if warmup:
                fn()
            med, lo, hi = _time_it(fn, repeats)
            table.rows.append(TimingRow(method, len(ics), med, repeats, lo, hi))
    return table


# ---------------------------------------------------------------- exports


def export_overlays(model, component, ics, path, horizon=1.0, dt=1e-3, solver_cfg=None, state_names=None):
    """Write solver-vs-surrogate overlays per initial condition plus an error curve.

    Returns the list of written files (overlays first, error curve last).
    """
    ics = np.atleast_2d(np.asarray(ics, dtype=float))
    if ics.size == 0:
        raise EmptySolution("no initial conditions to export")
    base = solver_cfg or SolveConfig()
    cfg = SolveConfig((0.0, float(horizon)), base.rtol, base.atol, base.max_step, base.initial_step)
    names = list(state_names or getattr(component, "state_names", ()) or [f"x{i + 1}" for i in range(ics.shape[1])])
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {root}: {exc}") from exc

    header = ["t"] + [f"x_true_{n}" for n in names] + [f"x_pred_{n}" for n in names]
    written = []
    errors = []
    for k, x0 in enumerate(ics):
        tr = sample_on_grid(integrate_adaptive(component, x0, cfg), dt, k)
        pred = predict_trajectories(model, x0, tr.times)[0]
        errors.append(np.abs(pred - tr.states))
        table = np.column_stack([tr.times, tr.states, pred])
        target = root / f"overlay_{k:03d}.csv"
        _savetxt(target, table, header)
        written.append(target)

    err = np.stack(errors)  # (n_ic, n_t, d)
    curve = np.column_stack([tr.times, err.mean(axis=(0, 2)), err.max(axis=(0, 2))])
    target = root / "error_curve.csv"
    _savetxt(target, curve, ["t", "mae", "max_ae"])
    written.append(target)
    return written


def _savetxt(path, table, header):
    try:
        np.savetxt(path, table, fmt="%.17g", delimiter=",", header=",".join(header), comments="")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
