"""Explicit Runge-Kutta integration of component models.

``integrate_adaptive`` is a Dormand-Prince 5(4) integrator with the usual
embedded error estimate and 4th-order continuous extension; it generates the
ground-truth trajectories and is the timing baseline for the surrogate.
``integrate_fixed_rk4`` is the classical four-stage method on a constant step,
kept for convergence-order checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatch, EmptySolution, NonFiniteState, StepSizeUnderflow

# Dormand-Prince 5(4) tableau (7 stages, first-same-as-last).
RK_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
RK_A = np.array(
    [
        [0, 0, 0, 0, 0, 0, 0],
        [1 / 5, 0, 0, 0, 0, 0, 0],
        [3 / 40, 9 / 40, 0, 0, 0, 0, 0],
        [44 / 45, -56 / 15, 32 / 9, 0, 0, 0, 0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0, 0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0, 0],
        [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0],
    ]
)
RK_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
RK_B_HAT = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
RK_E = RK_B - RK_B_HAT
# Continuous extension: y(t + theta h) = y + h * K.T @ RK_P @ [theta, theta^2, theta^3, theta^4]
RK_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
ERROR_EXPONENT = -1.0 / 5.0


@dataclass(frozen=True)
class SolveConfig:
    t_span: tuple = (0.0, 1.0)
    rtol: float = 1e-7
    atol: float = 1e-9
    max_step: float = math.inf
    initial_step: float | None = None

    def __post_init__(self):
        t0, t1 = self.t_span
        object.__setattr__(self, "t_span", (float(t0), float(t1)))
        if not t1 > t0:
            raise ConfigError(f"t_span must be increasing, got {self.t_span}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ConfigError("rtol and atol must be positive")
        if not self.max_step > 0:
            raise ConfigError("max_step must be positive")
        if self.initial_step is not None and not self.initial_step > 0:
            raise ConfigError("initial_step must be positive")


@dataclass
class Trajectory:
    trajectory_id: int
    x0: np.ndarray
    times: np.ndarray
    states: np.ndarray

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


class DenseSolution:
    """Accepted steps of an adaptive run together with their interpolants."""

    def __init__(self, ts, ys, ks, model=None):
        self.ts = np.asarray(ts, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.ks = np.asarray(ks, dtype=float).reshape(len(self.ts) - 1, 7, self.ys.shape[1])
        self.model = model
        self._q = np.einsum("nkd,kp->ndp", self.ks, RK_P)

    @property
    def n_steps(self):
        return len(self.ts) - 1

    @property
    def t_span(self):
        return float(self.ts[0]), float(self.ts[-1])

    def __call__(self, t):
        if self.n_steps == 0:
            raise EmptySolution("solution has no accepted steps")
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.ts, t, side="right") - 1, 0, self.n_steps - 1)
        h = self.ts[idx + 1] - self.ts[idx]
        theta = (t - self.ts[idx]) / h
        powers = np.stack([theta, theta**2, theta**3, theta**4], axis=-1)
        y = self.ys[idx] + h[:, None] * np.einsum("ndp,np->nd", self._q[idx], powers)
        if self.model is not None and self.model.limits:
            y = self.model.clamp(y)
        return y


def _rms(v):
    return float(np.sqrt(np.mean(v * v)))


def select_initial_step(fun, t0, y0, f0, cfg, span):
    """Hairer-Norsett-Wanner starting step for a 5th-order method."""
    scale = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = fun(t0 + h0, y0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, span, cfg.max_step)


def integrate_adaptive(model, x0, cfg=None):
    """Integrate ``model`` from ``x0`` over ``cfg.t_span``.

    Component limits are enforced on the simulation side: stage derivatives
    come from ``model.limited_rhs`` and every accepted state is clamped.
    """
    cfg = cfg or SolveConfig()
    y = np.array(x0, dtype=float)
    if y.shape != (model.state_dim,):
        raise DimensionMismatch(f"x0 has shape {y.shape}, model expects ({model.state_dim},)")
    if not np.all(np.isfinite(y)):
        raise NonFiniteState("x0 contains NaN or Inf")

    t0, t_end = cfg.t_span
    span = t_end - t0
    h_min = 1e-14 * span
    fun = model.limited_rhs

    t = t0
    f = fun(t, y)
    h = cfg.initial_step if cfg.initial_step is not None else select_initial_step(fun, t, y, f, cfg, span)
    ts, ys, ks = [t], [y], []
    K = np.empty((7, y.size))
    rejected = False

    while t < t_end:
        h = min(h, cfg.max_step)
        if t + h >= t_end:
            h = t_end - t
        if h < h_min:
            raise StepSizeUnderflow(f"step size {h:.3e} fell below {h_min:.3e} at t={t:.6g}")

        K[0] = f
        for i in range(1, 6):
            K[i] = fun(t + RK_C[i] * h, y + h * (RK_A[i, :i] @ K[:i]))
        y_new = y + h * (RK_B[:6] @ K[:6])
        t_new = t + h if t + h < t_end else t_end
        K[6] = fun(t_new, y_new)
        if not np.all(np.isfinite(y_new)):
            raise NonFiniteState(f"state became non-finite at t={t_new:.6g}")

        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(h * (RK_E @ K) / scale)

        if err < 1.0:
            factor = MAX_FACTOR if err == 0.0 else min(MAX_FACTOR, SAFETY * err**ERROR_EXPONENT)
            if rejected:
                factor = min(1.0, factor)
            ks.append(K.copy())
            if model.limits:
                y_clamped = model.clamp(y_new)
                if not np.array_equal(y_clamped, y_new):
                    y_new = y_clamped
                    K[6] = fun(t_new, y_new)
            t, y, f = t_new, y_new, K[6].copy()
            ts.append(t)
            ys.append(y)
            h *= factor
            rejected = False
        else:
            h *= max(MIN_FACTOR, SAFETY * err**ERROR_EXPONENT)
            rejected = True

    return DenseSolution(ts, ys, ks, model=model)


def grid_times(t_span, dt):
    """Uniform grid ``t0, t0+dt, ...`` covering the span; tolerant to rounding in ``dt``."""
    t0, t_end = (float(v) for v in t_span)
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    n = int(math.floor((t_end - t0) / dt + 1e-9)) + 1
    return t0 + dt * np.arange(n)


def sample_on_grid(solution, dt, trajectory_id=0):
    if solution.n_steps == 0:
        raise EmptySolution("solution has no accepted steps")
    times = grid_times(solution.t_span, dt)
    states = solution(np.minimum(times, solution.ts[-1]))
    states[0] = solution.ys[0]
    return Trajectory(int(trajectory_id), solution.ys[0].copy(), times, states)


def simulate(model, x0, cfg, dt, trajectory_id=0):
    return sample_on_grid(integrate_adaptive(model, x0, cfg), dt, trajectory_id)


def integrate_fixed_rk4(model, x0, t_span, h, trajectory_id=0):
    """Classical RK4 with constant step ``h``; the span must be a multiple of ``h``."""
    if not h > 0:
        raise ConfigError(f"h must be positive, got {h}")
    t0, t_end = (float(v) for v in t_span)
    n = int(round((t_end - t0) / h))
    if n < 1 or abs(n * h - (t_end - t0)) > 1e-9 * max(1.0, abs(t_end - t0)):
        raise ConfigError(f"step {h} does not divide the span {t_span}")
    y = np.array(x0, dtype=float)
    fun = model.limited_rhs
    states = np.empty((n + 1, y.size))
    states[0] = y
    times = t0 + h * np.arange(n + 1)
    for i in range(n):
        t = times[i]
        k1 = fun(t, y)
        k2 = fun(t + h / 2, y + h / 2 * k1)
        k3 = fun(t + h / 2, y + h / 2 * k2)
        k4 = fun(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if model.limits:
            y = model.clamp(y)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"state became non-finite at t={times[i + 1]:.6g}")
        states[i + 1] = y
    return Trajectory(int(trajectory_id), states[0].copy(), times, states)
