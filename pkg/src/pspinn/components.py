"""Dynamic component models.

A component is an ODE right-hand side ``dx/dt = f(t, x)`` over a fixed-length
state vector, optionally with box limits on some states.  The concrete model
shipped here is the 9th-order synchronous machine (SM) connected to an
infinite bus, with a 3rd-order AVR/exciter and a 2nd-order turbine-governor.

All functions accept either a single state of shape ``(9,)`` or a batch of
shape ``(N, 9)``; the state is always the last axis.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidParams,
    IoFailure,
    NonFiniteState,
    SingularNetworkMatrix,
)

SM_STATE_NAMES = (
    "delta",
    "omega",
    "e_q_prime",
    "e_d_prime",
    "e_fd",
    "r_f",
    "v_r",
    "p_m",
    "p_sv",
)
DELTA, OMEGA, EQP, EDP, EFD, RF, VR, PM, PSV = range(9)

_DET_TOL = 1e-12


@dataclass(frozen=True)
class SmParams:
    """Machine, network, AVR and governor parameters (per unit unless noted)."""

    D: float = 2.0
    H: float = 5.06
    R_s: float = 0.0
    T_d0_prime: float = 4.75
    T_q0_prime: float = 1.6
    X_d: float = 1.25
    X_d_prime: float = 0.232
    X_q: float = 1.22
    X_q_prime: float = 0.715
    X_ep: float = 0.1
    R_e: float = 0.0
    Omega_B: float = 314.159
    V_s: float = 1.0
    theta_vs: float = 0.0
    K_A: float = 20.0
    T_A: float = 0.2
    K_F: float = 0.063
    T_F: float = 0.35
    K_E: float = 1.0
    T_E: float = 0.314
    V_ref: float = 1.095
    V_R_min: float = 0.8
    V_R_max: float = 8.0
    P_c: float = 0.7
    R_D: float = 0.05
    T_CH: float = 0.4
    T_SV: float = 0.2
    P_SV_max: float = 1.0
    sat_a: float = 0.098
    sat_b: float = 0.55
    # "literal": v_q = R_e i_q - X_ep i_d + ...; "standard": + X_ep i_d
    vq_sign_convention: str = "literal"

    def __post_init__(self):
        for name in ("H", "T_d0_prime", "T_q0_prime", "T_A", "T_F", "T_E", "T_CH", "T_SV"):
            if not getattr(self, name) > 0:
                raise InvalidParams(f"{name} must be strictly positive, got {getattr(self, name)}")
        if not self.V_R_min < self.V_R_max:
            raise InvalidParams("V_R_min must be smaller than V_R_max")
        if not self.P_SV_max > 0:
            raise InvalidParams("P_SV_max must be positive")
        if not self.R_D > 0:
            raise InvalidParams("R_D must be positive")
        if self.vq_sign_convention not in ("literal", "standard"):
            raise InvalidParams(
                f"vq_sign_convention must be 'literal' or 'standard', got {self.vq_sign_convention!r}"
            )
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type == "float" and not math.isfinite(v):
                raise InvalidParams(f"{f.name} must be finite")

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise InvalidParams(f"unknown machine parameter {key!r}")
            if key == "vq_sign_convention":
                kwargs[key] = str(value)
            else:
                try:
                    kwargs[key] = float(value)
                except (TypeError, ValueError):
                    raise InvalidParams(f"parameter {key!r} is not a number: {value!r}") from None
        return cls(**kwargs)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}".replace("'", ""))
        return "\n".join(lines) + "\n"


def parse_params_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParams(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise InvalidParams(f"line {lineno}: duplicate parameter {key!r}")
        values[key] = value
    return values


def load_params(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read parameter file {path}: {exc}") from exc
    return SmParams.from_mapping(parse_params_text(text))


def bundled_params_path():
    return Path(__file__).with_name("data") / "sm9_params.txt"


@dataclass(frozen=True)
class AlgebraicOutputs:
    i_d: np.ndarray
    i_q: np.ndarray
    v_d: np.ndarray
    v_q: np.ndarray
    v_t: np.ndarray
    s_e: np.ndarray


def _network_coefficients(params):
    a = params.R_s + params.R_e
    b = params.X_q + params.X_ep
    c = params.X_d_prime + params.X_ep
    det = a * a + b * c
    if abs(det) <= _DET_TOL:
        raise SingularNetworkMatrix(f"network matrix determinant {det:.3e} is too close to zero")
    return a, b, c, det


def solve_network(delta, params):
    """Stator/network currents ``(i_d, i_q)`` for rotor angle ``delta``.

    Solves ``[[R_s+R_e, -(X_q+X_ep)], [X'_d+X_ep, R_s+R_e]] @ [i_d, i_q]
    = V_s [sin(delta-theta_vs), cos(delta-theta_vs)]`` by Cramer's rule.
    """
    a, b, c, det = _network_coefficients(params)
    s = params.V_s * np.sin(np.asarray(delta, dtype=float) - params.theta_vs)
    k = params.V_s * np.cos(np.asarray(delta, dtype=float) - params.theta_vs)
    i_d = (a * s + b * k) / det
    i_q = (a * k - c * s) / det
    return i_d, i_q


def saturation(e_fd, params):
    return params.sat_a * np.exp(params.sat_b * np.asarray(e_fd, dtype=float))


def algebraic_outputs(delta, e_fd, i_d, i_q, params):
    arrays = [np.asarray(v, dtype=float) for v in (delta, e_fd, i_d, i_q)]
    if not all(np.all(np.isfinite(v)) for v in arrays):
        raise NonFiniteState("algebraic_outputs received a non-finite input")
    delta, e_fd, i_d, i_q = arrays
    sign = -1.0 if params.vq_sign_convention == "literal" else 1.0
    angle = delta - params.theta_vs
    v_d = params.R_e * i_d - params.X_ep * i_q + params.V_s * np.sin(angle)
    v_q = params.R_e * i_q + sign * params.X_ep * i_d + params.V_s * np.cos(angle)
    v_t = np.sqrt(v_d * v_d + v_q * v_q)
    return AlgebraicOutputs(i_d, i_q, v_d, v_q, v_t, saturation(e_fd, params))


def _check_state(state, dim):
    x = np.asarray(state, dtype=float)
    if x.shape[-1:] != (dim,):
        raise DimensionMismatch(f"expected state with last axis {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("state contains NaN or Inf")
    return x


def eval_rhs(t, state, params):
    """Time derivative of the 9th-order SM + AVR + governor state."""
    x = _check_state(state, 9)
    delta, omega, eqp, edp, efd, rf, vr, pm, psv = np.moveaxis(x, -1, 0)
    p = params
    i_d, i_q = solve_network(delta, p)
    alg = algebraic_outputs(delta, efd, i_d, i_q, p)

    out = np.empty_like(x)
    out[..., DELTA] = omega
    out[..., OMEGA] = (p.Omega_B / (2.0 * p.H)) * (
        pm - edp * i_d - eqp * i_q - (p.X_q_prime - p.X_d_prime) * i_d * i_q - p.D * omega
    )
    out[..., EQP] = (-eqp - (p.X_d - p.X_d_prime) * i_d + efd) / p.T_d0_prime
    out[..., EDP] = (-edp + (p.X_q - p.X_q_prime) * i_q) / p.T_q0_prime
    out[..., EFD] = (-(p.K_E + alg.s_e) * efd + vr) / p.T_E
    out[..., RF] = (-rf + (p.K_F / p.T_F) * efd) / p.T_F
    out[..., VR] = (
        p.K_A * rf - (p.K_A * p.K_F / p.T_F) * efd + p.K_A * (p.V_ref - alg.v_t) - vr
    ) / p.T_A
    out[..., PM] = (-pm + psv) / p.T_CH
    out[..., PSV] = (-psv + p.P_c - (1.0 / p.R_D) * (omega / p.Omega_B)) / p.T_SV
    return out


def rhs_vjp(t, state, cotangent, params):
    """Vector-Jacobian product ``cotangent @ d f / d state`` for the SM model."""
    x = _check_state(state, 9)
    g = np.asarray(cotangent, dtype=float)
    p = params
    delta, omega, eqp, edp, efd, rf, vr, pm, psv = np.moveaxis(x, -1, 0)
    g0, g1, g2, g3, g4, g5, g6, g7, g8 = np.moveaxis(g, -1, 0)

    a, b, c, det = _network_coefficients(p)
    angle = delta - p.theta_vs
    s = p.V_s * np.sin(angle)
    k = p.V_s * np.cos(angle)
    i_d = (a * s + b * k) / det
    i_q = (a * k - c * s) / det
    di_d = (a * k - b * s) / det
    di_q = (-a * s - c * k) / det

    sign = -1.0 if p.vq_sign_convention == "literal" else 1.0
    v_d = p.R_e * i_d - p.X_ep * i_q + s
    v_q = p.R_e * i_q + sign * p.X_ep * i_d + k
    v_t = np.sqrt(v_d * v_d + v_q * v_q)
    dv_d = p.R_e * di_d - p.X_ep * di_q + k
    dv_q = p.R_e * di_q + sign * p.X_ep * di_d - s
    safe_vt = np.where(v_t > 0, v_t, 1.0)
    dv_t = np.where(v_t > 0, (v_d * dv_d + v_q * dv_q) / safe_vt, 0.0)

    kw = p.Omega_B / (2.0 * p.H)
    dx = p.X_q_prime - p.X_d_prime
    s_e = p.sat_a * np.exp(p.sat_b * efd)
    kakf = p.K_A * p.K_F / p.T_F

    out = np.empty(np.broadcast_shapes(x.shape, g.shape))
    out[..., DELTA] = (
        g1 * kw * (-edp * di_d - eqp * di_q - dx * (di_d * i_q + i_d * di_q))
        + g2 * (-(p.X_d - p.X_d_prime) * di_d / p.T_d0_prime)
        + g3 * ((p.X_q - p.X_q_prime) * di_q / p.T_q0_prime)
        + g6 * (-p.K_A * dv_t / p.T_A)
    )
    out[..., OMEGA] = g0 - g1 * kw * p.D - g8 / (p.R_D * p.Omega_B * p.T_SV)
    out[..., EQP] = -g1 * kw * i_q - g2 / p.T_d0_prime
    out[..., EDP] = -g1 * kw * i_d - g3 / p.T_q0_prime
    out[..., EFD] = (
        g2 / p.T_d0_prime
        - g4 * (p.K_E + s_e + s_e * p.sat_b * efd) / p.T_E
        + g5 * (p.K_F / p.T_F) / p.T_F
        - g6 * kakf / p.T_A
    )
    out[..., RF] = -g5 / p.T_F + g6 * p.K_A / p.T_A
    out[..., VR] = g4 / p.T_E - g6 / p.T_A
    out[..., PM] = g1 * kw - g7 / p.T_CH
    out[..., PSV] = g7 / p.T_CH - g8 / p.T_SV
    return out


def apply_limits(state, derivative, params):
    """Clamp V_R and P_SV to their ranges and zero outward derivatives at a bound."""
    x = np.array(state, dtype=float, copy=True)
    dx = np.array(derivative, dtype=float, copy=True)
    for idx, lo, hi in ((VR, params.V_R_min, params.V_R_max), (PSV, 0.0, params.P_SV_max)):
        col = np.clip(x[..., idx], lo, hi)
        d = dx[..., idx]
        outward = ((col >= hi) & (d > 0)) | ((col <= lo) & (d < 0))
        x[..., idx] = col
        dx[..., idx] = np.where(outward, 0.0, d)
    return x, dx


def linear_test_rhs(t, state, matrix_A):
    """``A @ x``: linear test system with closed-form solution ``expm(A t) x0``."""
    A = np.asarray(matrix_A, dtype=float)
    x = np.asarray(state, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or x.shape[-1] != A.shape[1]:
        raise DimensionMismatch(f"matrix shape {A.shape} incompatible with state shape {x.shape}")
    return x @ A.T


class ComponentModel:
    """Base class for components usable by the solver and the PINN losses.

    Subclasses provide ``rhs`` and ``rhs_vjp``; limits are optional.
    """

    state_names: tuple = ()

    @property
    def state_dim(self):
        return len(self.state_names)

    @property
    def limits(self):
        """Mapping ``state index -> (min, max)``; empty when unconstrained."""
        return {}

    def rhs(self, t, state):
        raise NotImplementedError

    def rhs_vjp(self, t, state, cotangent):
        raise NotImplementedError

    def apply_limits(self, state, derivative):
        return np.asarray(state, dtype=float), np.asarray(derivative, dtype=float)

    def clamp(self, state):
        x = np.array(state, dtype=float, copy=True)
        for idx, (lo, hi) in self.limits.items():
            x[..., idx] = np.clip(x[..., idx], lo, hi)
        return x

    def limited_rhs(self, t, state):
        """Right-hand side used for simulation: clamped state, anti-windup derivative."""
        x = self.clamp(state) if self.limits else state
        return self.apply_limits(x, self.rhs(t, x))[1]


@dataclass(frozen=True)
class SynchronousMachine(ComponentModel):
    params: SmParams = field(default_factory=SmParams)
    state_names: tuple = SM_STATE_NAMES

    @property
    def limits(self):
        return {VR: (self.params.V_R_min, self.params.V_R_max), PSV: (0.0, self.params.P_SV_max)}

    def rhs(self, t, state):
        return eval_rhs(t, state, self.params)

    def rhs_vjp(self, t, state, cotangent):
        return rhs_vjp(t, state, cotangent, self.params)

    def apply_limits(self, state, derivative):
        return apply_limits(state, derivative, self.params)

    def algebraic(self, state):
        x = _check_state(state, 9)
        i_d, i_q = solve_network(x[..., DELTA], self.params)
        return algebraic_outputs(x[..., DELTA], x[..., EFD], i_d, i_q, self.params)


class LinearModel(ComponentModel):
    """``dx/dt = A x``; used as an analytic oracle in tests."""

    def __init__(self, matrix_A, state_names=None):
        A = np.array(matrix_A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"A must be square, got shape {A.shape}")
        self.A = A
        self.state_names = tuple(state_names or (f"x{i + 1}" for i in range(A.shape[0])))

    def rhs(self, t, state):
        x = _check_state(state, self.A.shape[0])
        return linear_test_rhs(t, x, self.A)

    def rhs_vjp(self, t, state, cotangent):
        return np.asarray(cotangent, dtype=float) @ self.A

    def __reduce__(self):
        return (LinearModel, (self.A, self.state_names))

    def __repr__(self):
        return f"LinearModel(A={self.A.tolist()})"


class LimitedResidual(ComponentModel):
    """View of a component whose ``rhs`` is the limited (simulation) right-hand side.

    Optional physics target for training, so the residual agrees with
    trajectories that sit on a limit.  The gradient treats the clamp and the
    anti-windup mask as piecewise constant.
    """

    def __init__(self, inner):
        self.inner = inner
        self.state_names = inner.state_names

    @property
    def limits(self):
        return self.inner.limits

    def rhs(self, t, state):
        return self.inner.limited_rhs(t, state)

    def rhs_vjp(self, t, state, cotangent):
        x = np.asarray(state, dtype=float)
        xc = self.inner.clamp(x)
        f = self.inner.rhs(t, xc)
        keep = np.ones_like(f)
        inside = np.ones_like(x)
        for idx, (lo, hi) in self.limits.items():
            col, d = xc[..., idx], f[..., idx]
            keep[..., idx] = ~(((col >= hi) & (d > 0)) | ((col <= lo) & (d < 0)))
            inside[..., idx] = (x[..., idx] >= lo) & (x[..., idx] <= hi)
        return self.inner.rhs_vjp(t, xc, np.asarray(cotangent, dtype=float) * keep) * inside

    def apply_limits(self, state, derivative):
        return self.inner.apply_limits(state, derivative)
