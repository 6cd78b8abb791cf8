"""Feed-forward surrogate ``(x0, t) -> x_hat(t)`` with exact derivatives.

Differentiation is written out for this one architecture family (affine
layers, tanh or identity hidden activation, identity output):

* ``time_derivative`` pushes a single tangent along the time input through
  the network (forward mode, dual numbers);
* ``backward`` is reverse mode over both the primal and the tangent pass,
  so losses on ``dx_hat/dt`` get exact parameter gradients as well.

Parameters live in one flat binary64 vector; ``weights``/``biases`` are
views into it, which lets the optimizers work on the flat array directly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatVersionMismatch, InvalidDims, IoFailure, NonFiniteInput

MODEL_MAGIC = b"PNNM"
MODEL_VERSION = 1
_ACTIVATIONS = ("tanh", "identity")


@dataclass
class MlpModel:
    layer_dims: tuple
    params: np.ndarray
    input_low: np.ndarray
    input_high: np.ndarray
    activation: str = "tanh"
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise InvalidDims(f"need at least two positive layer sizes, got {self.layer_dims}")
        if self.activation not in _ACTIVATIONS:
            raise InvalidDims(f"unknown activation {self.activation!r}")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (n_params(self.layer_dims),):
            raise InvalidDims(
                f"parameter vector has {self.params.size} entries, dims {self.layer_dims} need "
                f"{n_params(self.layer_dims)}"
            )
        self.input_low = np.asarray(self.input_low, dtype=np.float64).copy()
        self.input_high = np.asarray(self.input_high, dtype=np.float64).copy()
        if self.input_low.shape != (self.layer_dims[0],) or self.input_high.shape != (self.layer_dims[0],):
            raise InvalidDims("normalization bounds must match the input width")
        if np.any(self.input_low > self.input_high):
            raise InvalidDims("normalization bounds must satisfy low <= high")
        self.weights, self.biases = _views(self.params, self.layer_dims)

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    @property
    def time_scale(self):
        """Half-width of the time normalization interval, in seconds."""
        return (self.input_high[-1] - self.input_low[-1]) / 2.0

    @property
    def time_rate(self):
        """d(normalized time)/dt."""
        width = self.input_high[-1] - self.input_low[-1]
        return 2.0 / width if width > 0 else 0.0

    def copy(self):
        return MlpModel(
            self.layer_dims,
            self.params.copy(),
            self.input_low,
            self.input_high,
            self.activation,
            self.seed,
            dict(self.provenance),
        )


def n_params(layer_dims):
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def _views(flat, dims):
    weights, biases = [], []
    pos = 0
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos : pos + a * b].reshape(a, b))
        pos += a * b
        biases.append(flat[pos : pos + b])
        pos += b
    return weights, biases


def init_mlp(layer_dims, seed=0, input_low=None, input_high=None, activation="tanh"):
    """Glorot-uniform weights, zero biases.

    Without explicit bounds the input normalization is the identity map
    (every input bound is [-1, 1]).
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or min(dims) < 1:
        raise InvalidDims(f"need at least two positive layer sizes, got {layer_dims}")
    rng = np.random.default_rng(seed)
    flat = np.zeros(n_params(dims))
    for W, (fan_in, fan_out) in zip(_views(flat, dims)[0], zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    low = -np.ones(dims[0]) if input_low is None else input_low
    high = np.ones(dims[0]) if input_high is None else input_high
    return MlpModel(dims, flat, low, high, activation, seed)


def normalization_bounds(domain_bounds, horizon):
    """Input bounds for ``(x0, t)`` from per-state domain bounds and the horizon."""
    b = np.asarray(domain_bounds, dtype=float)
    low = np.append(b[:, 0], 0.0)
    high = np.append(b[:, 1], float(horizon))
    return low, high


def normalize(model, inputs):
    """Min-max map of each input onto [-1, 1]; zero-width inputs map to 0.

    Written as ``((u - lo) - (hi - u)) / (hi - lo)`` so the bounds land on
    exactly -1 and +1.
    """
    u = np.asarray(inputs, dtype=float)
    lo, hi = model.input_low, model.input_high
    width = hi - lo
    fixed = width == 0
    safe = np.where(fixed, 1.0, width)
    return np.where(fixed, 0.0, ((u - lo) - (hi - u)) / safe)


def _as_batch(model, inputs):
    u = np.asarray(inputs, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    if u.shape[1] != model.input_dim:
        raise DimensionMismatch(f"input width {u.shape[1]} does not match model input {model.input_dim}")
    if not np.all(np.isfinite(u)):
        raise NonFiniteInput("network input contains NaN or Inf")
    return u, single


class _Cache:
    __slots__ = ("hs", "hdots", "adots")

    def __init__(self):
        self.hs, self.hdots, self.adots = [], [], []


def _run(model, u, tangent):
    """Primal (and optionally time-tangent) pass; returns outputs and a cache."""
    cache = _Cache()
    h = normalize(model, u)
    cache.hs.append(h)
    tanh = model.activation == "tanh"
    n_layers = len(model.weights)
    hdot = None
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ W + b
        if tangent:
            # Input tangent is zero except on the time column.
            adot = (model.time_rate * W[-1])[None, :] if i == 0 else hdot @ W
        if i == n_layers - 1:
            return (a, adot if tangent else None), cache
        if tanh:
            h = np.tanh(a)
            if tangent:
                hdot = (1.0 - h * h) * adot
        else:
            h = a
            if tangent:
                hdot = np.broadcast_to(adot, a.shape)
        cache.hs.append(h)
        if tangent:
            cache.adots.append(adot)
            cache.hdots.append(hdot)


def forward(model, inputs):
    """Network prediction for one input row or an ``(N, d+1)`` batch."""
    u, single = _as_batch(model, inputs)
    (y, _), _ = _run(model, u, tangent=False)
    return y[0] if single else y


def time_derivative(model, inputs):
    """``d x_hat / dt`` in physical seconds (includes the normalization factor)."""
    u, single = _as_batch(model, inputs)
    (_, ydot), _ = _run(model, u, tangent=True)
    ydot = np.broadcast_to(ydot, (u.shape[0], model.output_dim)).copy()
    return ydot[0] if single else ydot


def forward_with_cache(model, inputs, tangent=True):
    u, _ = _as_batch(model, inputs)
    (y, ydot), cache = _run(model, u, tangent)
    if tangent:
        ydot = np.broadcast_to(ydot, y.shape)
    return y, ydot, cache


def backward(model, cache, grad_y=None, grad_ydot=None, out=None):
    """Parameter gradient of a scalar loss given ``dL/dy`` and ``dL/d(dy/dt)``.

    Either cotangent may be ``None``.  The result is a flat vector laid out
    like ``model.params``; when ``out`` is given the gradient is added to it.
    """
    g = np.zeros_like(model.params) if out is None else out
    gW, gb = _views(g, model.layer_dims)
    tanh = model.activation == "tanh"
    use_tangent = grad_ydot is not None
    n_layers = len(model.weights)

    ga = grad_y
    gadot = grad_ydot
    for i in range(n_layers - 1, -1, -1):
        W = model.weights[i]
        h_prev = cache.hs[i]
        if ga is not None:
            gW[i] += h_prev.T @ ga
            gb[i] += ga.sum(axis=0)
        if use_tangent:
            if i == 0:
                gW[0][-1] += model.time_rate * gadot.sum(axis=0)
            else:
                gW[i] += cache.hdots[i - 1].T @ gadot
        if i == 0:
            break
        gh = ga @ W.T if ga is not None else None
        h = cache.hs[i]
        if use_tangent:
            ghdot = gadot @ W.T
        if tanh:
            s = 1.0 - h * h
            ga = gh * s if gh is not None else None
            if use_tangent:
                extra = -2.0 * ghdot * cache.adots[i - 1] * h * s
                ga = extra if ga is None else ga + extra
                gadot = ghdot * s
        else:
            ga = gh
            if use_tangent:
                gadot = ghdot
    return g


def config_hash(config):
    """Stable SHA-256 of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


_HEADER = struct.Struct("<4sBBI")


def save_model(model, path):
    dims = model.layer_dims
    prov = json.dumps({"seed": model.seed, **model.provenance}, sort_keys=True).encode()
    parts = [
        _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, _ACTIVATIONS.index(model.activation), len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        model.params.astype("<f8").tobytes(),
        model.input_low.astype("<f8").tobytes(),
        model.input_high.astype("<f8").tobytes(),
        struct.pack("<I", len(prov)),
        prov,
    ]
    payload = b"".join(parts)
    try:
        Path(path).write_bytes(payload + hashlib.sha256(payload).digest())
    except OSError as exc:
        raise IoFailure(f"cannot write model file {path}: {exc}") from exc


def load_model(path, expect_dims=None):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read model file {path}: {exc}") from exc
    if len(blob) < _HEADER.size + 32 or blob[:4] != MODEL_MAGIC:
        raise FormatVersionMismatch(f"{path} is not a model file")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise FormatVersionMismatch(f"{path}: checksum does not match contents")
    magic, version, act, n_dims = _HEADER.unpack_from(payload, 0)
    if version != MODEL_VERSION:
        raise FormatVersionMismatch(f"{path}: model format version {version}, expected {MODEL_VERSION}")
    pos = _HEADER.size
    dims = struct.unpack_from(f"<{n_dims}I", payload, pos)
    pos += 4 * n_dims
    if expect_dims is not None and tuple(expect_dims) != tuple(dims):
        raise FormatVersionMismatch(f"{path}: layer dims {dims} differ from expected {tuple(expect_dims)}")
    n = n_params(dims)
    try:
        params = np.frombuffer(payload, "<f8", n, pos).astype(np.float64)
        pos += 8 * n
        low = np.frombuffer(payload, "<f8", dims[0], pos).astype(np.float64)
        pos += 8 * dims[0]
        high = np.frombuffer(payload, "<f8", dims[0], pos).astype(np.float64)
        pos += 8 * dims[0]
        (n_prov,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        prov = json.loads(payload[pos : pos + n_prov].decode())
    except (ValueError, struct.error) as exc:
        raise FormatVersionMismatch(f"{path}: truncated or inconsistent model file") from exc
    if pos + n_prov != len(payload):
        raise FormatVersionMismatch(f"{path}: trailing bytes after provenance record")
    seed = prov.pop("seed", None)
    return MlpModel(dims, params, low, high, _ACTIVATIONS[act], seed, prov)
