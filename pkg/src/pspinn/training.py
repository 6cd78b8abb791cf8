"""Hybrid data/physics loss and the optimization loop.

The total loss is

    L = l_d * L_data + l_dp * L_physics_data + l_cp * L_physics_col + l_ic * L_ic

where every term is a mean over points *and* state components:

* ``L_data``          squared error against the labels,
* ``L_physics_data``  residual ``dx_hat/dt - f(t, x)`` with ``f`` at the label,
* ``L_physics_col``   residual ``dx_hat/dt - f(t, x_hat)`` at collocation points,
* ``L_ic``            squared error of ``x_hat(x0, t=0)`` against ``x0``.

The physics terms use the component's plain right-hand side; limits are only
enforced by the simulator that produced the labels.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .components import LimitedResidual
from .errors import AllTermsDisabled, LineSearchFailed, NonFiniteLoss, OptimizerDiverged, ZeroLossTerm
from .nn import backward, forward, forward_with_cache, time_derivative


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0
    lambda_dp: float = 0.0
    lambda_cp: float = 0.0
    lambda_ic: float = 0.0

    def __post_init__(self):
        values = self.as_tuple()
        if any(not (v >= 0 and math.isfinite(v)) for v in values):
            raise ValueError(f"loss weights must be finite and nonnegative, got {values}")
        if not any(values):
            raise AllTermsDisabled("at least one loss weight must be nonzero")

    def as_tuple(self):
        return (self.lambda_d, self.lambda_dp, self.lambda_cp, self.lambda_ic)

    def scaled(self, factor):
        return LossWeights(*(factor * v for v in self.as_tuple()))


REFERENCE_WEIGHTS = LossWeights(1.0, 0.01, 0.001, 0.01)
DATA_ONLY = LossWeights(1.0, 0.0, 0.0, 0.0)


@dataclass
class LossBreakdown:
    """Unweighted terms plus the weighted total; skipped terms are ``None``."""

    l_data: float | None
    l_physics_data: float | None
    l_physics_col: float | None
    l_ic: float | None
    total: float

    def terms(self):
        return (self.l_data, self.l_physics_data, self.l_physics_col, self.l_ic)


class Batch:
    """Network-ready arrays for one set of points.

    The right-hand side at the labels never changes during training, so it
    is evaluated once and cached.
    """

    def __init__(self, inputs, labels=None):
        self.inputs = np.ascontiguousarray(inputs, dtype=float)
        self.labels = None if labels is None else np.ascontiguousarray(labels, dtype=float)
        self._f_labels = None

    @classmethod
    def from_points(cls, points):
        return cls(points.inputs, points.x)

    @classmethod
    def initial_conditions(cls, x0):
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        return cls(np.hstack([x0, np.zeros((len(x0), 1))]), x0)

    def __len__(self):
        return len(self.inputs)

    @property
    def t(self):
        return self.inputs[:, -1]

    def f_labels(self, component):
        if self._f_labels is None or self._f_labels[0] is not component:
            self._f_labels = (component, component.rhs(self.t, self.labels))
        return self._f_labels[1]

    def take(self, index):
        return Batch(self.inputs[index], None if self.labels is None else self.labels[index])


@dataclass
class Batches:
    data: Batch | None = None
    collocation: Batch | None = None
    ic: Batch | None = None

    @classmethod
    def from_points(cls, labeled=None, collocation=None, ic_x0=None):
        if ic_x0 is None:
            source = collocation if collocation is not None and len(collocation) else labeled
            ic_x0 = source.initial_conditions() if source is not None and len(source) else None
        return cls(
            Batch.from_points(labeled) if labeled is not None and len(labeled) else None,
            Batch.from_points(collocation) if collocation is not None and len(collocation) else None,
            Batch.initial_conditions(ic_x0) if ic_x0 is not None and len(ic_x0) else None,
        )


def _check_finite(value, name):
    if not math.isfinite(value):
        raise NonFiniteLoss(f"{name} is not finite")
    return value


def _require(batch, name):
    if batch is None or len(batch) == 0:
        raise ValueError(f"{name} needs a nonempty batch")
    return batch


def loss_data(model, batch):
    _require(batch, "loss_data")
    r = forward(model, batch.inputs) - batch.labels
    return _check_finite(float(np.mean(r * r)), "L_data")


def loss_physics_data(model, component, batch):
    _require(batch, "loss_physics_data")
    r = time_derivative(model, batch.inputs) - batch.f_labels(component)
    return _check_finite(float(np.mean(r * r)), "L_physics_data")


def loss_physics_col(model, component, batch):
    _require(batch, "loss_physics_col")
    x_hat = forward(model, batch.inputs)
    r = time_derivative(model, batch.inputs) - component.rhs(batch.t, x_hat)
    return _check_finite(float(np.mean(r * r)), "L_physics_col")


def loss_ic(model, batch):
    _require(batch, "loss_ic")
    r = forward(model, batch.inputs) - batch.labels
    return _check_finite(float(np.mean(r * r)), "L_ic")


def _active(weights, batches):
    active = (
        weights.lambda_d > 0 and batches.data is not None,
        weights.lambda_dp > 0 and batches.data is not None,
        weights.lambda_cp > 0 and batches.collocation is not None,
        weights.lambda_ic > 0 and batches.ic is not None,
    )
    if not any(active):
        raise AllTermsDisabled("no loss term has both a nonzero weight and a nonempty batch")
    return active


def total_loss(model, component, batches, weights):
    """Evaluate the weighted loss; zero-weight terms are not computed."""
    use_d, use_dp, use_cp, use_ic = _active(weights, batches)
    terms = (
        loss_data(model, batches.data) if use_d else None,
        loss_physics_data(model, component, batches.data) if use_dp else None,
        loss_physics_col(model, component, batches.collocation) if use_cp else None,
        loss_ic(model, batches.ic) if use_ic else None,
    )
    total = sum(w * v for w, v in zip(weights.as_tuple(), terms) if v is not None)
    return LossBreakdown(*terms, total=total)


def loss_and_grad(model, component, batches, weights):
    """Loss breakdown and the exact gradient with respect to ``model.params``."""
    use_d, use_dp, use_cp, use_ic = _active(weights, batches)
    grad = np.zeros_like(model.params)
    l_d = l_dp = l_cp = l_ic = None

    if use_d or use_dp:
        b = batches.data
        y, ydot, cache = forward_with_cache(model, b.inputs, tangent=use_dp)
        n = y.size
        g_y = g_ydot = None
        if use_d:
            r = y - b.labels
            l_d = float(np.mean(r * r))
            g_y = weights.lambda_d * 2.0 * r / n
        if use_dp:
            rp = ydot - b.f_labels(component)
            l_dp = float(np.mean(rp * rp))
            g_ydot = weights.lambda_dp * 2.0 * rp / n
        backward(model, cache, g_y, g_ydot, out=grad)

    if use_cp:
        b = batches.collocation
        y, ydot, cache = forward_with_cache(model, b.inputs, tangent=True)
        r = ydot - component.rhs(b.t, y)
        l_cp = float(np.mean(r * r))
        g_ydot = weights.lambda_cp * 2.0 * r / r.size
        # f depends on x_hat, so the residual gradient flows into the primal output too.
        g_y = -component.rhs_vjp(b.t, y, g_ydot)
        backward(model, cache, g_y, g_ydot, out=grad)

    if use_ic:
        b = batches.ic
        y, _, cache = forward_with_cache(model, b.inputs, tangent=False)
        r = y - b.labels
        l_ic = float(np.mean(r * r))
        backward(model, cache, weights.lambda_ic * 2.0 * r / r.size, None, out=grad)

    terms = (l_d, l_dp, l_cp, l_ic)
    for name, v in zip(("L_data", "L_physics_data", "L_physics_col", "L_ic"), terms):
        if v is not None:
            _check_finite(v, name)
    total = sum(w * v for w, v in zip(weights.as_tuple(), terms) if v is not None)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteLoss("gradient is not finite")
    return LossBreakdown(*terms, total=total), grad


# ---------------------------------------------------------------- optimizers


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and Adam moments must have the same shape")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


@dataclass
class LbfgsState:
    memory: int = 10
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    loss: float | None = None
    grad: np.ndarray | None = None
    n_evals: int = 0


def _cubic_min(a1, f1, g1, a2, f2, g2):
    """Minimizer of the cubic through two points with slopes, or None."""
    if a1 == a2:
        return None
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (a1 - a2)
    disc = d1 * d1 - g1 * g2
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), a2 - a1)
    denom = g2 - g1 + 2.0 * d2
    if denom == 0:
        return None
    return a2 - (a2 - a1) * (g2 + d2 - d1) / denom


def strong_wolfe(fun, x, f0, g0, direction, alpha0, c1=1e-4, c2=0.9, max_evals=20):
    """Bracketing + zoom line search for the strong Wolfe conditions.

    Returns ``(alpha, f, g, n_evals)``.  Raises :class:`LineSearchFailed` when
    no acceptable step is found within ``max_evals`` function evaluations.
    """
    dg0 = float(g0 @ direction)
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = fun(x + a * direction)
        return f, g, float(g @ direction)

    def zoom(lo, hi):
        a_lo, f_lo, g_lo, dg_lo = lo
        a_hi, f_hi, _, dg_hi = hi
        while evals < max_evals:
            left, right = min(a_lo, a_hi), max(a_lo, a_hi)
            width = right - left
            a = _cubic_min(a_lo, f_lo, dg_lo, a_hi, f_hi, dg_hi)
            if a is None or not (left + 0.1 * width <= a <= right - 0.1 * width):
                a = left + 0.5 * width
            f, g, dg = phi(a)
            if not math.isfinite(f) or f > f0 + c1 * a * dg0 or f >= f_lo:
                a_hi, f_hi, dg_hi = a, f if math.isfinite(f) else np.inf, dg
            else:
                if abs(dg) <= -c2 * dg0:
                    return a, f, g
                if dg * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, dg_hi = a_lo, f_lo, dg_lo
                a_lo, f_lo, g_lo, dg_lo = a, f, g, dg
        raise LineSearchFailed(f"no strong-Wolfe step after {evals} evaluations")

    prev = (0.0, f0, g0, dg0)
    a = alpha0
    while evals < max_evals:
        f, g, dg = phi(a)
        if not math.isfinite(f):
            a, f, g = zoom(prev, (a, np.inf, None, 0.0))
            return a, f, g, evals
        if f > f0 + c1 * a * dg0 or (evals > 1 and f >= prev[1]):
            a, f, g = zoom(prev, (a, f, g, dg))
            return a, f, g, evals
        if abs(dg) <= -c2 * dg0:
            return a, f, g, evals
        if dg >= 0:
            a, f, g = zoom((a, f, g, dg), prev)
            return a, f, g, evals
        prev = (a, f, g, dg)
        a *= 4.0
    raise LineSearchFailed(f"no strong-Wolfe step after {evals} evaluations")


def lbfgs_step(params, evaluator, state, lr=1.0, c1=1e-4, c2=0.9, max_evals=20):
    """One L-BFGS iteration (two-loop recursion + strong-Wolfe line search).

    ``evaluator(params) -> (loss, grad)`` must be pure.  Returns the new
    parameter vector and updates ``state`` in place.
    """
    if state.grad is None:
        state.loss, state.grad = evaluator(params)
        state.n_evals += 1
    g = state.grad
    if not np.any(g):
        return params.copy()

    q = g.copy()
    alphas = []
    for s, y in zip(reversed(state.s), reversed(state.y)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    if state.s:
        s, y = state.s[-1], state.y[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(zip(state.s, state.y), reversed(alphas)):
        b = rho * float(y @ q)
        q += s * (a - b)
    direction = -q

    if not state.s or float(direction @ g) >= 0:
        direction = -g
        state.s.clear()
        state.y.clear()
        alpha0 = min(1.0, 1.0 / float(np.abs(g).sum())) * lr
    else:
        alpha0 = lr

    alpha, f_new, g_new, n = strong_wolfe(evaluator, params, state.loss, g, direction, alpha0, c1, c2, max_evals)
    state.n_evals += n
    step = alpha * direction
    y_vec = g_new - g
    if float(step @ y_vec) > 1e-10 * float(step @ step) ** 0.5 * float(y_vec @ y_vec) ** 0.5:
        state.s.append(step)
        state.y.append(y_vec)
        if len(state.s) > state.memory:
            state.s.pop(0)
            state.y.pop(0)
    else:
        # Curvature condition failed: next iteration restarts from steepest descent.
        state.s.clear()
        state.y.clear()
    state.loss, state.grad = f_new, g_new
    return params + step


# ---------------------------------------------------------------- training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 750
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int | None = None
    early_stopping: bool = True
    patience: int = 50
    min_delta: float = 1e-7
    weights: LossWeights = REFERENCE_WEIGHTS
    seed: int = 0
    lbfgs_memory: int = 10
    divergence_factor: float = 1e6
    limit_aware_residual: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "lbfgs"):
            raise ValueError(f"optimizer must be 'adam' or 'lbfgs', got {self.optimizer!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["weights"] = list(self.weights.as_tuple())
        return d


@dataclass
class EpochRecord:
    epoch: int
    l_data: float | None
    l_physics_data: float | None
    l_physics_col: float | None
    l_ic: float | None
    total: float
    val_mse: float | None
    wall_ms: float


HISTORY_COLUMNS = ("epoch", "l_data", "l_physics_data", "l_physics_col", "l_ic", "total", "val_mse", "wall_ms")


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int | None
    stopped_epoch: int


def history_to_csv(history):
    def fmt(v):
        return "" if v is None else repr(v)

    lines = [",".join(HISTORY_COLUMNS)]
    for rec in history:
        lines.append(",".join(fmt(getattr(rec, c)) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


def _mean_breakdown(parts, subs, weights):
    """Epoch summary of mini-batch losses: each term is averaged over the
    sub-batches that carried it, weighted by their point counts."""
    sources = (lambda b: b.data, lambda b: b.data, lambda b: b.collocation, lambda b: b.ic)
    terms = []
    for k, source in enumerate(sources):
        pairs = [(p.terms()[k], len(source(b))) for p, b in zip(parts, subs) if p.terms()[k] is not None]
        if not pairs:
            terms.append(None)
            continue
        values, sizes = zip(*pairs)
        terms.append(float(np.dot(values, sizes) / sum(sizes)))
    total = sum(w * v for w, v in zip(weights.as_tuple(), terms) if v is not None)
    return LossBreakdown(*terms, total=total)


def _drop_unweighted(batches, weights):
    # Sources without a weighted term would only produce empty mini-batches.
    return Batches(
        batches.data if weights.lambda_d > 0 or weights.lambda_dp > 0 else None,
        batches.collocation if weights.lambda_cp > 0 else None,
        batches.ic if weights.lambda_ic > 0 else None,
    )


def _minibatches(batches, batch_size, rng):
    n_data = len(batches.data) if batches.data is not None else 0
    n_col = len(batches.collocation) if batches.collocation is not None else 0
    n_batches = max(1, math.ceil(max(n_data, n_col) / batch_size))
    perm_d = rng.permutation(n_data)
    perm_c = rng.permutation(n_col)
    perm_i = rng.permutation(len(batches.ic)) if batches.ic is not None else None
    out = []
    for k in range(n_batches):
        d = np.array_split(perm_d, n_batches)[k]
        c = np.array_split(perm_c, n_batches)[k]
        i = np.array_split(perm_i, n_batches)[k] if perm_i is not None else None
        out.append(
            Batches(
                batches.data.take(d) if n_data and len(d) else None,
                batches.collocation.take(c) if n_col and len(c) else None,
                batches.ic.take(i) if i is not None and len(i) else None,
            )
        )
    return out


def train(config, datasets, component, model, callback=None):
    """Optimize ``model`` (a copy is trained; the argument is not modified).

    ``datasets`` is a :class:`~pspinn.dataset.SplitDataset` whose ``train``
    split is already thinned.  Validation MSE is tracked after every epoch;
    with early stopping the best-validation parameters are restored.
    """
    if datasets.train is None or len(datasets.train) == 0:
        raise ValueError("training split is empty")
    model = model.copy()
    if config.limit_aware_residual and component.limits:
        component = LimitedResidual(component)
    batches = _drop_unweighted(Batches.from_points(datasets.train, datasets.collocation), config.weights)
    if batches.data is not None and (config.weights.lambda_dp > 0):
        batches.data.f_labels(component)
    val = Batch.from_points(datasets.validation) if datasets.validation is not None and len(datasets.validation) else None
    weights = config.weights
    rng = np.random.default_rng(config.seed)

    def evaluator(p):
        model.params[...] = p
        bd, g = loss_and_grad(model, component, batches, weights)
        evaluator.last = bd
        return bd.total, g

    adam = AdamState.zeros_like(model.params)
    lbfgs = LbfgsState(memory=config.lbfgs_memory)
    history = []
    initial_total = None
    best_val, best_epoch, best_params = math.inf, None, None
    significant_best = math.inf
    since_improvement = 0
    epoch = 0

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        try:
            if config.optimizer == "adam":
                subs = [batches] if config.batch_size is None else _minibatches(batches, config.batch_size, rng)
                parts = []
                for sub in subs:
                    bd, grad = loss_and_grad(model, component, sub, weights)
                    new, adam = adam_step(model.params, grad, adam, config.learning_rate)
                    model.params[...] = new
                    parts.append(bd)
                bd = parts[0] if len(parts) == 1 else _mean_breakdown(parts, subs, weights)
            else:
                if lbfgs.grad is None:
                    lbfgs.loss, lbfgs.grad = evaluator(model.params.copy())
                bd = evaluator.last
                new = lbfgs_step(model.params.copy(), evaluator, lbfgs, lr=config.learning_rate)
                model.params[...] = new
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"epoch {epoch}: {exc}", epoch=epoch) from exc

        if initial_total is None:
            initial_total = bd.total
        if bd.total > config.divergence_factor * initial_total:
            raise OptimizerDiverged(
                f"epoch {epoch}: loss {bd.total:.3e} exceeds {config.divergence_factor:g}x initial {initial_total:.3e}"
            )
        if not np.all(np.isfinite(model.params)):
            raise NonFiniteLoss(f"epoch {epoch}: parameters became non-finite", epoch=epoch)

        val_mse = loss_data(model, val) if val is not None else None
        history.append(EpochRecord(epoch, *bd.terms(), bd.total, val_mse, (time.perf_counter() - start) * 1e3))
        if callback is not None:
            callback(history[-1])

        if val_mse is None:
            continue
        if val_mse < best_val:
            best_val, best_epoch, best_params = val_mse, epoch, model.params.copy()
        if val_mse < significant_best - config.min_delta:
            significant_best = val_mse
            since_improvement = 0
        else:
            since_improvement += 1
            if config.early_stopping and since_improvement > config.patience:
                break

    if config.early_stopping and best_params is not None:
        model.params[...] = best_params
    return TrainResult(model, history, best_epoch, epoch)


def evaluate_terms(model, component, batches):
    """All four unweighted terms (``None`` where the batch is missing)."""
    return (
        loss_data(model, batches.data) if batches.data is not None else None,
        loss_physics_data(model, component, batches.data) if batches.data is not None else None,
        loss_physics_col(model, component, batches.collocation) if batches.collocation is not None else None,
        loss_ic(model, batches.ic) if batches.ic is not None else None,
    )


def suggest_weights(terms):
    """Power-of-ten balancing of each physics/IC term against ``L_data``."""
    import warnings

    l_data = terms[0]
    suggestion = [1.0]
    for name, value in zip(("lambda_dp", "lambda_cp", "lambda_ic"), terms[1:]):
        if value is None or value == 0 or l_data is None or l_data == 0:
            warnings.warn(f"{name}: loss term evaluates to zero, suggesting weight 1", ZeroLossTerm, stacklevel=2)
            suggestion.append(1.0)
        else:
            suggestion.append(10.0 ** round(math.log10(l_data / value)))
    return LossWeights(*suggestion)


def calibrate_loss_weights(pilot_config, datasets, component, model):
    """Data-only pilot run followed by power-of-ten weight balancing.

    Returns ``(suggested_weights, unweighted_terms, pilot_result)``.
    """
    if pilot_config.epochs < 1:
        raise ValueError("pilot epochs must be >= 1")
    cfg = TrainConfig(**{**pilot_config.__dict__, "weights": DATA_ONLY})
    result = train(cfg, datasets, component, model)
    batches = Batches.from_points(datasets.train, datasets.collocation)
    terms = evaluate_terms(result.model, component, batches)
    return suggest_weights(terms), terms, result
