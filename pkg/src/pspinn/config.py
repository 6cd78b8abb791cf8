"""Run configuration: YAML file + ``--set`` overrides on top of defaults.

Precedence is flag > file > default.  Seeds that are left ``null`` are
derived from the global ``seed`` so a single number pins a whole run.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml

from .components import LinearModel, SmParams, SynchronousMachine, bundled_params_path, load_params
from .errors import ConfigError, PinnError
from .sampling import InputDomain
from .solver import SolveConfig
from .training import LossWeights, TrainConfig

DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "component": {"name": "sm9", "params_file": None, "overrides": {}, "matrix": None},
    "domain": None,
    "dataset": {
        "n_trajectories": 500,
        "n_collocation": None,
        "horizon_s": 1.0,
        "dt_s": 0.001,
        "data_stride": 23,
        "collocation_stride": 19,
        "stride_offset": 0,
        "split_ratios": [0.8, 0.1, 0.1],
        "sampling": "lhs",
        "seed_data": None,
        "seed_collocation": None,
        "seed_split": None,
        "binary": True,
    },
    "solver": {"rtol": 1e-7, "atol": 1e-9, "max_step": None, "initial_step": None},
    "network": {
        "hidden_layers": 4,
        "hidden_width": 64,
        "activation": "tanh",
        "normalize_inputs": True,
        "seed": None,
    },
    "training": {
        "epochs": 750,
        "optimizer": "adam",
        "learning_rate": 0.001,
        "batch_size": None,
        "early_stopping": True,
        "patience": 50,
        "min_delta": 1e-7,
        "weights": {"lambda_d": 1.0, "lambda_dp": 0.01, "lambda_cp": 0.001, "lambda_ic": 0.01},
        "lbfgs_memory": 10,
        "limit_aware_residual": False,
        "seed": None,
    },
    "evaluation": {
        "n_overlays": 3,
        "bench_sizes": [1, 50, 500],
        "bench_repeats": 5,
        "bench_seed": None,
    },
}

_SEED_OFFSETS = {
    ("dataset", "seed_data"): 0,
    ("dataset", "seed_collocation"): 1,
    ("dataset", "seed_split"): 2,
    ("network", "seed"): 3,
    ("training", "seed"): 4,
    ("evaluation", "bench_seed"): 5,
}


def bundled_config_path(name="sm9.reference"):
    return Path(__file__).with_name("data") / f"{name}.yaml"


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if isinstance(out.get(key), dict) and key not in ("domain", "overrides"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[key] = _merge(out[key], value, where + ".")
        elif key not in out and path and not path.startswith(("domain", "component.overrides")):
            raise ConfigError(f"{where}: unknown key")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_set(item):
    """``"a.b.c=value"`` -> ``{"a": {"b": {"c": value}}}`` with YAML-typed value."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"--set has an empty key: {item!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {key}: cannot parse value {raw!r}") from exc
    tree = value
    for p in reversed(parts):
        tree = {p: tree}
    return tree


def load_config(path=None, sets=(), seed=None, out_dir=None):
    """Resolve a run configuration to a plain nested dict."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, data)
        cfg["_config_dir"] = str(Path(path).resolve().parent)
    for item in sets:
        cfg = _merge(cfg, parse_set(item))
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    return resolve_seeds(cfg)


def resolve_seeds(cfg):
    try:
        base = int(cfg["seed"])
    except (TypeError, ValueError):
        raise ConfigError(f"seed: expected an integer, got {cfg['seed']!r}") from None
    for (section, key), offset in _SEED_OFFSETS.items():
        if cfg[section].get(key) is None:
            cfg[section][key] = base + offset
    return cfg


def public(cfg):
    """Config without private bookkeeping keys (for hashing and dumps)."""
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def identity(cfg):
    """The part of the config that determines results; the output location is excluded."""
    return {k: v for k, v in public(cfg).items() if k != "out_dir"}


def dump(cfg):
    return yaml.safe_dump(public(cfg), sort_keys=True)


def _get(cfg, dotted):
    node = cfg
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"{dotted}: missing key")
        node = node[p]
    return node


def _number(cfg, dotted, kind=float, positive=False, allow_none=False):
    value = _get(cfg, dotted)
    if value is None and allow_none:
        return None
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{dotted}: expected {kind.__name__}, got {value!r}") from None
    if kind is int and out != value:
        raise ConfigError(f"{dotted}: expected an integer, got {value!r}")
    if positive and not out > 0:
        raise ConfigError(f"{dotted}: must be positive, got {value!r}")
    return out


def build_component(cfg):
    comp = _get(cfg, "component")
    name = comp.get("name")
    if name == "sm9":
        params_file = comp.get("params_file")
        try:
            if params_file:
                p = Path(params_file)
                if not p.is_absolute() and "_config_dir" in cfg:
                    p = Path(cfg["_config_dir"]) / p
                if not p.exists():
                    raise ConfigError(f"component.params_file: {p} does not exist")
                params = load_params(p)
            else:
                params = load_params(bundled_params_path())
            overrides = comp.get("overrides") or {}
            if overrides:
                params = SmParams.from_mapping({**params.__dict__, **overrides})
        except PinnError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"component.params_file: {exc}") from exc
        return SynchronousMachine(params)
    if name == "linear":
        matrix = comp.get("matrix")
        if matrix is None:
            raise ConfigError("component.matrix: required for the linear component")
        try:
            return LinearModel(np.array(matrix, dtype=float))
        except (ValueError, PinnError) as exc:
            raise ConfigError(f"component.matrix: {exc}") from exc
    raise ConfigError(f"component.name: unknown component {name!r} (expected 'sm9' or 'linear')")


def build_domain(cfg, component):
    mapping = cfg.get("domain")
    if not isinstance(mapping, dict):
        raise ConfigError("domain: expected a mapping of state name -> [low, high] or value")
    try:
        return InputDomain.from_mapping(component.state_names, mapping)
    except PinnError as exc:
        raise ConfigError(f"domain: {exc}") from exc


def solve_config(cfg):
    horizon = _number(cfg, "dataset.horizon_s", positive=True)
    max_step = _number(cfg, "solver.max_step", positive=True, allow_none=True)
    try:
        return SolveConfig(
            (0.0, horizon),
            _number(cfg, "solver.rtol", positive=True),
            _number(cfg, "solver.atol", positive=True),
            float("inf") if max_step is None else max_step,
            _number(cfg, "solver.initial_step", positive=True, allow_none=True),
        )
    except PinnError as exc:
        raise ConfigError(f"solver: {exc}") from exc


def dataset_settings(cfg):
    ratios = _get(cfg, "dataset.split_ratios")
    if not isinstance(ratios, (list, tuple)) or len(ratios) != 3:
        raise ConfigError("dataset.split_ratios: expected three numbers")
    n_traj = _number(cfg, "dataset.n_trajectories", int, positive=True)
    n_col = _number(cfg, "dataset.n_collocation", int, allow_none=True)
    return {
        "n_trajectories": n_traj,
        "n_collocation": n_traj if n_col is None else n_col,
        "horizon_s": _number(cfg, "dataset.horizon_s", positive=True),
        "dt_s": _number(cfg, "dataset.dt_s", positive=True),
        "data_stride": _number(cfg, "dataset.data_stride", int, positive=True),
        "collocation_stride": _number(cfg, "dataset.collocation_stride", int, positive=True),
        "stride_offset": _number(cfg, "dataset.stride_offset", int),
        "split_ratios": tuple(float(r) for r in ratios),
        "sampling": str(_get(cfg, "dataset.sampling")),
        "seed_data": _number(cfg, "dataset.seed_data", int),
        "seed_collocation": _number(cfg, "dataset.seed_collocation", int),
        "seed_split": _number(cfg, "dataset.seed_split", int),
        "binary": bool(_get(cfg, "dataset.binary")),
    }


def layer_dims(cfg, state_dim):
    n_hidden = _number(cfg, "network.hidden_layers", int)
    width = _number(cfg, "network.hidden_width", int, positive=True)
    if n_hidden < 0:
        raise ConfigError("network.hidden_layers: must be >= 0")
    return [state_dim + 1] + [width] * n_hidden + [state_dim]


def train_config(cfg):
    w = _get(cfg, "training.weights")
    try:
        weights = LossWeights(
            float(w["lambda_d"]), float(w["lambda_dp"]), float(w["lambda_cp"]), float(w["lambda_ic"])
        )
    except (KeyError, TypeError, ValueError, PinnError) as exc:
        raise ConfigError(f"training.weights: {exc}") from exc
    try:
        return TrainConfig(
            epochs=_number(cfg, "training.epochs", int, positive=True),
            optimizer=str(_get(cfg, "training.optimizer")),
            learning_rate=_number(cfg, "training.learning_rate", positive=True),
            batch_size=_number(cfg, "training.batch_size", int, positive=True, allow_none=True),
            early_stopping=bool(_get(cfg, "training.early_stopping")),
            patience=_number(cfg, "training.patience", int),
            min_delta=_number(cfg, "training.min_delta"),
            weights=weights,
            seed=_number(cfg, "training.seed", int),
            lbfgs_memory=_number(cfg, "training.lbfgs_memory", int, positive=True),
            limit_aware_residual=bool(_get(cfg, "training.limit_aware_residual")),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"training: {exc}") from exc
