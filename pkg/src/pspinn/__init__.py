"""Physics-informed neural surrogate for power-system component dynamics.

The package covers the whole pipeline: component models (a 9th-order
synchronous machine with AVR and governor, plus a linear test model), an
adaptive Dormand-Prince integrator for ground truth, Latin Hypercube
sampling of initial conditions, dataset construction, a numpy MLP with
exact forward/reverse derivatives, physics-informed training, evaluation
and a config-driven CLI.
"""

__version__ = "0.1.0"

from .components import SM_STATE_NAMES, LinearModel, SmParams, SynchronousMachine, eval_rhs, load_params
from .errors import ConfigError, MissingArtifact, NumericalError, PinnError
from .nn import MlpModel, forward, init_mlp, load_model, save_model, time_derivative
from .sampling import InputDomain, lhs_sample, sm9_reference_domain
from .solver import SolveConfig, integrate_adaptive, integrate_fixed_rk4, simulate
from .training import REFERENCE_WEIGHTS, LossWeights, TrainConfig, train

__all__ = [
    "SM_STATE_NAMES",
    "ConfigError",
    "InputDomain",
    "LinearModel",
    "LossWeights",
    "MissingArtifact",
    "MlpModel",
    "NumericalError",
    "REFERENCE_WEIGHTS",
    "PinnError",
    "SmParams",
    "SolveConfig",
    "SynchronousMachine",
    "TrainConfig",
    "eval_rhs",
    "forward",
    "init_mlp",
    "integrate_adaptive",
    "integrate_fixed_rk4",
    "lhs_sample",
    "load_model",
    "load_params",
    "save_model",
    "simulate",
    "sm9_reference_domain",
    "time_derivative",
    "train",
]
