"""Safe Bayesian optimization for cascade controller tuning.

The public entry points are :func:`safectrl.optimizers.run_campaign` for a
single seeded campaign and the ``safectrl`` command line tool.
"""

from .benchmarks import get_benchmark
from .control_sim import CascadePlant, ControllerGains, tuning_problem
from .gp import GPState, gp_update, posterior
from .kernels import KernelKind, KernelSpec
from .optimizers import Method, OptimizerConfig, run_campaign, run_repetitions
from .problem import Problem, from_benchmark, from_tuning

__all__ = [
    "CascadePlant",
    "ControllerGains",
    "GPState",
    "KernelKind",
    "KernelSpec",
    "Method",
    "OptimizerConfig",
    "Problem",
    "from_benchmark",
    "from_tuning",
    "get_benchmark",
    "gp_update",
    "posterior",
    "run_campaign",
    "run_repetitions",
    "tuning_problem",
]
