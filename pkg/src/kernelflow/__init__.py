"""kernelflow: training-time kernel and prediction dynamics of wide networks.

Solvers for the self-consistent evolution of feature kernels, gradient
kernels, response functions, and network outputs in the feature-learning
(mean-field) regime, with closed-form deep-linear dynamics, lazy-limit
and perturbative baselines, and a finite-width reference MLP for
validation.
"""

from .backends import BACKEND_NAME
from .errors import KernelFlowError
from .gp import gp_sample
from .grids import SampleSet, TimeGrid, Trajectory
from .kernels import Kernel, alignment, load_kernel, save_kernel
from .ntk import integrate_predictions, ntk_assemble
from .saddle import DmftConfig, DmftState, dmft_solve, representer_check

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "DmftConfig",
    "DmftState",
    "Kernel",
    "KernelFlowError",
    "SampleSet",
    "TimeGrid",
    "Trajectory",
    "alignment",
    "dmft_solve",
    "gp_sample",
    "integrate_predictions",
    "load_kernel",
    "ntk_assemble",
    "representer_check",
    "save_kernel",
    "__version__",
]
