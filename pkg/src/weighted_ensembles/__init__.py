"""Weighted integrable systems: cohomological solver, angular conjugacy and ensemble convergence."""

from .errors import *  # noqa: F401,F403
from .model import REFERENCE_SYSTEMS, SystemModel, build_model, sys_a, sys_b, sys_c, unweighted
from .torus_fourier import TorusSeries

__version__ = "0.1.0"
