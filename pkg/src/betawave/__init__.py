"""Quasi-periodic forced traveling waves for the beta-plane vorticity equation.

Truncated-lattice constructions at desk scale: approximate solutions,
reducibility of the linearized operator and a Nash-Moser driver, with
a pseudo-spectral integrator for independent checks.
"""

from .lattice import Lattice, MomentumMap, TravelingField, sobolev_norm
from .opalg import LatticeOperator, decay_norm
from .model import ConfigError, ProblemConfig, functional_F, linearized_L, nonlinearity
from .diophantine import ResonanceError, ResonancePredicate, admissible, measure_fraction
from .approx import build_v_app, scaling_study, solve_linear
from .reduce import invert_linearized, reduce_linearized, straighten_transport
from .nashmoser import nash_moser_solve, theorem_sweep
from .validate import stability_probe, timestep, validate_solution

__version__ = "0.1.0"

__all__ = [
    "Lattice", "MomentumMap", "TravelingField", "sobolev_norm", "LatticeOperator", "decay_norm",
    "ConfigError", "ProblemConfig", "functional_F", "linearized_L", "nonlinearity",
    "ResonanceError", "ResonancePredicate", "admissible", "measure_fraction",
    "build_v_app", "scaling_study", "solve_linear",
    "invert_linearized", "reduce_linearized", "straighten_transport",
    "nash_moser_solve", "theorem_sweep", "stability_probe", "timestep", "validate_solution",
]
