"""Kantorovich-Rubinstein bounds between Poisson and Markov-modulated point processes.

Modules: ``config`` (configurations and metrics), ``simulate`` (samplers and
CTMC models), ``engine`` (exact finite-carrier OU engine), ``malliavin``
(Girsanov densities and Monte Carlo OU operators), ``bounds`` (the transport
bounds) and ``transport`` (empirical and exact transport costs).
"""

from .bounds import (BoundReport, OptimizeReport, asymptotic_bound, burstiness, mean_rate,
                     mmpp_bound_mc, optimize_lambda, poisson_bound_closed_form, resolvent_bound)
from .config import (Configuration, GroundMetricSpec, d1_distance, d2_distance,
                     rademacher_constant)
from .engine import Engine, FiniteCarrierModel, chaos_eigencheck
from .malliavin import GirsanovDensity, girsanov_density
from .rng import substream
from .simulate import (CtmcModel, IntensityFunction, Window, load_model, sample_mmpp,
                       sample_poisson_inhomogeneous, stationary_distribution, validate_generator)
from .transport import (DiscreteLaw, EmpiricalLaw, assignment_solve, cost_matrix,
                        empirical_rubinstein, engine_transport, exact_kantorovich)

__version__ = "0.1.0"

__all__ = [
    "BoundReport", "Configuration", "CtmcModel", "DiscreteLaw", "EmpiricalLaw", "Engine",
    "FiniteCarrierModel", "GirsanovDensity", "GroundMetricSpec", "IntensityFunction",
    "OptimizeReport", "Window", "assignment_solve", "asymptotic_bound", "burstiness",
    "chaos_eigencheck", "cost_matrix", "d1_distance", "d2_distance", "empirical_rubinstein",
    "engine_transport", "exact_kantorovich", "girsanov_density", "load_model", "mean_rate",
    "mmpp_bound_mc", "optimize_lambda", "poisson_bound_closed_form", "rademacher_constant",
    "resolvent_bound", "sample_mmpp", "sample_poisson_inhomogeneous", "stationary_distribution",
    "substream", "validate_generator",
]
