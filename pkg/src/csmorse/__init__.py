"""Critical points, strata and fibers of max/min selections of smooth functions on manifolds."""

from .csfun import CSFunction, active_set, stratum_of, validate_cs
from .expr import ExprDomainError, ExprSyntaxError, eval_jet2, parse
from .geometry import Manifold, project_to_manifold, sample_points, sphere, tangent_basis
from .nonsmooth import classify_handle, criticality, min_norm_in_hull, nondegeneracy
from .search import SearchConfig, critical_values, find_critical_points
from .strata import fiber_census, handle_census, stratum_census, trisection_check

__version__ = "0.1.0"

__all__ = [
    "CSFunction", "ExprDomainError", "ExprSyntaxError", "Manifold", "SearchConfig",
    "active_set", "classify_handle", "critical_values", "criticality", "eval_jet2",
    "fiber_census", "find_critical_points", "handle_census", "min_norm_in_hull",
    "nondegeneracy", "parse", "project_to_manifold", "sample_points", "sphere",
    "stratum_census", "stratum_of", "tangent_basis", "trisection_check", "validate_cs",
]
