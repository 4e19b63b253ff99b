"""Robust approximation algorithms for almost satisfiable CSP instances."""
from .core import (
    Constraint,
    CSPError,
    Instance,
    Relation,
    evaluate,
    generate_planted,
    normalize_weights,
    opt_bruteforce,
)

__all__ = [
    "Constraint",
    "CSPError",
    "Instance",
    "Relation",
    "evaluate",
    "generate_planted",
    "normalize_weights",
    "opt_bruteforce",
]
__version__ = "0.1.0"
