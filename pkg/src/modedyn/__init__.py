"""Mixture-of-dynamical-experts toolkit.

Decomposes snapshot data (state, velocity) into K sparse polynomial expert
flows with either constant mixing weights (EM fit) or a state-dependent
neural gate (SGD fit), plus stochastic rollouts, synthetic benchmark
generators, and evaluation metrics.
"""

from .library import PolyLibrary, build_library, design_matrix, expert_velocity, featurize

__all__ = [
    "PolyLibrary",
    "build_library",
    "design_matrix",
    "expert_velocity",
    "featurize",
]

__version__ = "0.1.0"
