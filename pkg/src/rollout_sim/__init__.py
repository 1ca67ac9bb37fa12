"""Simulation and analysis of two-stage staggered rollout experiments under network interference."""

from .clustering import Clustering, cut_edges, grid_clustering, singletons
from .design import DesignKind, DesignSpec, sample
from .estimators import h_coeffs, pi_two_stage
from .netgraph import InterferenceGraph, lattice
from .outcomes import CoefficientModel, SymmetricSynthModel

__version__ = "0.1.0"

__all__ = [
    "Clustering",
    "CoefficientModel",
    "DesignKind",
    "DesignSpec",
    "InterferenceGraph",
    "SymmetricSynthModel",
    "cut_edges",
    "grid_clustering",
    "h_coeffs",
    "lattice",
    "pi_two_stage",
    "sample",
    "singletons",
]
