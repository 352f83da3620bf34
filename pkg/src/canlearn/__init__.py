"""Learning consistent causal abstraction networks (CANs) from Gaussian covariances."""

from canlearn.errors import CanLearnError
from canlearn.interlace import check_interlacing, shared_nonzero_spectra
from canlearn.model import (
    AbstractionStructure,
    CanEdge,
    CanGraph,
    GaussianMeasure,
    StiefelMap,
    compose,
    load_dataset,
    save_dataset,
    validate_measure,
)
from canlearn.search import SearchConfig, build_candidates, evaluate_against_truth, learn_can
from canlearn.spectral_solver import SolverConfig, SolverReport, build_problem, solve_edge

__version__ = "0.1.0"

__all__ = [
    "AbstractionStructure",
    "CanEdge",
    "CanGraph",
    "CanLearnError",
    "GaussianMeasure",
    "SearchConfig",
    "SolverConfig",
    "SolverReport",
    "StiefelMap",
    "build_candidates",
    "build_problem",
    "check_interlacing",
    "compose",
    "evaluate_against_truth",
    "learn_can",
    "load_dataset",
    "save_dataset",
    "shared_nonzero_spectra",
    "solve_edge",
    "validate_measure",
]
