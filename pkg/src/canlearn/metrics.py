"""Evaluation metrics for learned abstractions and networks."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from canlearn.errors import MissingMap, RankMismatchWarning, ShapeError, StructureMismatch
from canlearn.model import AbstractionStructure, CanGraph, GaussianMeasure, StiefelMap
from canlearn.numerics import DEFAULT_RANK_TOL, numerical_rank, sym_eig

ZERO_TOL = 1e-6


@dataclass(frozen=True)
class LocalEval:
    kl: float
    frob_dist: float
    f1: float
    constructive: bool


def _positive_part(sigma: np.ndarray):
    eig = sym_eig(sigma)
    w, u = eig.eigenvalues, eig.eigenvectors
    cutoff = DEFAULT_RANK_TOL * max(np.abs(w).max(), np.finfo(float).eps)
    keep = w > cutoff
    return w[keep], u[:, keep]


def gaussian_kl(embedding: np.ndarray, sigma_low: np.ndarray, sigma_high: np.ndarray, rank_high: int | None = None) -> float:
    """KL between ``N(0, Sigma_h)`` and the pushforward ``N(0, Mᵀ Sigma_l M)``.

    Uses the pseudoinverse and generalized determinant so semidefinite
    covariances are handled; no factor ½ is applied.
    """
    m = np.asarray(embedding, dtype=float)
    pushed = m.T @ np.asarray(sigma_low, dtype=float) @ m
    pushed = 0.5 * (pushed + pushed.T)
    w_m, u_m = _positive_part(pushed)
    w_h, _ = _positive_part(sigma_high)
    if rank_high is None:
        rank_high = w_h.size
    if w_m.size != rank_high:
        warnings.warn(
            f"pushforward rank {w_m.size} differs from target rank {rank_high}", RankMismatchWarning, stacklevel=2
        )
    pinv = (u_m / w_m) @ u_m.T
    value = float(np.trace(pinv @ sigma_high)) + float(np.sum(np.log(w_m))) - float(np.sum(np.log(w_h))) - rank_high
    # clamp rounding noise below zero
    return max(value, 0.0)


def kl_divergence(smap: StiefelMap, low: GaussianMeasure, high: GaussianMeasure) -> float:
    if smap.shape != (low.dim, high.dim):
        raise ShapeError(f"map shape {smap.shape} does not match measures ({low.dim}, {high.dim})")
    return gaussian_kl(smap.v, low.covariance, high.covariance, high.rank)


def smoothness_energy(graph: CanGraph) -> float:
    total = 0.0
    for e in graph.edges:
        if e.map is None:
            raise MissingMap(f"edge ({e.low}, {e.high}) has no map")
        total += kl_divergence(e.map, graph.measures[e.low], graph.measures[e.high])
    return total


def frobenius_up_to_sign(estimate: StiefelMap, truth: StiefelMap) -> float:
    """Relative Frobenius distance after flipping each estimated column toward the truth."""
    if estimate.shape != truth.shape:
        raise ShapeError(f"shapes differ: {estimate.shape} vs {truth.shape}")
    if not estimate.structure.same_as(truth.structure):
        raise StructureMismatch("estimate and truth use different structures")
    signs = np.where(np.sum(estimate.v * truth.v, axis=0) < 0, -1.0, 1.0)
    return float(np.linalg.norm(estimate.v * signs - truth.v) / np.linalg.norm(truth.v))


def predicted_support(estimate: StiefelMap, zero_tol: float = ZERO_TOL) -> np.ndarray:
    return np.abs(estimate.v) > zero_tol


def f1_structure(estimate: StiefelMap, truth_structure: AbstractionStructure, zero_tol: float = ZERO_TOL) -> float:
    pred = predicted_support(estimate, zero_tol)
    true = truth_structure.b > 0
    if pred.shape != true.shape:
        raise ShapeError(f"shapes differ: {pred.shape} vs {true.shape}")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def constructiveness(estimate: StiefelMap, zero_tol: float = ZERO_TOL) -> bool:
    pred = predicted_support(estimate, zero_tol)
    return bool(np.all(pred.sum(axis=1) <= 1) and np.all(pred.sum(axis=0) >= 1))


def evaluate_local(
    estimate: StiefelMap, truth: StiefelMap, low: GaussianMeasure, high: GaussianMeasure, zero_tol: float = ZERO_TOL
) -> LocalEval:
    return LocalEval(
        kl=kl_divergence(estimate, low, high),
        frob_dist=frobenius_up_to_sign(estimate, truth),
        f1=f1_structure(estimate, truth.structure, zero_tol),
        constructive=constructiveness(estimate, zero_tol),
    )


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """First quartile, median and third quartile.

    Quantiles interpolate linearly between order statistics: for sorted
    ``x_0 <= ... <= x_{n-1}`` the ``q``-quantile sits at position ``q (n-1)``.
    """
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        return (math.nan, math.nan, math.nan)
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    return float(q1), float(med), float(q3)


def rank_of(sigma: np.ndarray) -> int:
    return numerical_rank(sym_eig(sigma).eigenvalues)
