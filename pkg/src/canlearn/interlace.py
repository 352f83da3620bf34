"""Spectral feasibility tests for causal abstractions between Gaussian measures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from canlearn.errors import InvalidInput, ShapeError
from canlearn.model import GaussianMeasure

DEFAULT_INTERLACE_TOL = 1e-9


@dataclass(frozen=True)
class Violation:
    index: int  # 1-based position i in the interlacing chain
    bound: Literal["lower", "upper"]
    low_value: float  # lambda_i
    high_value: float  # kappa_i
    upper_value: float  # lambda_{i + l - h}


@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    first_violation: Violation | None = None

    def __bool__(self) -> bool:
        return self.feasible


def check_interlacing(
    low: GaussianMeasure, high: GaussianMeasure, tol: float = DEFAULT_INTERLACE_TOL
) -> FeasibilityVerdict:
    """Test ``lambda_i <= kappa_i <= lambda_{i+l-h}`` for all ``i``.

    Both spectra are ascending and include zero eigenvalues, so the test also
    applies to semidefinite covariances.  ``tol`` is relative to the largest
    eigenvalue of ``low``.
    """
    l, h = low.dim, high.dim
    if l <= h:
        raise ShapeError(f"low-level dimension {l} must exceed high-level dimension {h}")
    if tol < 0:
        raise InvalidInput("tol must be nonnegative")
    lam = low.eig.eigenvalues
    kap = high.eig.eigenvalues
    slack = tol * max(abs(lam[-1]), np.finfo(float).tiny)
    for i in range(h):
        lo, hi = lam[i], lam[i + l - h]
        if kap[i] < lo - slack:
            return FeasibilityVerdict(False, Violation(i + 1, "lower", lo, kap[i], hi))
        if kap[i] > hi + slack:
            return FeasibilityVerdict(False, Violation(i + 1, "upper", lo, kap[i], hi))
    return FeasibilityVerdict(True)


def shared_nonzero_spectra(measures: Sequence[GaussianMeasure], rel_tol: float = 1e-6) -> bool:
    """True iff all measures have equal rank and matching nonzero eigenvalues."""
    if len(measures) < 2:
        raise InvalidInput("need at least two measures")
    ranks = {m.rank for m in measures}
    if len(ranks) != 1:
        return False
    k = ranks.pop()
    if k == 0:
        return True
    spectra = np.array([m.eig.eigenvalues[::-1][:k] for m in measures])
    spread = spectra.max(axis=0) - spectra.min(axis=0)
    return bool(spread.max() <= rel_tol * spectra[:, 0].max())
