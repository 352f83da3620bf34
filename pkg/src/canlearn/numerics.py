"""Dense linear-algebra and boolean-relation primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from canlearn.errors import DegenerateProx, InvalidInput, InvalidMatrix, NotADag

DEFAULT_RANK_TOL = 1e-9
PROX_RANK_TOL = 1e-12


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending.

    Column ``i`` of ``eigenvectors`` pairs with ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def _as_square(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidMatrix(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix(f"{name} has non-finite entries")
    return a


def sym_eig(m) -> SymEig:
    a = _as_square(m)
    scale = max(np.abs(a).max(initial=0.0), np.finfo(float).tiny)
    if np.abs(a - a.T).max(initial=0.0) > 1e-10 * scale:
        raise InvalidMatrix("matrix is not symmetric")
    w, u = np.linalg.eigh(0.5 * (a + a.T))
    return SymEig(w, u)


def numerical_rank(eigenvalues, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count eigenvalues strictly above ``rel_tol`` times the largest magnitude."""
    w = np.asarray(eigenvalues, dtype=float)
    if w.size == 0:
        raise InvalidInput("empty eigenvalue vector")
    if rel_tol <= 0:
        raise InvalidInput("rel_tol must be positive")
    cutoff = rel_tol * max(np.abs(w).max(), np.finfo(float).eps)
    return int(np.count_nonzero(w > cutoff))


def polar_orthogonal_factor(s) -> np.ndarray:
    """Orthogonal factor ``U Wᵀ`` of the thin SVD ``S = U Σ Wᵀ``.

    This is the Frobenius-nearest matrix with orthonormal columns, i.e. the
    projection onto the Stiefel manifold.  Raises :class:`DegenerateProx`
    when ``S`` is (numerically) rank deficient, since the projection is then
    not unique.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] < s.shape[1]:
        raise InvalidMatrix(f"expected a tall matrix, got shape {s.shape}")
    u, sv, wt = np.linalg.svd(s, full_matrices=False)
    if sv.size and not (sv[-1] > PROX_RANK_TOL * sv[0]):
        raise DegenerateProx(f"smallest singular value {sv[-1]:.3e} vs largest {sv[0]:.3e}")
    return u @ wt


def _as_relation(r) -> np.ndarray:
    a = np.asarray(r)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidMatrix(f"relation must be square, got shape {a.shape}")
    return a.astype(bool)


def transitive_closure(r) -> np.ndarray:
    """Smallest transitive relation containing ``r`` (Warshall's algorithm)."""
    c = _as_relation(r).copy()
    for k in range(c.shape[0]):
        c |= np.outer(c[:, k], c[k, :])
    return c


def transitive_reduction(r) -> np.ndarray:
    """Drop every pair ``(i, j)`` that has a witness ``m`` with ``(i, m)`` and ``(m, j)``.

    The input must be a transitively closed DAG relation; for such inputs the
    result is the unique minimal relation with the same closure.
    """
    a = _as_relation(r)
    if np.any(np.diag(transitive_closure(a))):
        raise NotADag("relation contains a cycle")
    ai = a.astype(np.int64)
    implied = (ai @ ai) > 0
    return a & ~implied
