"""ADMM with closed-form updates for the per-edge abstraction feasibility problem.

Given ``Sigma_l = A Aᵀ`` and the whitening factor ``W_h = U_h Lambda_h^{-1/2}``
of ``Sigma_h``, an embedding ``M = B ⊙ V`` with orthonormal columns satisfies
``Mᵀ Sigma_l M = Sigma_h`` on the range of ``Sigma_h`` iff
``T = Aᵀ M W_h`` has orthonormal columns.  The splitting

    minimize  ½‖B⊙V − Y + Ψ‖² + ½‖Aᵀ(B⊙V)W_h − T + Υ‖²
    over      V free,  Y ∈ St(l, h),  T ∈ St(r_l, r_h)

is solved by alternating a linear solve for V, two Stiefel projections for Y
and T, and running sums of the primal residuals for the scaled duals Ψ, Υ.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg as sla

from canlearn.errors import DegenerateProx, InvalidInput, RankOrderViolation, ShapeError
from canlearn.metrics import kl_divergence
from canlearn.model import AbstractionStructure, GaussianMeasure, StiefelMap
from canlearn.numerics import DEFAULT_RANK_TOL, PROX_RANK_TOL, polar_orthogonal_factor


@dataclass(frozen=True, eq=False)
class EdgeProblem:
    sigma_low: GaussianMeasure
    sigma_high: GaussianMeasure
    structure: AbstractionStructure
    a_factor: np.ndarray  # l x r_l, A Aᵀ = Sigma_l
    c_factor: np.ndarray  # h x r_h, C Cᵀ = Sigma_h
    c_whiten: np.ndarray  # h x r_h, U_h Lambda_h^{-1/2}
    rows: np.ndarray  # support coordinates in column-major order
    cols: np.ndarray
    k_support: np.ndarray  # rows of (W_h ⊗ A) on the support, |B| x (r_l r_h)
    system_inv: np.ndarray  # (I + K_B K_Bᵀ)^{-1}

    @property
    def r_low(self) -> int:
        return self.a_factor.shape[1]

    @property
    def r_high(self) -> int:
        return self.c_factor.shape[1]

    def embed(self, v: np.ndarray) -> np.ndarray:
        return self.structure.b * v

    def project(self, m: np.ndarray) -> np.ndarray:
        """``Aᵀ M W_h`` for an embedding ``M``."""
        return self.a_factor.T @ m @ self.c_whiten


@dataclass(frozen=True)
class SolverState:
    v: np.ndarray
    y: np.ndarray
    t: np.ndarray
    psi: np.ndarray
    upsilon: np.ndarray
    iter: int = 0


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 1000
    tol: float = 1e-3
    ntrials: int = 10
    seed: int = 0
    kl_report: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise InvalidInput("max_iter must be >= 1")
        if not self.tol > 0:
            raise InvalidInput("tol must be positive")
        if self.ntrials < 1:
            raise InvalidInput("ntrials must be >= 1")


@dataclass
class SolverReport:
    converged: bool
    trial_index: int
    iterations: int
    final_residuals: tuple[float, float, float, float]
    kl: float | None = None
    map: StiefelMap | None = None
    history: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)), repr=False)
    trials_run: int = 0


def _positive_factor(measure: GaussianMeasure, power: float) -> np.ndarray:
    w, u = measure.eig.eigenvalues, measure.eig.eigenvectors
    cutoff = DEFAULT_RANK_TOL * max(np.abs(w).max(), np.finfo(float).eps)
    keep = np.flatnonzero(w > cutoff)[::-1]  # descending eigenvalue order
    return u[:, keep] * w[keep] ** power


def build_problem(low: GaussianMeasure, high: GaussianMeasure, structure: AbstractionStructure) -> EdgeProblem:
    l, h = structure.shape
    if (low.dim, high.dim) != (l, h):
        raise ShapeError(f"structure {structure.shape} does not match measures ({low.dim}, {high.dim})")
    a = _positive_factor(low, 0.5)
    c = _positive_factor(high, 0.5)
    cw = _positive_factor(high, -0.5)
    if c.shape[1] == 0:
        raise InvalidInput("high-level covariance is numerically zero")
    if a.shape[1] < c.shape[1]:
        raise RankOrderViolation(f"rank {a.shape[1]} of low-level covariance < rank {c.shape[1]} of high-level")
    idx = np.flatnonzero(structure.b.ravel(order="F"))
    rows, cols = idx % l, idx // l
    # row (col*l + row) of kron(W, A) is kron(W[col], A[row])
    k_support = np.einsum("kc,kr->kcr", cw[cols], a[rows]).reshape(idx.size, -1)
    system = np.eye(idx.size) + k_support @ k_support.T
    system_inv = sla.cho_solve(sla.cho_factor(system), np.eye(idx.size))
    return EdgeProblem(low, high, structure, a, c, cw, rows, cols, k_support, system_inv)


def _vec(m: np.ndarray) -> np.ndarray:
    return m.ravel(order="F")


def update_v(state: SolverState, problem: EdgeProblem) -> np.ndarray:
    """Closed-form minimizer over the support entries of V."""
    p = problem
    rhs = (state.y - state.psi)[p.rows, p.cols] + p.k_support @ _vec(state.t - state.upsilon)
    v = np.zeros(p.structure.shape)
    v[p.rows, p.cols] = p.system_inv @ rhs
    return v


def update_y(state: SolverState, problem: EdgeProblem) -> np.ndarray:
    return polar_orthogonal_factor(problem.embed(state.v) + state.psi)


def update_t(state: SolverState, problem: EdgeProblem) -> np.ndarray:
    return polar_orthogonal_factor(problem.project(problem.embed(state.v)) + state.upsilon)


def update_duals(state: SolverState, problem: EdgeProblem) -> tuple[np.ndarray, np.ndarray]:
    m = problem.embed(state.v)
    psi = state.psi + (m - state.y)
    upsilon = state.upsilon + (problem.project(m) - state.t)
    return psi, upsilon


def residuals(prev: SolverState, curr: SolverState, problem: EdgeProblem) -> tuple[float, float, float, float]:
    """Primal (Y-split, T-split) and dual (Y-change, T-change) residuals.

    Each Frobenius norm is divided by the square root of its entry count, so
    the stopping rule ``residual <= tol`` is the absolute criterion
    ``‖r‖ <= sqrt(p) * tol`` of standard ADMM practice.
    """
    m = problem.embed(curr.v)
    sy = math.sqrt(curr.y.size)
    st = math.sqrt(curr.t.size)
    return (
        float(np.linalg.norm(m - curr.y)) / sy,
        float(np.linalg.norm(problem.project(m) - curr.t)) / st,
        float(np.linalg.norm(curr.y - prev.y)) / sy,
        float(np.linalg.norm(curr.t - prev.t)) / st,
    )


def step(state: SolverState, problem: EdgeProblem) -> SolverState:
    """One ADMM sweep: V, then Y and T, then the duals."""
    v = update_v(state, problem)
    mid = replace(state, v=v)
    mid = replace(mid, y=update_y(mid, problem), t=update_t(mid, problem))
    psi, upsilon = update_duals(mid, problem)
    return replace(mid, psi=psi, upsilon=upsilon, iter=state.iter + 1)


def initial_state(problem: EdgeProblem, v0: np.ndarray) -> SolverState:
    """Start primal-feasible for the Y-split: ``Y = B⊙V``, ``T = prox(Aᵀ(B⊙V)W)``, zero duals."""
    m = problem.embed(v0)
    t = polar_orthogonal_factor(problem.project(m))
    return SolverState(v=m, y=m.copy(), t=t, psi=np.zeros_like(m), upsilon=np.zeros_like(t))


def random_block_init(structure: AbstractionStructure, rng: np.random.Generator) -> np.ndarray:
    v = structure.b * rng.standard_normal(structure.shape)
    return v / np.linalg.norm(v, axis=0)


def trial_seed(seed: int, edge: tuple[int, int], trial: int) -> int:
    """Stable 64-bit seed for one trial, independent of execution order."""
    payload = f"{int(seed)}:{int(edge[0])}:{int(edge[1])}:{int(trial)}".encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


@dataclass
class _TrialResult:
    converged: bool
    iterations: int
    residuals: tuple[float, float, float, float]
    state: SolverState | None
    history: np.ndarray


def _fast_polar(s: np.ndarray) -> np.ndarray:
    u, sv, wt = np.linalg.svd(s, full_matrices=False)
    if not (sv[-1] > PROX_RANK_TOL * sv[0]):
        raise DegenerateProx(f"smallest singular value {sv[-1]:.3e} vs largest {sv[0]:.3e}")
    return u @ wt


def run_trial(problem: EdgeProblem, v0: np.ndarray, max_iter: int, tol: float) -> _TrialResult:
    """Iterate from ``v0`` until all four residuals are ``<= tol`` or ``max_iter``.

    Same arithmetic as repeated :func:`step` calls, fused so the support
    entries of V are projected once per sweep.
    """
    inf = (math.inf,) * 4
    history = np.empty((max_iter, 4))
    try:
        state = initial_state(problem, v0)
    except DegenerateProx:
        return _TrialResult(False, 0, inf, None, history[:0])
    p = problem
    rows, cols, ks, g = p.rows, p.cols, p.k_support, p.system_inv
    kt = ks.T
    t_shape = state.t.shape
    sy, st = math.sqrt(state.y.size), math.sqrt(state.t.size)
    y, t, psi, ups = state.y, state.t, state.psi, state.upsilon
    v = state.v
    res = inf
    for k in range(max_iter):
        vals = g @ ((y - psi)[rows, cols] + ks @ (t - ups).ravel(order="F"))
        v = np.zeros_like(y)
        v[rows, cols] = vals
        w = (kt @ vals).reshape(t_shape, order="F")
        try:
            y_new = _fast_polar(v + psi)
            t_new = _fast_polar(w + ups)
        except DegenerateProx:
            return _TrialResult(False, k, inf, None, history[:k])
        ry = v - y_new
        rt = w - t_new
        psi = psi + ry
        ups = ups + rt
        dy = y_new - y
        dt = t_new - t
        res = (
            math.sqrt(float(np.vdot(ry, ry))) / sy,
            math.sqrt(float(np.vdot(rt, rt))) / st,
            math.sqrt(float(np.vdot(dy, dy))) / sy,
            math.sqrt(float(np.vdot(dt, dt))) / st,
        )
        history[k] = res
        y, t = y_new, t_new
        if max(res) <= tol:
            final = SolverState(v, y, t, psi, ups, k + 1)
            return _TrialResult(True, k + 1, res, final, history[: k + 1])
    return _TrialResult(False, max_iter, res, SolverState(v, y, t, psi, ups, max_iter), history)


TRIAL_BATCH = 10  # first block; small so easy edges stop early
TRIAL_BLOCK = 45  # later blocks; larger to amortize per-iteration overhead


def trial_blocks(ntrials: int) -> list[range]:
    """Fixed partition of trial indices into vectorized blocks."""
    blocks, start, size = [], 0, TRIAL_BATCH
    while start < ntrials:
        blocks.append(range(start, min(start + size, ntrials)))
        start += size
        size = TRIAL_BLOCK
    return blocks


def run_trials(problem: EdgeProblem, v0s: np.ndarray, max_iter: int, tol: float) -> list[_TrialResult]:
    """Run independent trials side by side, one per leading slice of ``v0s``.

    Every trial follows exactly the :func:`run_trial` recursion.  Iteration
    stops as soon as the lowest-index trial that will ever converge has done
    so; trials still running at that point are reported as not converged.
    """
    p = problem
    n = v0s.shape[0]
    l, h = p.structure.shape
    rl, rh = p.r_low, p.r_high
    rows, cols, ks, g = p.rows, p.cols, p.k_support, p.system_inv
    sy, st = math.sqrt(l * h), math.sqrt(rl * rh)
    inf = (math.inf,) * 4

    ks_t = np.ascontiguousarray(ks.T)

    def rowwise(x, m):
        # stacked 1-row products keep each trial's arithmetic independent of the batch
        return np.matmul(x[:, None, :], m)[:, 0, :]

    m0 = p.structure.b * v0s
    w0 = rowwise(m0[:, rows, cols], ks).reshape(n, rh, rl).transpose(0, 2, 1)
    u, sv, wt = np.linalg.svd(w0, full_matrices=False)
    alive = sv[:, -1] > PROX_RANK_TOL * sv[:, 0]
    y = m0.copy()
    t = u @ wt
    psi = np.zeros_like(y)
    ups = np.zeros_like(t)
    v = m0.copy()
    history = np.full((n, max_iter, 4), np.nan)
    done_at = np.zeros(n, dtype=int)  # iteration count when a trial stopped
    converged = np.zeros(n, dtype=bool)
    running = alive.copy()
    final_res = [inf] * n

    k = 0
    while k < max_iter and running.any():
        # stop once the smallest converged index has no running predecessor
        if converged.any():
            first = int(np.argmax(converged))
            if not running[:first].any():
                break
        rhs = (y - psi)[:, rows, cols] + rowwise((t - ups).transpose(0, 2, 1).reshape(n, -1), ks_t)
        vals = rowwise(rhs, g)
        v_new = np.zeros_like(y)
        v_new[:, rows, cols] = vals
        w = rowwise(vals, ks).reshape(n, rh, rl).transpose(0, 2, 1)
        uy, sy_v, wty = np.linalg.svd(v_new + psi, full_matrices=False)
        ut, st_v, wtt = np.linalg.svd(w + ups, full_matrices=False)
        ok = (sy_v[:, -1] > PROX_RANK_TOL * sy_v[:, 0]) & (st_v[:, -1] > PROX_RANK_TOL * st_v[:, 0])
        y_new = uy @ wty
        t_new = ut @ wtt
        ry = v_new - y_new
        rt = w - t_new
        res = np.stack(
            [
                np.sqrt(np.sum(ry * ry, axis=(1, 2))) / sy,
                np.sqrt(np.sum(rt * rt, axis=(1, 2))) / st,
                np.sqrt(np.sum((y_new - y) ** 2, axis=(1, 2))) / sy,
                np.sqrt(np.sum((t_new - t) ** 2, axis=(1, 2))) / st,
            ],
            axis=1,
        )
        degenerate = running & ~ok
        running &= ok
        done_at[degenerate] = k
        for i in np.flatnonzero(degenerate):
            final_res[i] = inf
        upd = running.copy()
        history[upd, k] = res[upd]
        sel3 = upd[:, None, None]
        v = np.where(sel3, v_new, v)
        y = np.where(sel3, y_new, y)
        t = np.where(sel3, t_new, t)
        psi = np.where(sel3, psi + ry, psi)
        ups = np.where(sel3, ups + rt, ups)
        hit = upd & (res.max(axis=1) <= tol)
        converged |= hit
        running &= ~hit
        done_at[upd] = k + 1
        for i in np.flatnonzero(upd):
            final_res[i] = tuple(float(x) for x in res[i])
        k += 1

    out = []
    for i in range(n):
        if not alive[i]:
            out.append(_TrialResult(False, 0, inf, None, np.zeros((0, 4))))
            continue
        its = int(done_at[i])
        state = None if final_res[i] == inf else SolverState(v[i], y[i], t[i], psi[i], ups[i], its)
        out.append(_TrialResult(bool(converged[i]), its, final_res[i], state, history[i, :its]))
    return out


def extract_map(problem: EdgeProblem, v: np.ndarray) -> StiefelMap:
    """Project the support-masked iterate back onto the Stiefel manifold."""
    q = polar_orthogonal_factor(problem.embed(v))
    return StiefelMap(problem.embed(q), problem.structure)


def solve_edge(
    problem: EdgeProblem,
    config: SolverConfig,
    edge: tuple[int, int] = (0, 1),
    init: StiefelMap | None = None,
) -> SolverReport:
    """Run up to ``config.ntrials`` randomly initialized ADMM trials.

    Trial ``j`` starts from a seed derived from ``(config.seed, edge, j)``.
    Trials run in vectorized blocks (see :func:`trial_blocks`); the converged
    trial with the smallest index is reported, exactly as a sequential loop
    would, and each trial's arithmetic does not depend on its block.  If no
    trial converges, the trial with the smallest worst-case residual is
    returned with ``converged=False``.  ``init`` replaces the random start of
    trial 0.
    """
    best: tuple[float, int, _TrialResult] | None = None
    for idx in trial_blocks(config.ntrials):
        v0s = np.empty((len(idx),) + problem.structure.shape)
        for slot, j in enumerate(idx):
            if j == 0 and init is not None:
                v0s[slot] = problem.embed(np.asarray(init.v, dtype=float))
            else:
                rng = np.random.default_rng(trial_seed(config.seed, edge, j))
                v0s[slot] = random_block_init(problem.structure, rng)
        for j, trial in zip(idx, run_trials(problem, v0s, config.max_iter, config.tol)):
            if trial.converged:
                try:
                    smap = extract_map(problem, trial.state.v)
                except DegenerateProx:
                    pass
                else:
                    kl = kl_divergence(smap, problem.sigma_low, problem.sigma_high) if config.kl_report else None
                    return SolverReport(True, j, trial.iterations, trial.residuals, kl, smap, trial.history, j + 1)
            score = max(trial.residuals)
            if best is None or score < best[0]:
                best = (score, j, trial)
    _, j, trial = best
    return SolverReport(False, j, trial.iterations, trial.residuals, None, None, trial.history, config.ntrials)
