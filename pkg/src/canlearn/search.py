"""Network-level search: interlacing candidates, closure pruning and per-edge solves.

Adjacency matrices are indexed ``M[high, low]``.  Nodes are sorted by
descending dimension, so every relation lies strictly below the diagonal and
subdiagonal ``d`` holds the pairs ``(low=i, high=i+d)``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from canlearn.errors import MissingStructure, ShapeError
from canlearn.interlace import DEFAULT_INTERLACE_TOL, check_interlacing
from canlearn.model import AbstractionStructure, CanEdge, CanGraph, GaussianMeasure, StiefelMap, compose
from canlearn.numerics import transitive_closure, transitive_reduction
from canlearn.spectral_solver import SolverConfig, SolverReport, build_problem, solve_edge

Pair = tuple[int, int]
EdgeSolver = Callable[[GaussianMeasure, GaussianMeasure, AbstractionStructure, SolverConfig, Pair], SolverReport]


@dataclass(frozen=True)
class SearchConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    interlace_tol: float = DEFAULT_INTERLACE_TOL
    parallel_edges: bool = False
    threads: int | None = None


@dataclass
class SearchTrace:
    p_history: list[np.ndarray] = field(default_factory=list)
    pruned_history: list[np.ndarray] = field(default_factory=list)
    interlace_tests: list[Pair] = field(default_factory=list)
    solved_edges: list[tuple[int, int, SolverReport]] = field(default_factory=list)
    skipped_by_closure: list[tuple[int, int, str]] = field(default_factory=list)

    @property
    def solves_launched(self) -> int:
        return len(self.solved_edges)

    @property
    def solves_skipped(self) -> int:
        return sum(1 for *_, reason in self.skipped_by_closure if reason == "closure")

    def to_dict(self) -> dict:
        def mat(m):
            return np.asarray(m, dtype=int).tolist()

        return {
            "p_history": [mat(m) for m in self.p_history],
            "pruned_history": [mat(m) for m in self.pruned_history],
            "interlace_tests": [list(p) for p in self.interlace_tests],
            "solved": [
                {
                    "low": low,
                    "high": high,
                    "converged": r.converged,
                    "trial": r.trial_index,
                    "iterations": r.iterations,
                    "residuals": list(r.final_residuals),
                    "kl": r.kl,
                }
                for low, high, r in self.solved_edges
            ],
            "skipped": [{"low": low, "high": high, "reason": why} for low, high, why in self.skipped_by_closure],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _check_sorted(measures: Sequence[GaussianMeasure]) -> None:
    dims = [m.dim for m in measures]
    if any(a <= b for a, b in zip(dims, dims[1:])):
        raise ShapeError(f"measures must be sorted by strictly descending dimension, got {dims}")


def build_candidates(
    measures: Sequence[GaussianMeasure], interlace_tol: float = DEFAULT_INTERLACE_TOL
) -> tuple[np.ndarray, SearchTrace]:
    """Candidate matrix ``P`` from interlacing tests, swept one subdiagonal at a time.

    After each subdiagonal ``P`` is replaced by its transitive closure, and
    pairs already implied are not tested again.
    """
    _check_sorted(measures)
    n = len(measures)
    p = np.zeros((n, n), dtype=bool)
    trace = SearchTrace()
    for d in range(1, n):
        for low in range(n - d):
            high = low + d
            if p[high, low]:
                continue
            trace.interlace_tests.append((low, high))
            if check_interlacing(measures[low], measures[high], interlace_tol):
                p[high, low] = True
        p = transitive_closure(p)
        trace.p_history.append(p.copy())
    return p, trace


def default_edge_solver(
    low: GaussianMeasure, high: GaussianMeasure, structure: AbstractionStructure, config: SolverConfig, pair: Pair
) -> SolverReport:
    return solve_edge(build_problem(low, high, structure), config, edge=pair)


def learn_can(
    measures: Sequence[GaussianMeasure],
    structures: Mapping[Pair, AbstractionStructure],
    config: SearchConfig | None = None,
    solver: EdgeSolver = default_edge_solver,
) -> tuple[CanGraph, SearchTrace]:
    """Learn the reduced abstraction relation ``A`` and its maps.

    Subdiagonals are processed in increasing order.  Candidate pairs still in
    ``P`` and not implied by the closure of ``A`` are solved; converged pairs
    enter ``A`` with their learned map.  Pruning happens only between
    subdiagonals, so solves within one subdiagonal are independent.
    """
    config = config or SearchConfig()
    p0, trace = build_candidates(measures, config.interlace_tol)
    n = len(measures)
    p = p0.copy()
    a = np.zeros((n, n), dtype=bool)
    maps: dict[Pair, StiefelMap] = {}
    for d in range(1, n):
        stage = [(low, low + d) for low in range(n - d)]
        todo = []
        for low, high in stage:
            if not p0[high, low]:
                trace.skipped_by_closure.append((low, high, "interlacing"))
            elif not p[high, low]:
                trace.skipped_by_closure.append((low, high, "closure"))
            else:
                if (low, high) not in structures:
                    raise MissingStructure((low, high))
                todo.append((low, high))
        reports = _solve_stage(measures, structures, todo, config, solver)
        for (low, high), report in zip(todo, reports):
            trace.solved_edges.append((low, high, report))
            if report.converged:
                a[high, low] = True
                maps[(low, high)] = report.map
        implied = transitive_closure(a)
        p &= ~implied
        trace.pruned_history.append(p.copy())
    learned = transitive_reduction(transitive_closure(a))
    edges = [
        CanEdge(low, high, structures[(low, high)], maps[(low, high)])
        for high, low in zip(*np.nonzero(learned))
    ]
    edges.sort(key=lambda e: (e.low, e.high))
    graph = CanGraph(list(measures), edges, candidate=p0, learned=learned)
    return graph, trace


def _solve_stage(measures, structures, todo: list[Pair], config: SearchConfig, solver: EdgeSolver) -> list[SolverReport]:
    def run(pair: Pair) -> SolverReport:
        low, high = pair
        return solver(measures[low], measures[high], structures[pair], config.solver, pair)

    if config.parallel_edges and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(run, todo))  # map preserves input order
    return [run(pair) for pair in todo]


def composed_map(graph: CanGraph, low: int, high: int) -> StiefelMap | None:
    """Map for a pair implied by the learned relation, composed along learned edges."""
    e = graph.edge(low, high)
    if e is not None and e.map is not None:
        return e.map
    for mid in range(low + 1, high):
        first = graph.edge(low, mid)
        if first is None or first.map is None:
            continue
        rest = composed_map(graph, mid, high)
        if rest is not None:
            return compose(rest, first.map)
    return None


def truth_relation(truth: CanGraph) -> np.ndarray:
    """Transitive closure of a ground-truth graph's relation."""
    if truth.learned is not None:
        return transitive_closure(truth.learned)
    n = truth.n_nodes
    rel = np.zeros((n, n), dtype=bool)
    for e in truth.edges:
        if e.map is not None:
            rel[e.high, e.low] = True
    return transitive_closure(rel)


def rates(learned_closure: np.ndarray, truth_closure: np.ndarray) -> tuple[float, float]:
    """(FPR, TPR) over the strictly lower triangle."""
    n = truth_closure.shape[0]
    lower = np.tril(np.ones((n, n), dtype=bool), -1)
    pos = truth_closure & lower
    neg = ~truth_closure & lower
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    tpr = float((learned_closure & pos).sum()) / n_pos if n_pos else 1.0
    fpr = float((learned_closure & neg).sum()) / n_neg if n_neg else 0.0
    return fpr, tpr


def evaluate_against_truth(learned: CanGraph, truth: CanGraph) -> tuple[float, float]:
    """False and true positive rates of the learned closure against the truth closure."""
    if learned.n_nodes != truth.n_nodes or learned.dims != truth.dims:
        raise ShapeError("learned and truth graphs have different nodes")
    if learned.learned is None:
        raise ShapeError("learned graph carries no adjacency")
    return rates(transitive_closure(learned.learned), truth_relation(truth))
