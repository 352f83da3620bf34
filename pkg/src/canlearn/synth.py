"""Seeded synthetic data: structures, Stiefel maps, covariances, networks and global sections."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from canlearn.errors import DisconnectedTopology, InvalidInput, ShapeError
from canlearn.model import (
    AbstractionStructure,
    CanEdge,
    CanGraph,
    GaussianMeasure,
    StiefelMap,
    compose,
    validate_measure,
)
from canlearn.numerics import transitive_closure

Topology = Literal["chain", "star", "tree"]
TOPOLOGIES = ("chain", "star", "tree")
SPD_RIDGE = 1e-3


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class GenSpec:
    n_nodes: int
    topology: Topology = "chain"
    seed: int = 0
    dim_low: int = 2
    dim_high: int | None = None  # defaults to 2 * n_nodes

    def __post_init__(self):
        if self.n_nodes < 2:
            raise InvalidInput("n_nodes must be >= 2")
        if self.topology not in TOPOLOGIES:
            raise InvalidInput(f"unknown topology {self.topology!r}")
        if self.dim_low < 1 or self.span < self.n_nodes:
            raise InvalidInput(f"cannot draw {self.n_nodes} distinct dims from [{self.dim_low}, {self.upper}]")

    @property
    def upper(self) -> int:
        return self.dim_high if self.dim_high is not None else 2 * self.n_nodes

    @property
    def span(self) -> int:
        return self.upper - self.dim_low + 1


def sample_partition(l: int, h: int, seed=None) -> AbstractionStructure:
    """Random surjective assignment of ``l`` low-level variables to ``h`` blocks."""
    if not (l > h >= 1):
        raise ShapeError(f"need l > h >= 1, got l={l}, h={h}")
    rng = _rng(seed)
    order = rng.permutation(l)
    labels = np.empty(l, dtype=int)
    labels[order[:h]] = np.arange(h)  # one guaranteed row per block
    labels[order[h:]] = rng.integers(0, h, size=l - h)
    return AbstractionStructure.from_labels(labels, h)


def sample_stiefel_on_support(structure: AbstractionStructure, seed=None) -> StiefelMap:
    rng = _rng(seed)
    v = structure.b * rng.standard_normal(structure.shape)
    return StiefelMap(v / np.linalg.norm(v, axis=0), structure)


def sample_spd(dim: int, seed=None) -> GaussianMeasure:
    """Wishart-type covariance ``G Gᵀ / (2 dim) + 1e-3 I`` with ``G`` of shape ``dim x 2 dim``."""
    if dim < 1:
        raise InvalidInput("dim must be >= 1")
    g = _rng(seed).standard_normal((dim, 2 * dim))
    return validate_measure(g @ g.T / (2 * dim) + SPD_RIDGE * np.eye(dim))


class LocalInstance(NamedTuple):
    low: GaussianMeasure
    high: GaussianMeasure
    structure: AbstractionStructure
    planted: StiefelMap


def gen_local_instance(l: int, h: int, seed=None) -> LocalInstance:
    """Planted pair: ``Sigma_h = Mᵀ Sigma_l M`` for a random partition-supported ``M``."""
    if not l > h:
        raise ShapeError(f"need l > h, got l={l}, h={h}")
    rng = _rng(seed)
    low = sample_spd(l, rng)
    structure = sample_partition(l, h, rng)
    planted = sample_stiefel_on_support(structure, rng)
    m = planted.v
    high = validate_measure(m.T @ low.covariance @ m)
    return LocalInstance(low, high, structure, planted)


def local_instance_graph(inst: LocalInstance, meta: dict | None = None) -> CanGraph:
    learned = np.zeros((2, 2), dtype=bool)
    learned[1, 0] = True
    return CanGraph(
        [inst.low, inst.high],
        [CanEdge(0, 1, inst.structure, inst.planted)],
        candidate=None,
        learned=learned,
        meta=dict(meta or {}),
    )


def reduction_edges(n: int, topology: Topology, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Irreducible (finer, coarser) pairs over nodes sorted by descending dimension."""
    if topology == "chain":
        return [(i, i + 1) for i in range(n - 1)]
    if topology == "star":
        return [(i, n - 1) for i in range(n - 1)]
    if topology == "tree":
        # each node attaches to a uniformly chosen coarser node already in the tree
        return [(i, int(rng.integers(i + 1, n))) for i in range(n - 1)]
    raise InvalidInput(f"unknown topology {topology!r}")


def gen_can(spec: GenSpec) -> CanGraph:
    """Random ground-truth network with maps on every edge of its transitive closure.

    The returned graph has one edge per ordered node pair.  Pairs in the
    closure carry ``map``; the rest carry a random decoy structure only, so a
    learner is given a structure for every candidate pair.  ``learned`` holds
    the reduction adjacency.  Measures are placeholders (identities) until a
    global section is attached.
    """
    rng = _rng(spec.seed)
    n = spec.n_nodes
    dims = np.sort(rng.choice(np.arange(spec.dim_low, spec.upper + 1), size=n, replace=False))[::-1]
    red = reduction_edges(n, spec.topology, rng)
    maps: dict[tuple[int, int], StiefelMap] = {}
    for low, high in red:
        structure = sample_partition(int(dims[low]), int(dims[high]), rng)
        maps[(low, high)] = sample_stiefel_on_support(structure, rng)
    adj = np.zeros((n, n), dtype=bool)
    for low, high in red:
        adj[high, low] = True
    closure = transitive_closure(adj)
    # compose along reduction edges in order of increasing span so each
    # composite reuses an already-built shorter map
    for span in range(2, n):
        for low in range(n - span):
            high = low + span
            if not closure[high, low] or (low, high) in maps:
                continue
            for mid in range(low + 1, high):
                if (low, mid) in red and (mid, high) in maps:
                    maps[(low, high)] = compose(maps[(mid, high)], maps[(low, mid)])
                    break
            else:
                raise AssertionError(f"no composition path for ({low}, {high})")
    edges = []
    for low in range(n):
        for high in range(low + 1, n):
            if (low, high) in maps:
                smap = maps[(low, high)]
                edges.append(CanEdge(low, high, smap.structure, smap))
            else:
                edges.append(CanEdge(low, high, sample_partition(int(dims[low]), int(dims[high]), rng)))
    measures = [validate_measure(np.eye(int(d))) for d in dims]
    meta = {"kind": "truth", "topology": spec.topology, "n": n, "seed": int(spec.seed)}
    return CanGraph(measures, edges, candidate=None, learned=adj, meta=meta)


def gen_global_section(truth: CanGraph, seed=None) -> list[GaussianMeasure]:
    """Push a random SPD covariance at the coarsest node outward along the reduction edges."""
    n = truth.n_nodes
    if truth.learned is None:
        raise DisconnectedTopology("truth graph has no reduction adjacency")
    root = n - 1
    rng = _rng(seed)
    cov: dict[int, np.ndarray] = {root: sample_spd(truth.measures[root].dim, rng).covariance}
    queue = deque([root])
    while queue:
        parent = queue.popleft()
        for child in np.flatnonzero(truth.learned[parent, :]):
            child = int(child)
            if child in cov:
                continue
            e = truth.edge(child, parent)
            if e is None or e.map is None:
                raise DisconnectedTopology(f"reduction edge ({child}, {parent}) has no map")
            v = e.map.v
            cov[child] = v @ cov[parent] @ v.T
            queue.append(child)
    if len(cov) != n:
        missing = sorted(set(range(n)) - set(cov))
        raise DisconnectedTopology(f"nodes {missing} are not reachable from the coarsest node")
    return [validate_measure(cov[i]) for i in range(n)]


def with_measures(truth: CanGraph, measures: list[GaussianMeasure], meta: dict | None = None) -> CanGraph:
    """A measures-only graph (a section file) sharing the truth's node ordering."""
    if [m.dim for m in measures] != truth.dims:
        raise ShapeError("section dimensions do not match the truth graph")
    return CanGraph(list(measures), [], None, None, dict(meta or {}))
