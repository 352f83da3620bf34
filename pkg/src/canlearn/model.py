"""Measures, abstraction structures, Stiefel maps and the CAN graph.

Node measures are zero-mean Gaussians summarized by their covariance.  An
edge relates a finer node (``low``) to a coarser one (``high``) through a
partition matrix ``b`` of shape ``(l, h)`` and an embedding map ``v`` with
orthonormal columns supported on ``b``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from canlearn.errors import (
    DatasetIOError,
    NotPsd,
    NotSquare,
    SchemaError,
    ShapeError,
    StructureMismatch,
)
from canlearn.numerics import DEFAULT_RANK_TOL, SymEig, numerical_rank, sym_eig

SCHEMA_VERSION = 1
PSD_TOL = 1e-9
STIEFEL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    covariance: np.ndarray
    eig: SymEig
    rank: int

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]


def validate_measure(covariance) -> GaussianMeasure:
    """Symmetrize, eigendecompose and rank-annotate a covariance matrix."""
    c = np.asarray(covariance, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise NotSquare(f"covariance must be a non-empty square matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise NotSquare("covariance has non-finite entries")
    c = 0.5 * (c + c.T)
    eig = sym_eig(c)
    w = eig.eigenvalues
    top = max(np.abs(w).max(), np.finfo(float).tiny)
    if w[0] < -PSD_TOL * top:
        raise NotPsd(f"smallest eigenvalue {w[0]:.3e} below -{PSD_TOL:g} x {top:.3e}")
    c.setflags(write=False)
    return GaussianMeasure(c, eig, numerical_rank(w, DEFAULT_RANK_TOL))


@dataclass(frozen=True, eq=False)
class AbstractionStructure:
    """Partition matrix ``B`` of shape ``(l, h)``: row ``i`` marks the block of low variable ``i``."""

    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b)
        if b.ndim != 2:
            raise ShapeError(f"structure must be 2-d, got shape {b.shape}")
        if not np.isin(b, (0, 1)).all():
            raise ShapeError("structure entries must be 0 or 1")
        l, h = b.shape
        if l < h or h < 1:
            raise ShapeError(f"structure needs l >= h >= 1, got {l}x{h}")
        if not (b.sum(axis=1) == 1).all():
            raise ShapeError("each low-level variable must belong to exactly one block")
        if not (b.sum(axis=0) >= 1).all():
            raise ShapeError("each high-level variable must own at least one low-level variable")
        b = b.astype(float)
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.b.shape

    @property
    def labels(self) -> np.ndarray:
        """Block index of every low-level variable."""
        return np.argmax(self.b, axis=1)

    @classmethod
    def from_labels(cls, labels, h: int) -> AbstractionStructure:
        labels = np.asarray(labels, dtype=int)
        b = np.zeros((labels.size, h))
        b[np.arange(labels.size), labels] = 1.0
        return cls(b)

    def same_as(self, other: AbstractionStructure) -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.b, other.b))


@dataclass(frozen=True, eq=False)
class StiefelMap:
    """Embedding ``B ⊙ V`` with orthonormal columns supported on ``structure``."""

    v: np.ndarray
    structure: AbstractionStructure

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        b = self.structure.b
        if v.shape != b.shape:
            raise ShapeError(f"map shape {v.shape} does not match structure {b.shape}")
        if np.any(v[b == 0] != 0):
            raise StructureMismatch("map has entries outside the structure support")
        gram = v.T @ v
        off = gram - np.diag(np.diag(gram))
        # disjoint column supports make the Gram matrix diagonal
        if np.abs(off).max(initial=0.0) > STIEFEL_TOL:
            raise StructureMismatch("Gram matrix of a partition-supported map must be diagonal")
        if np.abs(np.diag(gram) - 1.0).max() > STIEFEL_TOL:
            raise StructureMismatch("map columns are not unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.v.shape

    @classmethod
    def from_dense(cls, v, structure: AbstractionStructure) -> StiefelMap:
        """Mask ``v`` to the support and normalize each column block."""
        m = np.asarray(v, dtype=float) * structure.b
        return cls(m / np.linalg.norm(m, axis=0), structure)


def compose(outer: StiefelMap, inner: StiefelMap) -> StiefelMap:
    """Compose ``inner`` (l -> m) with ``outer`` (m -> h) into an (l -> h) map."""
    l, m = inner.shape
    m2, _ = outer.shape
    if m != m2:
        raise ShapeError(f"cannot compose {inner.shape} with {outer.shape}")
    b = (inner.structure.b @ outer.structure.b > 0).astype(float)
    return StiefelMap(inner.v @ outer.v, AbstractionStructure(b))


@dataclass
class CanEdge:
    low: int
    high: int
    structure: AbstractionStructure
    map: StiefelMap | None = None


@dataclass
class CanGraph:
    """Nodes sorted by strictly descending dimension plus oriented edges.

    Adjacency matrices use ``M[high, low] = 1`` so that relations live in the
    strictly lower triangle.
    """

    measures: list[GaussianMeasure]
    edges: list[CanEdge] = field(default_factory=list)
    candidate: np.ndarray | None = None
    learned: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def n_nodes(self) -> int:
        return len(self.measures)

    @property
    def dims(self) -> list[int]:
        return [m.dim for m in self.measures]

    def validate(self) -> None:
        dims = self.dims
        if any(a <= b for a, b in zip(dims, dims[1:])):
            raise ShapeError(f"node dimensions must be strictly descending, got {dims}")
        n = len(dims)
        for e in self.edges:
            if not (0 <= e.low < e.high < n):
                raise ShapeError(f"edge ({e.low}, {e.high}) has invalid node indices")
            if e.structure.shape != (dims[e.low], dims[e.high]):
                raise ShapeError(f"edge ({e.low}, {e.high}) structure has shape {e.structure.shape}")
            if e.map is not None and not e.map.structure.same_as(e.structure):
                raise StructureMismatch(f"edge ({e.low}, {e.high}) map is not supported on its structure")
        for name in ("candidate", "learned"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m).astype(bool)
            if m.shape != (n, n):
                raise ShapeError(f"{name} must be {n}x{n}")
            if np.any(np.triu(m)):
                raise ShapeError(f"{name} must be strictly lower triangular")
            setattr(self, name, m)

    def edge(self, low: int, high: int) -> CanEdge | None:
        for e in self.edges:
            if e.low == low and e.high == high:
                return e
        return None

    def structures(self) -> dict[tuple[int, int], AbstractionStructure]:
        return {(e.low, e.high): e.structure for e in self.edges}


# --- serialization -------------------------------------------------------


def _matrix_to_json(m) -> list[list[float]]:
    return [[float(x) for x in row] for row in np.asarray(m)]


def _bool_to_json(m) -> list[list[int]]:
    return [[int(bool(x)) for x in row] for row in np.asarray(m)]


def graph_to_dict(graph: CanGraph) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "version": SCHEMA_VERSION,
        "measures": [{"dim": m.dim, "covariance": _matrix_to_json(m.covariance)} for m in graph.measures],
        "edges": [],
    }
    for e in graph.edges:
        item: dict[str, Any] = {"low": e.low, "high": e.high, "b": _bool_to_json(e.structure.b)}
        if e.map is not None:
            item["v"] = _matrix_to_json(e.map.v)
        doc["edges"].append(item)
    if graph.candidate is not None:
        doc["candidate"] = _bool_to_json(graph.candidate)
    if graph.learned is not None:
        doc["learned"] = _bool_to_json(graph.learned)
    if graph.meta:
        doc["meta"] = graph.meta
    return doc


def _require(doc: dict, key: str, path: str):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(f"{path}{key}" if path else key, "missing required field")
    return doc[key]


def _matrix(value, path: str, shape: tuple[int, int] | None = None) -> np.ndarray:
    try:
        m = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(path, f"not a numeric matrix ({exc})") from None
    if m.ndim != 2:
        raise SchemaError(path, "expected an array of arrays")
    if shape is not None and m.shape != shape:
        raise SchemaError(path, f"expected shape {shape}, got {m.shape}")
    return m


def graph_from_dict(doc: Any) -> CanGraph:
    if not isinstance(doc, dict):
        raise SchemaError("$", "dataset must be a JSON object")
    version = _require(doc, "version", "")
    if version != SCHEMA_VERSION:
        raise SchemaError("version", f"unsupported version {version!r}")
    raw_measures = _require(doc, "measures", "")
    if not isinstance(raw_measures, list):
        raise SchemaError("measures", "expected an array")
    measures = []
    for i, item in enumerate(raw_measures):
        p = f"measures[{i}]."
        dim = _require(item, "dim", p)
        if not isinstance(dim, int) or dim < 1:
            raise SchemaError(p + "dim", "expected a positive integer")
        cov = _matrix(_require(item, "covariance", p), p + "covariance", (dim, dim))
        try:
            measures.append(validate_measure(cov))
        except (NotPsd, NotSquare) as exc:
            raise SchemaError(p + "covariance", str(exc)) from None
    dims = [m.dim for m in measures]
    edges = []
    for i, item in enumerate(_require(doc, "edges", "")):
        p = f"edges[{i}]."
        low, high = _require(item, "low", p), _require(item, "high", p)
        if not (isinstance(low, int) and isinstance(high, int) and 0 <= low < high < len(dims)):
            raise SchemaError(p + "low", f"invalid node pair ({low}, {high})")
        shape = (dims[low], dims[high])
        try:
            structure = AbstractionStructure(_matrix(_require(item, "b", p), p + "b", shape))
        except ShapeError as exc:
            raise SchemaError(p + "b", str(exc)) from None
        smap = None
        if item.get("v") is not None:
            try:
                smap = StiefelMap(_matrix(item["v"], p + "v", shape), structure)
            except (ShapeError, StructureMismatch) as exc:
                raise SchemaError(p + "v", str(exc)) from None
        edges.append(CanEdge(low, high, structure, smap))
    n = len(dims)
    mats = {}
    for key in ("candidate", "learned"):
        if doc.get(key) is not None:
            m = _matrix(doc[key], key, (n, n))
            if not np.isin(m, (0, 1)).all():
                raise SchemaError(key, "expected a 0/1 matrix")
            mats[key] = m.astype(bool)
    meta = doc.get("meta") or {}
    if not isinstance(meta, dict):
        raise SchemaError("meta", "expected an object")
    try:
        return CanGraph(measures, edges, mats.get("candidate"), mats.get("learned"), dict(meta))
    except (ShapeError, StructureMismatch) as exc:
        raise SchemaError("$", str(exc)) from None


def save_dataset(graph: CanGraph, path) -> None:
    path = Path(path)
    text = json.dumps(graph_to_dict(graph), indent=1)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def load_dataset(path) -> CanGraph:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON ({exc})") from None
    return graph_from_dict(doc)
