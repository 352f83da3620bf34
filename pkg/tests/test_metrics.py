import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canlearn.errors import MissingMap, RankMismatchWarning, ShapeError, StructureMismatch
from canlearn.metrics import (
    constructiveness,
    evaluate_local,
    f1_structure,
    frobenius_up_to_sign,
    gaussian_kl,
    kl_divergence,
    quartiles,
    smoothness_energy,
    rank_of,
)
from canlearn.model import AbstractionStructure, CanEdge, CanGraph, StiefelMap, validate_measure
from canlearn.synth import (
    GenSpec,
    gen_can,
    gen_global_section,
    gen_local_instance,
    sample_partition,
    sample_stiefel_on_support,
)

from conftest import random_spd


def test_kl_hand_value():
    s = AbstractionStructure(np.ones((1, 1)))
    kl = kl_divergence(StiefelMap(np.ones((1, 1)), s), validate_measure([[2.0]]), validate_measure([[1.0]]))
    assert kl == pytest.approx(0.5 + math.log(2) - 1, abs=1e-12)
    assert kl == pytest.approx(0.1931, abs=1e-4)


def test_kl_identity_map():
    s = AbstractionStructure(np.eye(3))
    m = validate_measure(random_spd(np.random.default_rng(0), 3))
    assert kl_divergence(StiefelMap(np.eye(3), s), m, m) == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_kl_zero_on_planted(seed, l):
    h = int(np.random.default_rng(seed).integers(1, l))
    inst = gen_local_instance(l, h, seed)
    assert kl_divergence(inst.planted, inst.low, inst.high) <= 1e-10


@given(st.integers(0, 2**32 - 1))
def test_kl_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    inst = gen_local_instance(7, 3, rng)
    u, _ = np.linalg.qr(rng.standard_normal((7, 7)))
    sigma_h = random_spd(rng, 3)  # a target the map does not fit exactly
    before = gaussian_kl(inst.planted.v, inst.low.covariance, sigma_h)
    after = gaussian_kl(u @ inst.planted.v, u @ inst.low.covariance @ u.T, sigma_h)
    assert after == pytest.approx(before, rel=1e-8, abs=1e-10)


def test_kl_positive_off_target(rng):
    inst = gen_local_instance(6, 2, 1)
    other = sample_stiefel_on_support(inst.structure, 2)
    assert kl_divergence(other, inst.low, inst.high) > 1e-6


def test_kl_rank_mismatch_warns(rng):
    u = rng.standard_normal((3, 1))
    low = validate_measure(u @ u.T)
    s = AbstractionStructure.from_labels([0, 1, 1], 2)
    smap = StiefelMap.from_dense(np.ones((3, 2)), s)
    with pytest.warns(RankMismatchWarning):
        value = kl_divergence(smap, low, validate_measure(np.eye(2)))
    assert np.isfinite(value)


def test_kl_shape_error():
    inst = gen_local_instance(5, 2, 0)
    with pytest.raises(ShapeError):
        kl_divergence(inst.planted, inst.high, inst.low)


def _section_graph(topology="tree", seed=3):
    truth = gen_can(GenSpec(5, topology, seed=seed))
    measures = gen_global_section(truth, seed)
    edges = [e for e in truth.edges if e.map is not None]
    return CanGraph(measures, edges)


def test_smoothness_zero_on_global_section():
    assert smoothness_energy(_section_graph()) <= 1e-8


def test_smoothness_single_edge_and_perturbation():
    inst = gen_local_instance(6, 3, 4)
    g = CanGraph([inst.low, inst.high], [CanEdge(0, 1, inst.structure, inst.planted)])
    assert smoothness_energy(g) == kl_divergence(inst.planted, inst.low, inst.high)
    bumped = StiefelMap.from_dense(inst.planted.v + 0.05 * inst.structure.b, inst.structure)
    g2 = CanGraph([inst.low, inst.high], [CanEdge(0, 1, inst.structure, bumped)])
    assert smoothness_energy(g2) > smoothness_energy(g) + 1e-8


def test_smoothness_missing_map():
    inst = gen_local_instance(4, 2, 0)
    with pytest.raises(MissingMap):
        smoothness_energy(CanGraph([inst.low, inst.high], [CanEdge(0, 1, inst.structure)]))


def test_frobenius_examples():
    s = AbstractionStructure.from_labels([0, 0, 1, 1, 2], 3)
    truth = StiefelMap.from_dense(np.ones((5, 3)), s)
    assert frobenius_up_to_sign(truth, truth) == 0.0
    neg = StiefelMap(-truth.v, s)
    assert frobenius_up_to_sign(neg, truth) == 0.0
    swapped = truth.v.copy()
    swapped[0:2, 0] = [1 / np.sqrt(2), -1 / np.sqrt(2)]  # orthogonal to the true block
    d = frobenius_up_to_sign(StiefelMap(swapped, s), truth)
    assert d == pytest.approx(np.sqrt(2) / np.sqrt(3), abs=1e-12)


def test_frobenius_errors():
    a = sample_stiefel_on_support(sample_partition(4, 2, 0), 0)
    with pytest.raises(ShapeError):
        frobenius_up_to_sign(a, sample_stiefel_on_support(sample_partition(5, 2, 0), 0))
    other = AbstractionStructure.from_labels(1 - a.structure.labels, 2)
    with pytest.raises(StructureMismatch):
        frobenius_up_to_sign(a, sample_stiefel_on_support(other, 0))


@given(st.integers(0, 2**32 - 1))
def test_frobenius_sign_invariance(seed):
    rng = np.random.default_rng(seed)
    s = sample_partition(7, 3, rng)
    a, b = sample_stiefel_on_support(s, rng), sample_stiefel_on_support(s, rng)
    flips = rng.choice([-1.0, 1.0], size=3)
    base = frobenius_up_to_sign(a, b)
    assert frobenius_up_to_sign(StiefelMap(a.v * flips, s), b) == pytest.approx(base, abs=1e-12)
    assert frobenius_up_to_sign(a, StiefelMap(b.v * flips, s)) == pytest.approx(base, abs=1e-12)


def test_f1_examples():
    s = AbstractionStructure.from_labels([0, 0, 0, 1, 1], 2)
    full = StiefelMap.from_dense(np.ones((5, 2)), s)
    assert f1_structure(full, s) == 1.0
    v = full.v.copy()
    v[0, 0] = 0.0
    holed = StiefelMap.from_dense(v, s)
    # tp = 4, fn = 1, fp = 0
    assert f1_structure(holed, s) == pytest.approx(8 / 9)
    assert f1_structure(full, s, zero_tol=10.0) == 0.0


def test_constructiveness_examples():
    assert constructiveness(sample_stiefel_on_support(sample_partition(6, 3, 0), 0))
    two_in_row = SimpleNamespace(v=np.array([[0.5, 0.5], [0.5, 0.0], [0.0, 0.5]]))
    assert not constructiveness(two_in_row)
    empty_col = SimpleNamespace(v=np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert not constructiveness(empty_col)


@given(st.integers(0, 2**32 - 1), st.integers(2, 10))
def test_sampled_maps_are_perfect(seed, l):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(1, l))
    smap = sample_stiefel_on_support(sample_partition(l, h, rng), rng)
    assert f1_structure(smap, smap.structure) == 1.0
    assert constructiveness(smap)


def test_evaluate_local_on_truth():
    inst = gen_local_instance(8, 3, 2)
    ev = evaluate_local(inst.planted, inst.planted, inst.low, inst.high)
    assert ev.kl <= 1e-10 and ev.frob_dist == 0.0 and ev.f1 == 1.0 and ev.constructive


def test_quartiles_hand_values():
    assert quartiles([3, 1, 4, 1, 5]) == (1.0, 3.0, 4.0)
    # positions 1.25, 2.5, 3.75 in the sorted sample
    assert quartiles([16, 1, 7, 2, 11, 4]) == pytest.approx((2.5, 5.5, 10.0))
    assert quartiles([2.5]) == (2.5, 2.5, 2.5)
    assert quartiles([0.7] * 30) == (0.7, 0.7, 0.7)
    assert all(math.isnan(x) for x in quartiles([]))


def test_rank_of():
    assert rank_of(np.diag([1.0, 0.0, 2.0])) == 2
