import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canlearn.errors import InvalidInput, RankOrderViolation
from canlearn.model import AbstractionStructure, StiefelMap, validate_measure
from canlearn.spectral_solver import (
    SolverConfig,
    SolverState,
    build_problem,
    initial_state,
    random_block_init,
    residuals,
    run_trial,
    run_trials,
    solve_edge,
    step,
    trial_blocks,
    trial_seed,
    update_duals,
    update_t,
    update_v,
    update_y,
)
from canlearn.synth import gen_local_instance, sample_partition, sample_spd

from conftest import random_spd
from solver_oracles import analytic_gradient, dense_v_oracle, fd_gradient, random_state


def random_problem(rng, l, h):
    low = validate_measure(random_spd(rng, l))
    high = validate_measure(random_spd(rng, h))
    return build_problem(low, high, sample_partition(l, h, rng))


def planted_problem(l=12, h=4, seed=0):
    inst = gen_local_instance(l, h, seed)
    return build_problem(inst.low, inst.high, inst.structure), inst


def fixed_point(problem, planted):
    m = planted.v
    t = problem.project(m)
    return SolverState(m.copy(), m.copy(), t, np.zeros_like(m), np.zeros_like(t))


def orthonormal(q, tol=1e-10):
    return np.abs(q.T @ q - np.eye(q.shape[1])).max() <= tol


# --- build_problem --------------------------------------------------------------


def test_identity_factors():
    s = AbstractionStructure.from_labels([0, 0], 1)
    p = build_problem(validate_measure(np.eye(2)), validate_measure(np.eye(1)), s)
    np.testing.assert_allclose(np.abs(p.a_factor), np.eye(2)[:, np.argsort(np.abs(p.a_factor).argmax(0))], atol=1e-14)
    np.testing.assert_allclose(p.c_factor, [[1.0]])


def test_scalar_square_root():
    s = AbstractionStructure.from_labels([0, 0], 1)
    p = build_problem(validate_measure(np.eye(2)), validate_measure([[4.0]]), s)
    np.testing.assert_allclose(np.abs(p.c_factor), [[2.0]])
    np.testing.assert_allclose(np.abs(p.c_whiten), [[0.5]])


def test_factor_reconstruction(rng):
    p = random_problem(rng, 5, 2)
    for fac, m in ((p.a_factor, p.sigma_low), (p.c_factor, p.sigma_high)):
        cov = m.covariance
        assert np.linalg.norm(fac @ fac.T - cov) <= 1e-9 * np.linalg.norm(cov)
    # columns follow descending eigenvalues
    norms = np.linalg.norm(p.a_factor, axis=0)
    assert np.all(np.diff(norms) <= 1e-12)


def test_rank_order_violation(rng):
    u = rng.standard_normal((3, 1))
    low = validate_measure(u @ u.T)
    with pytest.raises(RankOrderViolation):
        build_problem(low, validate_measure(np.eye(2)), sample_partition(3, 2, 0))
    with pytest.raises(InvalidInput):
        build_problem(validate_measure(np.eye(3)), validate_measure(np.zeros((2, 2))), sample_partition(3, 2, 0))


# --- V update -----------------------------------------------------------------


def test_v_update_zero_rhs(rng):
    p = random_problem(rng, 4, 2)
    z = SolverState(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2)))
    assert not update_v(z, p).any()


def test_v_update_without_coupling(rng):
    p = random_problem(rng, 4, 2)
    p = dataclasses.replace(p, k_support=np.zeros_like(p.k_support), system_inv=np.eye(p.rows.size))
    s = random_state(rng, p)
    np.testing.assert_array_equal(update_v(s, p), p.structure.b * (s.y - s.psi))


@given(st.integers(0, 2**32 - 1))
def test_v_update_matches_oracles(seed):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(1, 4))
    l = int(rng.integers(h + 1, 7))
    p = random_problem(rng, l, h)
    s = random_state(rng, p)
    v = update_v(s, p)
    assert np.abs(v - dense_v_oracle(s, p)).max() <= 1e-8
    assert np.linalg.norm(analytic_gradient(v, s, p)) <= 1e-8
    assert np.linalg.norm(fd_gradient(v, s, p)) <= 1e-6
    assert not v[p.structure.b == 0].any()


# --- prox updates ----------------------------------------------------------------


def test_y_update_idempotent(rng):
    p, inst = planted_problem(6, 2, 1)
    s = SolverState(inst.planted.v, inst.planted.v, np.eye(p.r_low, p.r_high), np.zeros((6, 2)), np.zeros((p.r_low, p.r_high)))
    np.testing.assert_allclose(update_y(s, p), inst.planted.v, atol=1e-12)


def test_t_update_scalar_sign():
    u = np.array([[0.6], [0.8]])
    low = validate_measure(u @ u.T)
    high = validate_measure([[1.0]])
    p = build_problem(low, high, AbstractionStructure.from_labels([0, 0], 1))
    assert (p.r_low, p.r_high) == (1, 1)
    for x in (-2.5, 0.3):
        v = np.array([[1.0], [0.0]])
        target = x - float(p.project(v)[0, 0])
        s = SolverState(v, v, np.zeros((1, 1)), np.zeros((2, 1)), np.array([[target]]))
        np.testing.assert_allclose(update_t(s, p), [[np.sign(x)]])


def test_t_update_fixed_when_already_stiefel():
    p, inst = planted_problem(8, 3, 2)
    s = fixed_point(p, inst.planted)
    assert orthonormal(s.t)
    np.testing.assert_allclose(update_t(s, p), s.t, atol=1e-10)


def test_t_update_orthonormal(rng):
    p = random_problem(rng, 6, 3)
    s = random_state(rng, p)
    s = dataclasses.replace(s, v=update_v(s, p))
    assert orthonormal(update_t(s, p))


# --- duals and residuals ---------------------------------------------------------


def test_duals_fixed_at_zero_residual():
    p, inst = planted_problem(8, 3, 3)
    s = fixed_point(p, inst.planted)
    psi, ups = update_duals(s, p)
    np.testing.assert_allclose(psi, s.psi, atol=1e-12)
    np.testing.assert_allclose(ups, s.upsilon, atol=1e-12)


def test_duals_accumulate_residuals(rng):
    p = random_problem(rng, 6, 2)
    s = initial_state(p, random_block_init(p.structure, rng))
    total_y = np.zeros_like(s.psi)
    total_t = np.zeros_like(s.upsilon)
    for _ in range(3):
        s = step(s, p)
        m = p.embed(s.v)
        total_y += m - s.y
        total_t += p.project(m) - s.t
    np.testing.assert_allclose(s.psi, total_y, atol=1e-12)
    np.testing.assert_allclose(s.upsilon, total_t, atol=1e-12)


def test_fixed_point_has_zero_residuals():
    p, inst = planted_problem(12, 4, 0)
    s0 = fixed_point(p, inst.planted)
    s1 = step(s0, p)
    assert max(residuals(s0, s1, p)) <= 1e-12


def test_iterates_keep_invariants(rng):
    p, _ = planted_problem(10, 3, 5)
    s = initial_state(p, random_block_init(p.structure, rng))
    for _ in range(25):
        s = step(s, p)
        assert orthonormal(s.y) and orthonormal(s.t)
        assert not s.v[p.structure.b == 0].any()


def test_first_dual_residuals(rng):
    p = random_problem(rng, 5, 2)
    s0 = initial_state(p, random_block_init(p.structure, rng))
    s1 = step(s0, p)
    r = residuals(s0, s1, p)
    assert r[2] == pytest.approx(np.linalg.norm(s1.y - s0.y) / np.sqrt(s0.y.size))
    assert r[3] == pytest.approx(np.linalg.norm(s1.t - s0.t) / np.sqrt(s0.t.size))


# --- fused and batched loops -------------------------------------------------------


def test_fused_loop_matches_step():
    p, _ = planted_problem(12, 4, 3)
    v0 = random_block_init(p.structure, np.random.default_rng(1))
    fused = run_trial(p, v0, 60, 1e-30)
    s = initial_state(p, v0)
    for k in range(60):
        prev, s = s, step(s, p)
        np.testing.assert_allclose(fused.history[k], residuals(prev, s, p), rtol=1e-9, atol=1e-13)
    np.testing.assert_allclose(fused.state.v if fused.state else s.v, s.v, atol=1e-10)


def test_batched_matches_single_trial():
    p, _ = planted_problem(12, 4, 3)
    v0s = np.stack([random_block_init(p.structure, np.random.default_rng(i)) for i in range(4)])
    batch = run_trials(p, v0s, 1000, 1e-3)
    for v0, b in zip(v0s, batch):
        single = run_trial(p, v0, 1000, 1e-3)
        n = min(len(single.history), len(b.history), 25)  # rounding differences grow later
        np.testing.assert_allclose(b.history[:n], single.history[:n], rtol=1e-8, atol=1e-12)


def test_batch_composition_does_not_change_trials():
    p, _ = planted_problem(12, 4, 3)
    wrong = sample_partition(12, 4, 9)
    for prob in (p, build_problem(p.sigma_low, p.sigma_high, wrong)):
        v0s = np.stack([random_block_init(prob.structure, np.random.default_rng(i)) for i in range(12)])
        full = run_trials(prob, v0s, 300, 1e-30)
        part = run_trials(prob, v0s[4:9], 300, 1e-30)
        for a, b in zip(full[4:9], part):
            assert np.array_equal(a.history, b.history)


def test_trial_blocks_partition():
    for n in (1, 9, 10, 11, 55, 100, 101):
        blocks = trial_blocks(n)
        assert [j for b in blocks for j in b] == list(range(n))
        assert blocks[0] == range(min(10, n))


def test_trial_seed_stable():
    assert trial_seed(1, (0, 1), 2) == trial_seed(1, (0, 1), 2)
    assert len({trial_seed(1, (0, 1), j) for j in range(50)}) == 50
    assert trial_seed(1, (0, 1), 0) != trial_seed(1, (1, 0), 0)


# --- solve_edge ---------------------------------------------------------------


def test_config_validation():
    for bad in (dict(max_iter=0), dict(tol=0.0), dict(ntrials=0)):
        with pytest.raises(InvalidInput):
            SolverConfig(**bad)


def test_planted_instance_converges():
    p, inst = planted_problem(12, 4, 3)
    r = solve_edge(p, SolverConfig(seed=3))
    assert r.converged and r.map is not None
    assert max(r.final_residuals) <= 1e-3
    assert r.kl <= 1e-2
    assert r.map.structure.same_as(inst.structure)
    assert len(r.history) == r.iterations


def test_infeasible_instance_does_not_converge():
    low = sample_spd(6, 0)
    top = low.eig.eigenvalues[-1]
    high = validate_measure(np.diag([10 * top, 20 * top]))
    r = solve_edge(build_problem(low, high, sample_partition(6, 2, 0)), SolverConfig(ntrials=3, max_iter=200))
    assert not r.converged and r.map is None and r.kl is None
    assert r.trials_run == 3
    assert max(r.final_residuals) > 1e-3


def test_planted_initialization_converges_at_once():
    p, inst = planted_problem(12, 4, 7)
    r = solve_edge(p, SolverConfig(ntrials=1), init=inst.planted)
    assert r.converged and r.iterations <= 3 and r.trial_index == 0
    assert max(r.final_residuals) <= 1e-10
    np.testing.assert_allclose(r.map.v, inst.planted.v, atol=1e-8)


def test_solve_edge_is_deterministic():
    p, _ = planted_problem(12, 6, 11)
    cfg = SolverConfig(seed=5, ntrials=4)
    a, b = solve_edge(p, cfg), solve_edge(p, cfg)
    assert (a.converged, a.trial_index, a.iterations, a.final_residuals, a.kl) == (
        b.converged, b.trial_index, b.iterations, b.final_residuals, b.kl,
    )
    assert np.array_equal(a.history, b.history)


def test_trial_prefix_is_shared_across_budgets():
    p, inst = planted_problem(12, 4, 8)
    wrong = build_problem(inst.low, inst.high, sample_partition(12, 4, 99))
    for prob in (p, wrong):
        small = solve_edge(prob, SolverConfig(ntrials=3, max_iter=150, seed=2))
        large = solve_edge(prob, SolverConfig(ntrials=12, max_iter=150, seed=2))
        if small.converged:
            assert (large.trial_index, large.iterations) == (small.trial_index, small.iterations)
            assert large.final_residuals == small.final_residuals
