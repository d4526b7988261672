import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchtune.errors import DomainError, ShapeError
from patchtune.matching import (Assignment, batch_assignments, critic, euclidean_costs, optimal_assignment,
                                solve_cost_matrix)
from patchtune.oracles import brute_force_assignment


def test_identical_blocks_give_identity(rng):
    q = rng.normal(size=(5, 4))
    a = optimal_assignment(q, q)
    assert a.mapping == (0, 1, 2, 3, 4) and a.total_cost == 0.0


def test_swapped_rows_give_anti_diagonal():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    a = optimal_assignment(q, q[::-1])
    assert a.mapping == (1, 0) and a.total_cost == 0.0


def test_five_by_eight_against_all_permutations(rng):
    for _ in range(20):
        q, k = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        cost = euclidean_costs(q, k)
        totals = {p: sum(cost[r, s] for r, s in enumerate(p)) for p in itertools.permutations(range(5))}
        best = min(totals, key=totals.get)
        a = optimal_assignment(q, k)
        assert a.mapping == best
        assert a.total_cost == pytest.approx(totals[best], abs=1e-12)


@pytest.mark.parametrize("R", [1, 2, 3, 4, 5, 6])
def test_brute_force_agreement(R):
    rng = np.random.default_rng(R)
    for _ in range(200):
        q, k = rng.normal(size=(R, 3)), rng.normal(size=(R, 3))
        a = optimal_assignment(q, k)
        assert (a.mapping, a.total_cost) == brute_force_assignment(euclidean_costs(q, k))


def test_ties_resolve_lexicographically():
    assert solve_cost_matrix(np.ones((4, 4))).mapping == (0, 1, 2, 3)
    cost = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    assert solve_cost_matrix(cost).mapping == (0, 1, 2)
    # equal optima (0,1,2) and (1,0,2); also (2,...) more expensive
    cost = np.array([[1.0, 1.0, 5.0], [1.0, 1.0, 5.0], [5.0, 5.0, 0.0]])
    assert solve_cost_matrix(cost).mapping == (0, 1, 2)


def test_tie_break_on_integer_costs_matches_enumeration(rng):
    for _ in range(300):
        R = int(rng.integers(2, 6))
        cost = rng.integers(0, 3, size=(R, R)).astype(float)
        assert solve_cost_matrix(cost).mapping == brute_force_assignment(cost)[0]


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        optimal_assignment(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        solve_cost_matrix(np.zeros((2, 3)))


def test_non_finite_rejected():
    with pytest.raises(DomainError):
        optimal_assignment(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))


@given(st.integers(0, 2**31 - 1), st.integers(2, 7))
def test_dominates_identity_and_random_permutations(seed, R):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(R, 4)), rng.normal(size=(R, 4))
    cost = euclidean_costs(q, k)
    best = optimal_assignment(q, k).total_cost
    assert best <= np.trace(cost) + 1e-12
    for _ in range(100):
        p = rng.permutation(R)
        assert best <= cost[np.arange(R), p].sum() + 1e-12


@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_optimum_symmetric_and_mapping_inverts(seed, R):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(R, 4)), rng.normal(size=(R, 4))
    ab, ba = optimal_assignment(q, k), optimal_assignment(k, q)
    assert ab.total_cost == pytest.approx(ba.total_cost, abs=1e-12)
    assert tuple(int(i) for i in np.argsort(ab.mapping)) == ba.mapping


@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_permuting_keys_permutes_mapping(seed, R):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(R, 4)), rng.normal(size=(R, 4))
    perm = rng.permutation(R)
    base, moved = optimal_assignment(q, k), optimal_assignment(q, k[perm])
    inv = np.argsort(perm)
    assert moved.mapping == tuple(int(inv[s]) for s in base.mapping)
    assert moved.total_cost == pytest.approx(base.total_cost, abs=1e-12)


def test_batch_assignments_match_single(rng):
    q, keys = rng.normal(size=(4, 3)), rng.normal(size=(9, 4, 3))
    maps = batch_assignments(q, keys)
    for j in range(9):
        assert tuple(maps[j]) == optimal_assignment(q, keys[j]).mapping


def test_critic_values():
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    ident = Assignment((0, 1), 0.0)
    np.testing.assert_allclose(critic(x, x, ident, 1.0), [math.e, math.e], rtol=1e-15)
    np.testing.assert_allclose(critic(x, x[::-1], ident, 1.0), [1.0, 1.0], rtol=1e-15)
    np.testing.assert_allclose(critic(x, x, ident, 0.07), np.exp(1 / 0.07), rtol=1e-14)
    assert np.exp(1 / 0.07) == pytest.approx(1.6003e6, rel=1e-4)


def test_critic_errors():
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(DomainError):
        critic(x, np.eye(2), Assignment((0, 1), 0.0), 1.0)
    with pytest.raises(DomainError):
        critic(np.eye(2), np.eye(2), Assignment((0, 1), 0.0), 0.0)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 2), st.floats(0.05, 2))
def test_critic_monotone(c1, c2, t1, t2):
    def value(c, tau):
        q = np.array([[1.0, 0.0]])
        k = np.array([[c, math.sqrt(max(0.0, 1 - c * c))]])
        return critic(q, k, Assignment((0,), 0.0), tau)[0]

    lo, hi = sorted((c1, c2))
    if hi - lo > 1e-9:
        assert value(lo, t1) < value(hi, t1)
    t_lo, t_hi = sorted((t1, t2))
    if hi > 1e-6 and t_hi - t_lo > 1e-9:
        assert value(hi, t_lo) > value(hi, t_hi)


def test_critic_bounds(rng):
    for tau in (0.07, 0.5, 1.0):
        q, k = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        v = critic(q, k, optimal_assignment(q, k), tau)
        assert ((v >= np.exp(-1 / tau) * (1 - 1e-12)) & (v <= np.exp(1 / tau) * (1 + 1e-12))).all()
