import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from autodml.data import philox
from autodml.lp import LPError, simplex


def test_small_known_program():
    # max x + y s.t. x + 2y <= 4, 3x + y <= 6
    res = simplex([-1.0, -1.0], [[1.0, 2.0], [3.0, 1.0]], [4.0, 6.0])
    np.testing.assert_allclose(res.x, [1.6, 1.2], atol=1e-12)
    assert res.fun == pytest.approx(-2.8, abs=1e-12)


def test_degenerate_cycling_example_terminates():
    # a classic instance on which largest-coefficient pricing cycles
    c = [-0.75, 20.0, -0.5, 6.0]
    A = [[0.25, -8.0, -1.0, 9.0], [0.5, -12.0, -0.5, 3.0], [0.0, 0.0, 1.0, 0.0]]
    b = [0.0, 0.0, 1.0]
    res = simplex(c, A, b)
    ref = linprog(c, A_ub=A, b_ub=b, method="highs")
    assert res.fun == pytest.approx(ref.fun, abs=1e-12)
    np.testing.assert_allclose(res.x, [1.0, 0.0, 1.0, 0.0], atol=1e-12)


def test_unbounded_and_infeasible():
    with pytest.raises(LPError, match="unbounded"):
        simplex([-1.0, 0.0], [[1.0, -1.0]], [1.0])
    with pytest.raises(LPError, match="infeasible"):
        simplex([1.0], [[1.0], [-1.0]], [1.0, -2.0])


def test_negative_right_hand_side_needs_phase_one():
    # x >= 1 written as -x <= -1
    res = simplex([1.0, 1.0], [[-1.0, 0.0], [0.0, -1.0]], [-1.0, -2.0])
    np.testing.assert_allclose(res.x, [1.0, 2.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 8), st.integers(1, 8))
def test_matches_independent_solver(seed, m, n):
    rng = philox(seed)
    A = rng.standard_normal((m, n))
    x0 = rng.uniform(0, 1, n)
    b = A @ x0 + rng.uniform(0, 1, m)          # feasible by construction
    c = rng.uniform(0.1, 1.0, n) * rng.choice([-1.0, 1.0], n)
    # a box keeps every instance bounded
    A = np.vstack([A, np.eye(n)])
    b = np.concatenate([b, np.full(n, 3.0)])
    ref = linprog(c, A_ub=A, b_ub=b, bounds=[(0, None)] * n, method="highs")
    res = simplex(c, A, b)
    assert res.fun == pytest.approx(ref.fun, abs=1e-8)
    assert np.all(A @ res.x <= b + 1e-8)
    assert np.all(res.x >= 0)


def test_warm_start_from_optimal_basis_skips_work():
    A = np.array([[1.0, 2.0], [3.0, 1.0]])
    b = np.array([4.0, 6.0])
    cold = simplex([-1.0, -1.0], A, b)
    warm = simplex([-1.0, -1.0], A, b, start=cold.basis)
    assert warm.nit == 0
    np.testing.assert_array_equal(warm.x, cold.x)
    # an infeasible suggested basis falls back to the cold start
    bad = simplex([-1.0, -1.0], A, b, start=[0, 3])
    assert bad.fun == pytest.approx(cold.fun, abs=1e-12)
