import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import lsq_linear

from teledex.solver import NumericError, SolverOptions, levenberg_marquardt


def linear(A, b):
    return lambda x: (A @ x - b, A)


def rosenbrock(x):
    r = np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])
    J = np.array([[-20 * x[0], 10.0], [-1.0, 0.0]])
    return r, J


BIG = np.full(2, 1e9)


def test_rosenbrock_reaches_minimum():
    res = levenberg_marquardt(rosenbrock, np.array([-1.2, 1.0]), -BIG, BIG,
                              SolverOptions(max_iterations=200, cost_tolerance=1e-24))
    assert res.converged
    np.testing.assert_allclose(res.x, [1, 1], atol=1e-10)


def test_start_at_optimum_takes_no_steps():
    res = levenberg_marquardt(rosenbrock, np.array([1.0, 1.0]), -BIG, BIG)
    assert res.iterations == 0 and res.accepted_steps == 0 and res.converged
    assert np.array_equal(res.x, [1.0, 1.0])


def test_non_finite_start_is_numeric_error():
    with pytest.raises(NumericError):
        levenberg_marquardt(lambda x: (np.array([np.nan]), np.zeros((1, 2))), np.zeros(2), -BIG, BIG)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_active_set_box_least_squares_matches_reference(seed):
    """Bounded linear least squares against scipy's BVLS solution."""
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(4, 9)), int(rng.integers(2, 5))
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m) * 3
    lo, hi = -rng.uniform(0.1, 1, n), rng.uniform(0.1, 1, n)
    opts = SolverOptions(max_iterations=500, cost_tolerance=0.0, step_tolerance=1e-13, active_set=True)
    res = levenberg_marquardt(linear(A, b), 0.5 * (lo + hi), lo, hi, opts)
    ref = lsq_linear(A, b, bounds=(lo, hi), method="bvls", tol=1e-14)
    assert res.cost <= 2 * ref.cost + 1e-8 * max(1.0, ref.cost)   # scipy reports half the squared norm
    np.testing.assert_allclose(res.x, ref.x, atol=1e-5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_interior_optimum_matches_unconstrained_solution(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(6, 3))
    b = rng.normal(size=6)
    x_ls = np.linalg.lstsq(A, b, rcond=None)[0]
    lo, hi = x_ls - rng.uniform(0.5, 2, 3), x_ls + rng.uniform(0.5, 2, 3)
    opts = SolverOptions(max_iterations=200, cost_tolerance=0.0, step_tolerance=1e-14)
    res = levenberg_marquardt(linear(A, b), 0.5 * (lo + hi) + 0.3 * (hi - lo) * rng.uniform(-1, 1, 3), lo, hi, opts)
    np.testing.assert_allclose(res.x, x_ls, atol=1e-8)


def test_plain_clamp_can_stall_on_a_bound_where_active_set_does_not():
    # the documented difference between the two modes (seed found by the property test above)
    rng = np.random.default_rng(2)
    m, n = int(rng.integers(4, 9)), int(rng.integers(2, 5))
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m) * 3
    lo, hi = -rng.uniform(0.1, 1, n), rng.uniform(0.1, 1, n)
    plain = SolverOptions(max_iterations=500, cost_tolerance=0.0, step_tolerance=1e-13)
    ref = 2 * lsq_linear(A, b, bounds=(lo, hi), method="bvls", tol=1e-14).cost
    a = levenberg_marquardt(linear(A, b), 0.5 * (lo + hi), lo, hi, plain)
    b_ = levenberg_marquardt(linear(A, b), 0.5 * (lo + hi), lo, hi, SolverOptions(**{**plain.to_dict(), "active_set": True}))
    assert a.cost > ref + 1e-3
    assert abs(b_.cost - ref) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_accepted_costs_strictly_decrease_and_stay_in_box(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=3)
    lo, hi = -np.ones(3), np.ones(3)

    def fun(x):
        r = np.concatenate([np.sin(2 * x) - c * 0.5, x ** 3 - c])
        J = np.vstack([np.diag(2 * np.cos(2 * x)), np.diag(3 * x ** 2)])
        return r, J

    res = levenberg_marquardt(fun, rng.uniform(lo, hi), lo, hi)
    h = np.array(res.cost_history)
    assert np.all(np.diff(h) < 0)
    assert len(h) == res.accepted_steps + 1
    assert np.all(res.x >= lo) and np.all(res.x <= hi)


def test_deterministic():
    a = levenberg_marquardt(rosenbrock, np.array([-1.2, 1.0]), -BIG, BIG)
    b = levenberg_marquardt(rosenbrock, np.array([-1.2, 1.0]), -BIG, BIG)
    assert np.array_equal(a.x, b.x) and a.cost_history == b.cost_history


def test_options_round_trip():
    o = SolverOptions(max_iterations=7, active_set=True)
    assert SolverOptions.from_dict(o.to_dict()) == o
    assert SolverOptions.from_dict(None) == SolverOptions()
