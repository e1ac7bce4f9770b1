import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from bilevel_newton.cubic import (
    CubicModel,
    CubicSolverError,
    cubic_gd_iterations,
    cubic_model_grad,
    cubic_model_value,
    cubic_solve_exact,
    cubic_solve_final,
    cubic_solve_gd,
    final_iteration_cap,
    perturbation_radius,
)

from conftest import brute_force_2d, hard_case_model, random_model


def kkt_report(model, s):
    H, g, M = model.H, model.g, model.M
    ns = np.linalg.norm(s)
    resid = np.linalg.norm((H + 0.5 * M * ns * np.eye(g.size)) @ s + g)
    psd = np.linalg.eigvalsh(H + 0.5 * M * ns * np.eye(g.size))[0]
    decrease = cubic_model_value(model, s) + M / 12 * ns**3
    return resid, psd, decrease


def test_zero_gradient_psd_gives_zero_step():
    res = cubic_solve_exact(CubicModel(np.zeros(3), np.diag([1.0, 2.0, 0.0]), 1.0))
    assert np.all(res.s == 0) and res.delta == 0


def test_one_dimensional_closed_form():
    res = cubic_solve_exact(CubicModel(np.array([1.0]), np.zeros((1, 1)), 6.0))
    assert res.s[0] == pytest.approx(-1 / math.sqrt(3), abs=1e-12)
    assert res.delta == pytest.approx(-2 / (3 * math.sqrt(3)), abs=1e-12)


def test_hard_case_matches_brute_force():
    model = CubicModel(np.array([0.0, 1.0]), np.diag([-1.0, 2.0]), 1.0)
    res = cubic_solve_exact(model)
    s_bf, v_bf = brute_force_2d(model)
    assert res.hard_case
    # the two mirror-image minimizers have equal value
    assert min(np.abs(res.s - s_bf).max(), np.abs(res.s * [-1, 1] - s_bf).max()) <= 1e-3
    assert abs(res.delta - v_bf) <= 1e-6


@pytest.mark.parametrize("d", [2, 5, 20])
def test_optimality_conditions_random(rng, d):
    for _ in range(20):
        model = random_model(rng, d)
        res = cubic_solve_exact(model)
        resid, psd, decrease = kkt_report(model, res.s)
        assert resid <= 1e-9 * (1 + np.linalg.norm(model.g))
        assert psd >= -1e-9
        assert decrease <= 1e-12


@pytest.mark.parametrize("d", [2, 5, 20])
def test_optimality_conditions_hard_case(rng, d):
    for _ in range(5):
        model = hard_case_model(rng, d)
        res = cubic_solve_exact(model)
        resid, psd, decrease = kkt_report(model, res.s)
        assert res.hard_case
        assert resid <= 1e-9 * (1 + np.linalg.norm(model.g))
        assert psd >= -1e-9
        assert decrease <= 1e-12


def test_global_minimum_2d_against_grid(rng):
    for _ in range(10):
        model = random_model(rng, 2)
        res = cubic_solve_exact(model)
        _, v_bf = brute_force_2d(model)
        assert res.delta <= v_bf + 1e-6


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.floats(0.05, 10),
)
def test_exact_step_is_a_global_stationary_point(eig, g, M):
    model = CubicModel(np.array(g), np.diag(eig), M)
    res = cubic_solve_exact(model)
    resid, psd, decrease = kkt_report(model, res.s)
    assert resid <= 1e-8 * (1 + np.linalg.norm(g) + np.abs(eig).max())
    assert psd >= -1e-8
    assert decrease <= 1e-10


def test_exact_rejects_nonfinite_and_operator():
    with pytest.raises(CubicSolverError):
        cubic_solve_exact(CubicModel(np.array([np.nan]), np.eye(1), 1.0))
    with pytest.raises(ValueError):
        cubic_solve_exact(CubicModel(np.ones(2), object(), 1.0))
    with pytest.raises(ValueError):
        CubicModel(np.ones(2), np.eye(2), 0.0)


def test_model_value_and_grad():
    model = CubicModel(np.array([1.0, -2.0]), np.array([[2.0, 0.5], [0.5, -1.0]]), 3.0)
    assert cubic_model_value(model, np.zeros(2)) == 0
    s = np.array([0.3, -0.7])
    h = 1e-6
    fd = np.array([(cubic_model_value(model, s + h * e) - cubic_model_value(model, s - h * e)) / (2 * h) for e in np.eye(2)])
    assert np.allclose(fd, cubic_model_grad(model, s), atol=1e-8)


def test_cauchy_branch_closed_form():
    L, M = 2.0, 1.0
    g = np.array([2 * L**2 / M, 0.0])
    res = cubic_solve_gd(CubicModel(g, np.zeros((2, 2)), M), L, 1e-2, 0.1, rng=np.random.default_rng(0))
    gn = np.linalg.norm(g)
    Rc = math.sqrt(2 * gn / M)
    assert res.branch == "cauchy"
    assert np.linalg.norm(res.s) == pytest.approx(Rc, rel=1e-12)
    assert res.delta == pytest.approx(-(2 / 3) * gn**1.5 * math.sqrt(2 / M), rel=1e-12)


def test_gd_fixed_point_without_negative_curvature():
    eps, M, L = 0.1, 1.0, 2.0
    H = np.diag([eps, 1.0, 2.0])
    model = CubicModel(np.zeros(3), H, M)
    sigma = perturbation_radius(L, M, eps)
    res = cubic_solve_gd(model, L, eps, 0.1, rng=np.random.default_rng(1), K=20000)
    assert np.linalg.norm(res.s) <= sigma / eps * (1 + 1e-6)


def test_gd_escapes_negative_curvature(rng):
    eps, M = 0.01, 1.0
    wins = 0
    for i in range(20):
        Q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
        eig = rng.uniform(0.0, 1.0, 10)
        eig[0] = -rng.uniform(1.0, 2.0) * math.sqrt(M * eps)
        H = Q @ np.diag(eig) @ Q.T
        g = 1e-4 * rng.standard_normal(10)
        L = float(np.abs(eig).max())
        res = cubic_solve_gd(CubicModel(g, H, M), L, eps, 0.1, rng=np.random.default_rng(i), K=20000)
        wins += res.delta <= -math.sqrt(eps**3 / M) / 128
    assert wins >= 18


def test_gd_value_below_cauchy_point(rng):
    for _ in range(10):
        model = random_model(rng, 6)
        L = float(np.linalg.norm(model.H, 2))
        if np.linalg.norm(model.g) >= L**2 / model.M:
            continue
        gn = np.linalg.norm(model.g)
        a = model.g @ model.H @ model.g / (model.M * gn**2)
        Rc = -a + math.sqrt(a**2 + 2 * gn / model.M)
        cauchy = cubic_model_value(model, -Rc * model.g / gn)
        res = cubic_solve_gd(model, L, 1e-2, 0.1, rng=np.random.default_rng(0), K=5000)
        assert res.delta <= cauchy + 1e-9


def test_gd_accepts_operator_and_tolerance():
    H = np.diag([1.0, 2.0])
    model = CubicModel(np.array([0.1, 0.1]), H, 1.0)

    class Op:
        def __matmul__(self, v):
            return H @ v

    res = cubic_solve_gd(CubicModel(model.g, Op(), 1.0), 2.0, 1e-2, 0.1, rng=np.random.default_rng(0), K=100000, tol=1e-10)
    assert res.n_iter < 100000
    assert np.linalg.norm(cubic_model_grad(model, res.s)) <= 1e-4


def test_gd_iteration_count_grows_with_dimension():
    assert cubic_gd_iterations(1.0, 1.0, 1e-2, 0.1, 100) > cubic_gd_iterations(1.0, 1.0, 1e-2, 0.1, 2) > 0
    with pytest.raises(ValueError):
        cubic_solve_gd(CubicModel(np.ones(2), np.eye(2), 1.0), 1.0, 1e-2, 1.5)


def test_final_solver_scalar_root():
    model = CubicModel(np.array([1.0]), np.eye(1), 6.0)
    s = cubic_solve_final(model, 1e-6, 1.0)
    root = optimize.brentq(lambda t: 1 + t + 3 * abs(t) * t, -2.0, 0.0, xtol=1e-15)
    assert s[0] == pytest.approx(root, abs=1e-6)
    assert abs(cubic_model_grad(model, s)[0]) <= 0.5e-6


def test_final_solver_small_gradient_returns_zero():
    s = cubic_solve_final(CubicModel(np.array([1e-4, 0.0]), np.eye(2), 1.0), 1e-3, 1.0)
    assert np.all(s == 0)


def test_final_solver_cap():
    assert final_iteration_cap(1.0, 1.0, 1.0) == 4000
    with pytest.raises(CubicSolverError):
        cubic_solve_final(CubicModel(np.array([1.0]), np.eye(1), 6.0), 1e-12, 1.0, max_iter=3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=4), st.floats(0.5, 5))
def test_final_solver_postcondition(g, M):
    g = np.array(g)
    H = np.diag(np.linspace(0.5, 1.0, g.size))
    eps = 1e-3
    s = cubic_solve_final(CubicModel(g, H, M), eps, 1.0 + M * 3)
    assert np.linalg.norm(cubic_model_grad(CubicModel(g, H, M), s)) <= eps / 2
