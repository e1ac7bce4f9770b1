import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel_newton.agd import AgdConfig, agd_run
from bilevel_newton.estimators import (
    ChebyshevConfig,
    CurvatureError,
    LagrangianContext,
    cheb_inverse_apply,
    cheb_inverse_matvec,
    chebyshev_error_bound,
    grad_estimate,
    hess_estimate,
    hess_estimate_cheb,
    lagrangian_inner_oracle,
    minimax_grad,
    minimax_hess,
)
from bilevel_newton.problems import QuadraticBilevel, make_quadratic_bilevel, make_synthetic_minimax
from bilevel_newton.telemetry import counted

# relative allowance for rounding when a bound is attained exactly
ROUND = 1e-10


def quad_ctx(seed=0, lam=None, d=4):
    prob, cf = make_quadratic_bilevel(seed, d, d, 8.0)
    lam = 2 * prob.params.ell / prob.params.mu * 3 if lam is None else lam
    return LagrangianContext.build(prob, lam), prob, cf


def test_lambda_lower_limit():
    prob, _ = make_quadratic_bilevel(0, 2, 2, 4.0)
    with pytest.raises(ValueError):
        LagrangianContext.build(prob, prob.params.ell / prob.params.mu)


def test_inner_oracle_minimizer_matches_closed_form():
    ctx, prob, cf = quad_ctx()
    x = np.linspace(-1, 1, 4)
    y_lam = cf.y_star_lam(x, ctx.lam)
    h = lagrangian_inner_oracle(ctx, x)
    assert np.linalg.norm(h(y_lam)) <= 1e-10 * ctx.lam
    y = agd_run(h, np.zeros(4), AgdConfig.from_constants(ctx.ell2, ctx.mu2, 2000))
    assert np.linalg.norm(y - y_lam) <= 1e-10


def test_inner_oracle_without_upper_dependence():
    prob, cf = make_quadratic_bilevel(1, 3, 3, 4.0)
    flat = QuadraticBilevel(prob.A, np.zeros_like(prob.B), np.zeros_like(prob.C), prob.a, np.zeros(3), prob.Q, prob.P, prob.q)
    ctx = LagrangianContext.build(flat, 50.0)
    x, y = np.ones(3), np.arange(3.0)
    assert np.allclose(lagrangian_inner_oracle(ctx, x)(y), 50.0 * flat.grad_g_y(x, y))
    assert np.allclose(flat.closed_form.y_star_lam(x, 50.0), flat.closed_form.y_star(x))


def test_grad_estimate_cancellation_and_exactness():
    ctx, prob, cf = quad_ctx()
    x, y = np.ones(4), np.arange(4.0)
    assert np.allclose(grad_estimate(ctx, x, y, y), prob.grad_f_x(x, y))
    g = grad_estimate(ctx, x, cf.y_star_lam(x, ctx.lam), cf.y_star(x))
    assert np.allclose(g, cf.lagrangian_grad(x, ctx.lam), atol=1e-10)


def test_error_bounds_random_perturbations():
    ctx, prob, cf = quad_ctx(lam=200.0)
    rng = np.random.default_rng(0)
    ell = ctx.params.ell
    H_true = cf.lagrangian_hess(ctx.lam)
    for _ in range(100):
        x = rng.standard_normal(4)
        ys, yl = cf.y_star(x), cf.y_star_lam(x, ctx.lam)
        w = ys + rng.standard_normal(4) * rng.uniform(0, 1)
        y = yl + rng.standard_normal(4) * rng.uniform(0, 1)
        g_err = np.linalg.norm(cf.lagrangian_grad(x, ctx.lam) - grad_estimate(ctx, x, y, w))
        bound = 2 * ctx.lam * ell * np.linalg.norm(y - yl) + ctx.lam * ell * np.linalg.norm(w - ys)
        assert g_err <= bound * (1 + ROUND)
        h_err = np.linalg.norm(H_true - hess_estimate(ctx, x, y, w), 2)
        # constant Hessians make both constants vanish; only rounding remains
        assert h_err <= ctx.C1 * np.linalg.norm(w - ys) + ctx.C2 * np.linalg.norm(y - yl) + 1e-8 * ctx.lam


def test_hess_estimate_without_coupling():
    prob, _ = make_quadratic_bilevel(2, 3, 3, 4.0)
    dec = QuadraticBilevel(prob.A, np.zeros((3, 3)), prob.C, prob.a, prob.b, prob.Q, np.zeros((3, 3)), prob.q)
    ctx = LagrangianContext.build(dec, 100.0)
    H = hess_estimate(ctx, np.ones(3), np.ones(3), np.zeros(3))
    assert np.allclose(H, prob.A)


def test_hess_estimate_approaches_hyper_hessian():
    prob, cf = make_quadratic_bilevel(0, 4, 4, 8.0)
    x = np.ones(4)
    errs = []
    for lam in (1e3, 1e4, 1e5, 1e6):
        ctx = LagrangianContext.build(prob, lam)
        H = hess_estimate(ctx, x, cf.y_star_lam(x, lam), cf.y_star(x))
        errs.append(np.linalg.norm(H - cf.hess_phi(), 2))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-4


def test_hess_estimate_rejects_indefinite_block():
    prob, _ = make_quadratic_bilevel(0, 2, 2, 4.0)
    ctx = LagrangianContext.build(prob, 100.0)

    class Bad:
        def __getattr__(self, name):
            return getattr(prob, name)

        def hess_g_yy(self, x, y):
            return -np.eye(2)

    with pytest.raises(CurvatureError):
        hess_estimate(LagrangianContext(Bad(), 100.0, ctx.params, ctx.L, ctx.rho_bar), np.ones(2), np.ones(2), np.ones(2))


def test_chebyshev_scalar_matrix():
    c, mu_X, ell_X = 0.7, 0.1, 1.0
    for K in range(1, 51):
        approx = cheb_inverse_apply(c * np.eye(1), mu_X, ell_X, K)[0, 0]
        assert abs(1 / c - approx) <= chebyshev_error_bound(mu_X, ell_X, K) * (1 + ROUND)


def test_chebyshev_order_zero():
    mu_X, ell_X = 0.2, 3.0
    cfg = ChebyshevConfig.for_interval(mu_X, ell_X, 0)
    out = cheb_inverse_apply(np.diag([0.5, 1.0, 2.0]), mu_X, ell_X, 0)
    assert np.allclose(out, cfg.coeffs[0] / (4 * ell_X) * np.eye(3))


def test_chebyshev_random_spd(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    eig = np.geomspace(0.01, 1.0, 20)
    X = Q @ np.diag(eig) @ Q.T
    X = 0.5 * (X + X.T)
    inv = np.linalg.inv(X)
    errs = {}
    for K in (1, 5, 10, 25, 50):
        errs[K] = np.linalg.norm(inv - cheb_inverse_apply(X, 0.01, 1.0, K), 2)
        assert errs[K] <= chebyshev_error_bound(0.01, 1.0, K) * (1 + ROUND)
    assert errs[50] <= 1e-3 * errs[5]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(1.0, 100.0), st.integers(0, 40), st.floats(0.0, 1.0))
def test_chebyshev_bound_property(mu_X, spread, K, pos):
    ell_X = mu_X * spread
    t = mu_X + pos * (ell_X - mu_X)
    approx = cheb_inverse_matvec(lambda v: t * v, np.ones(1), mu_X, ell_X, K)[0]
    assert abs(1 / t - approx) <= chebyshev_error_bound(mu_X, ell_X, K) * (1 + ROUND) + 1e-14 / mu_X


def test_chebyshev_validation():
    with pytest.raises(ValueError):
        cheb_inverse_apply(np.eye(2), 0.0, 1.0, 3)
    with pytest.raises(ValueError):
        ChebyshevConfig(0.5, 0.2, 1)


def test_cheb_estimate_converges_and_matches_matrix_free():
    ctx, prob, cf = quad_ctx(lam=100.0)
    x = np.ones(4)
    y, w = cf.y_star_lam(x, ctx.lam) + 0.1, cf.y_star(x) - 0.1
    H = hess_estimate(ctx, x, y, w)
    C = hess_estimate_cheb(ctx, x, y, w, 200, 200)
    assert np.abs(C - H).max() <= 1e-8
    op = hess_estimate_cheb(ctx, x, y, w, 7, 9, matrix_free=True)
    dense = hess_estimate_cheb(ctx, x, y, w, 7, 9)
    assert np.allclose(op.matmat(np.eye(4)), dense, atol=1e-10)


def test_cheb_estimate_bound():
    # equal orders: the second term's slack covers the first term's missing factor
    rng = np.random.default_rng(4)
    for seed in range(5):
        ctx, prob, cf = quad_ctx(seed, lam=60.0)
        k, ell, lam = ctx.params.kappa, ctx.params.ell, ctx.lam
        for K in (1, 3, 8, 15):
            x, y, w = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4)
            err = np.linalg.norm(hess_estimate(ctx, x, y, w) - hess_estimate_cheb(ctx, x, y, w, K, K), 2)
            bound = k * ell * (1 - 2 / (math.sqrt(k) + 1)) ** K + 6 * (lam + 1) * k * ell * (1 - 2 / (math.sqrt(3 * k) + 1)) ** K
            assert err <= bound


def test_cheb_estimate_zero_cross_blocks():
    prob, _ = make_quadratic_bilevel(2, 3, 3, 4.0)
    dec = QuadraticBilevel(prob.A, np.zeros((3, 3)), prob.C, prob.a, prob.b, prob.Q, np.zeros((3, 3)), prob.q)
    ctx = LagrangianContext.build(dec, 100.0)
    args = (np.ones(3), np.ones(3), np.zeros(3))
    assert np.allclose(hess_estimate_cheb(ctx, *args, 1, 2), hess_estimate(ctx, *args))


def test_matrix_free_estimate_uses_only_products():
    ctx, prob, cf = quad_ctx(lam=100.0)
    o = counted(prob)
    c2 = LagrangianContext(o, ctx.lam, ctx.params, ctx.L, ctx.rho_bar)
    op = hess_estimate_cheb(c2, np.ones(4), np.ones(4), np.ones(4), 5, 6, matrix_free=True)
    op.matvec(np.ones(4))
    assert o.counter.hess_block_calls == 0
    assert o.counter.hvp_calls == 6 + 5 + 6


def test_minimax_estimators():
    prob, cf = make_synthetic_minimax()
    x = np.array([0.3, -0.4, 0.05])
    assert np.allclose(minimax_grad(prob, x, cf.y_star(x)), cf.grad_phi(x))
    assert np.allclose(minimax_grad(prob, np.array([1.0, 1.0, 0.0]), np.zeros(2)), 0)
    for y in (np.zeros(2), np.ones(2)):
        assert np.allclose(minimax_hess(prob, x, y), cf.hess_phi(x))
    h = 1e-6
    fd = np.column_stack([(minimax_grad(prob, x + h * e, cf.y_star(x + h * e)) - minimax_grad(prob, x - h * e, cf.y_star(x - h * e))) / (2 * h) for e in np.eye(3)])
    assert np.allclose(minimax_hess(prob, x, cf.y_star(x)), fd, atol=1e-5)


def test_minimax_hess_rejects_convex_y():
    prob, _ = make_synthetic_minimax()

    class Bad:
        def __getattr__(self, name):
            return getattr(prob, name)

        def hess_f_yy(self, x, y):
            return np.eye(2)

    with pytest.raises(CurvatureError):
        minimax_hess(Bad(), np.zeros(3), np.zeros(2))
