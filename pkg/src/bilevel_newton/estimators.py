"""Gradient and Hessian estimates of the penalized value function and of minimax objectives.

With ``L_lam(x, y) = f(x, y) + lam * (g(x, y) - min_y g(x, .))`` the value
function ``L*(x) = min_y L_lam(x, y)`` approximates ``phi(x) = f(x, y*(x))``
and its derivatives need only first- and second-order oracles. The
estimates take two inner iterates: ``y`` approximating the minimizer of
``f + lam * g`` and ``w`` approximating the minimizer of ``g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator

from .problems import SmoothnessParams


class CurvatureError(ValueError):
    """A block that should be definite is not."""


@dataclass(frozen=True)
class LagrangianContext:
    """Oracle, penalty multiplier and the constants derived from them.

    ``L`` bounds the Lipschitz constant of the value-function gradient and
    ``rho_bar`` that of its Hessian. Both default to ``8 * ell_bar * kappa**3``
    and ``8 * ell_bar * kappa**5``.
    """

    oracle: object
    lam: float
    params: SmoothnessParams
    L: float
    rho_bar: float

    @classmethod
    def build(cls, oracle, lam: float, params: SmoothnessParams | None = None, L: float | None = None, rho_bar: float | None = None):
        params = params if params is not None else oracle.params
        if params is None:
            raise ValueError("smoothness parameters are required")
        if lam < 2 * params.ell / params.mu * (1 - 1e-12):
            raise ValueError(f"lam={lam:g} is below 2*ell/mu={2 * params.ell / params.mu:g}")
        kb, lb = params.kappa, params.ell_bar
        L = 8 * lb * kb**3 if L is None else float(L)
        rho_bar = 8 * lb * kb**5 if rho_bar is None else float(rho_bar)
        return cls(oracle, float(lam), params, L, rho_bar)

    @property
    def ell2(self) -> float:
        return (1 + self.lam) * self.params.ell

    @property
    def mu2(self) -> float:
        return self.lam * self.params.mu / 2

    @property
    def C1(self) -> float:
        mu, ell, rho, lam = self.params.mu, self.params.ell, self.params.rho, self.lam
        return lam * rho + 2 * ell * rho / mu + ell**2 * rho / mu**2

    @property
    def C2(self) -> float:
        mu, ell, rho, lam = self.params.mu, self.params.ell, self.params.rho, self.lam
        r, e = rho + lam * rho, ell + lam * ell
        return r + e * (4 * r / (lam * mu) + 4 * r * e / (lam**2 * mu**2))


def lower_inner_oracle(oracle, x):
    """``y -> grad_y g(x, y)``."""
    return lambda y: oracle.grad_g_y(x, y)


def lagrangian_inner_oracle(ctx: LagrangianContext, x):
    """``y -> grad_y f(x, y) + lam * grad_y g(x, y)`` (strongly convex in ``y``)."""
    oracle, lam = ctx.oracle, ctx.lam
    return lambda y: oracle.lag_grad_y(x, y, lam)


def grad_estimate(ctx: LagrangianContext, x, y, w) -> np.ndarray:
    o, lam = ctx.oracle, ctx.lam
    return o.grad_f_x(x, y) + lam * (o.grad_g_x(x, y) - o.grad_g_x(x, w))


def _pd_factor(M, what):
    try:
        return linalg.cho_factor(M)
    except linalg.LinAlgError as exc:
        raise CurvatureError(f"{what} is not positive definite") from exc


def hess_estimate(ctx: LagrangianContext, x, y, w) -> np.ndarray:
    """Dense estimate of the value-function Hessian with exact block inverses."""
    o, lam = ctx.oracle, ctx.lam
    Lxx = o.lag_hess_xx(x, y, lam)
    Lxy = o.lag_hess_xy(x, y, lam)
    Lyy = o.lag_hess_yy(x, y, lam)
    Gxx = o.hess_g_xx(x, w)
    Gxy = o.hess_g_xy(x, w)
    Gyy = o.hess_g_yy(x, w)
    Lf = _pd_factor(Lyy, "yy block of the Lagrangian")
    Gf = _pd_factor(Gyy, "yy block of g")
    H = Lxx - lam * Gxx - Lxy @ linalg.cho_solve(Lf, Lxy.T) + lam * Gxy @ linalg.cho_solve(Gf, Gxy.T)
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# Chebyshev inverse


@dataclass(frozen=True)
class ChebyshevConfig:
    """Truncated Chebyshev series of ``1/t`` on ``[mu_prime, ell_prime]``."""

    mu_prime: float
    ell_prime: float
    K_prime: int

    def __post_init__(self):
        if not 0 < self.mu_prime <= self.ell_prime < 1:
            raise ValueError("need 0 < mu_prime <= ell_prime < 1")
        if self.K_prime < 0:
            raise ValueError("K_prime must be nonnegative")

    @property
    def ratio(self) -> float:
        r = math.sqrt(self.mu_prime / self.ell_prime)
        return (r - 1) / (r + 1)

    @property
    def coeffs(self) -> np.ndarray:
        k = np.arange(self.K_prime + 1)
        return 2 / math.sqrt(self.ell_prime * self.mu_prime) * self.ratio**k

    def error_bound(self) -> float:
        """Spectral-norm error of the series for a matrix with spectrum in the interval."""
        rk = math.sqrt(self.ell_prime / self.mu_prime)
        return (rk - 1) / math.sqrt(self.ell_prime * self.mu_prime) * (1 - 2 / (rk + 1)) ** self.K_prime

    @classmethod
    def for_interval(cls, mu_X: float, ell_X: float, K_prime: int) -> "ChebyshevConfig":
        """Rescale ``[mu_X, ell_X]`` by ``1 / (2 ell_X)`` so the top lands at 1/2."""
        if not mu_X > 0:
            raise ValueError("mu_X must be positive")
        if ell_X < mu_X:
            raise ValueError("ell_X must be at least mu_X")
        return cls(mu_X / (2 * ell_X), 0.5, int(K_prime))


def chebyshev_error_bound(mu_X: float, ell_X: float, K_prime: int) -> float:
    """Bound on ``||X^{-1} - cheb_inverse_apply(X)||`` for spectrum in ``[mu_X, ell_X]``."""
    return ChebyshevConfig.for_interval(mu_X, ell_X, K_prime).error_bound() / (2 * ell_X)


def cheb_inverse_matvec(apply_X, v, mu_X: float, ell_X: float, K_prime: int) -> np.ndarray:
    """Apply the Chebyshev approximation of ``X^{-1}`` to ``v`` using ``K_prime`` products with ``X``."""
    cfg = ChebyshevConfig.for_interval(mu_X, ell_X, K_prime)
    c = cfg.coeffs
    a, b = cfg.mu_prime, cfg.ell_prime
    # a degenerate interval leaves only the constant term
    scale, shift = (2 / (b - a) if b > a else 0.0), (b + a) / 2

    def apply_Z(u):
        return scale * (apply_X(u) / (2 * ell_X) - shift * u)

    v = np.asarray(v, dtype=float)
    acc = 0.5 * c[0] * v
    if K_prime >= 1:
        t_prev, t_cur = v, apply_Z(v)
        acc = acc + c[1] * t_cur
        for k in range(2, K_prime + 1):
            t_prev, t_cur = t_cur, 2 * apply_Z(t_cur) - t_prev
            acc = acc + c[k] * t_cur
    return acc / (2 * ell_X)


def cheb_inverse_apply(X, mu_X: float, ell_X: float, K_prime: int) -> np.ndarray:
    """Dense Chebyshev approximation of ``X^{-1}`` for symmetric ``X`` with spectrum in ``[mu_X, ell_X]``."""
    X = np.asarray(X, dtype=float)
    out = cheb_inverse_matvec(lambda U: X @ U, np.eye(X.shape[0]), mu_X, ell_X, K_prime)
    return 0.5 * (out + out.T)


def hess_estimate_cheb(ctx: LagrangianContext, x, y, w, K1: int, K2: int, matrix_free: bool = False):
    """Hessian estimate with both block inverses replaced by Chebyshev series.

    The inverse of ``hess_g_yy(x, w)`` uses the interval ``[mu, ell]`` and
    order ``K1``; the inverse of the Lagrangian yy block uses
    ``[lam*mu/2, (1+lam)*ell]`` and order ``K2``. With ``matrix_free`` the
    result is a ``LinearOperator`` built only from Hessian-vector products.
    """
    o, lam, p = ctx.oracle, ctx.lam, ctx.params
    lo2, hi2 = ctx.mu2, ctx.ell2
    if not matrix_free:
        Lxx = o.lag_hess_xx(x, y, lam)
        Lxy = o.lag_hess_xy(x, y, lam)
        Lyy = o.lag_hess_yy(x, y, lam)
        Gxx = o.hess_g_xx(x, w)
        Gxy = o.hess_g_xy(x, w)
        Gyy = o.hess_g_yy(x, w)
        C1 = cheb_inverse_apply(Gyy, p.mu, p.ell, K1)
        C2 = cheb_inverse_apply(Lyy, lo2, hi2, K2)
        H = Lxx - lam * Gxx + lam * Gxy @ C1 @ Gxy.T - Lxy @ C2 @ Lxy.T
        return 0.5 * (H + H.T)

    def matvec(v):
        v = np.asarray(v, dtype=float).reshape(-1)
        out = o.lag_hvp_xx(x, y, lam, v) - lam * o.hvp_g_xx(x, w, v)
        u1 = cheb_inverse_matvec(lambda z: o.hvp_g_yy(x, w, z), o.hvp_g_yx(x, w, v), p.mu, p.ell, K1)
        out = out + lam * o.hvp_g_xy(x, w, u1)
        u2 = cheb_inverse_matvec(lambda z: o.lag_hvp_yy(x, y, lam, z), o.lag_hvp_yx(x, y, lam, v), lo2, hi2, K2)
        return out - o.lag_hvp_xy(x, y, lam, u2)

    d = o.d_x
    return LinearOperator((d, d), matvec=matvec, rmatvec=matvec, dtype=float)


# ---------------------------------------------------------------------------
# minimax


def minimax_grad(oracle, x, y) -> np.ndarray:
    return oracle.grad_f_x(x, y)


def minimax_hess(oracle, x, y) -> np.ndarray:
    """Schur complement ``f_xx - f_xy f_yy^{-1} f_yx`` (the Hessian of the max-value function)."""
    Fxx = oracle.hess_f_xx(x, y)
    Fxy = oracle.hess_f_xy(x, y)
    Fyy = oracle.hess_f_yy(x, y)
    neg = _pd_factor(-Fyy, "negated yy block of f")
    H = Fxx + Fxy @ linalg.cho_solve(neg, Fxy.T)
    return 0.5 * (H + H.T)
