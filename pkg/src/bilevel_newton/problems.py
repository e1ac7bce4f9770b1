"""Oracle interfaces, verifiable test families and a ground-truth hyperobjective evaluator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg


class InnerSolveError(RuntimeError):
    """Raised when a high-accuracy inner solve fails to reach its tolerance."""


@dataclass(frozen=True)
class SmoothnessParams:
    """Smoothness constants of a bilevel (or minimax) problem.

    ``mu`` is the strong-convexity modulus of the lower level, ``ell`` the
    gradient-Lipschitz constant, ``rho`` the Hessian-Lipschitz constant,
    ``nu`` the third-derivative Lipschitz constant of ``g`` and ``C_lip``
    the Lipschitz constant of ``f``. Families whose Hessians are constant
    carry ``rho = nu = 0``.
    """

    mu: float
    ell: float
    rho: float = 0.0
    nu: float = 0.0
    C_lip: float = 0.0

    def __post_init__(self):
        if not self.mu > 0 or not self.ell > 0:
            raise ValueError("mu and ell must be positive")
        if self.rho < 0 or self.nu < 0 or self.C_lip < 0:
            raise ValueError("rho, nu and C_lip must be nonnegative")
        if self.ell < self.mu:
            raise ValueError("ell must be at least mu")

    @property
    def ell_bar(self) -> float:
        return max(self.C_lip, self.ell, self.nu, self.rho)

    @property
    def kappa(self) -> float:
        return self.ell_bar / self.mu


@dataclass
class GroundTruth:
    phi: float
    grad_phi: np.ndarray
    hess_phi_min_eig: float
    xi: float
    y_star: np.ndarray


def _as_vec(v) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(-1)


class BilevelOracle:
    """Base class for ``min_x f(x, y*(x))`` with ``y*(x) = argmin_y g(x, y)``.

    Subclasses implement values, partial gradients and the dense Hessian
    blocks. ``hess_*_xy`` has shape ``(d_x, d_y)``. Hessian-vector products
    default to dense products and may be overridden. The ``lag_*`` methods
    evaluate the blocks of ``f + lam * g`` as single oracle calls.
    """

    d_x: int
    d_y: int
    params: SmoothnessParams | None = None

    @property
    def dims(self) -> tuple[int, int]:
        return self.d_x, self.d_y

    def f_val(self, x, y) -> float:
        raise NotImplementedError

    def g_val(self, x, y) -> float:
        raise NotImplementedError

    def grad_f_x(self, x, y):
        raise NotImplementedError

    def grad_f_y(self, x, y):
        raise NotImplementedError

    def grad_g_x(self, x, y):
        raise NotImplementedError

    def grad_g_y(self, x, y):
        raise NotImplementedError

    def hess_f_xx(self, x, y):
        raise NotImplementedError

    def hess_f_xy(self, x, y):
        raise NotImplementedError

    def hess_f_yy(self, x, y):
        raise NotImplementedError

    def hess_g_xx(self, x, y):
        raise NotImplementedError

    def hess_g_xy(self, x, y):
        raise NotImplementedError

    def hess_g_yy(self, x, y):
        raise NotImplementedError

    # matrix-free products; "xy" maps R^{d_y} -> R^{d_x}, "yx" the transpose
    def hvp_f_xx(self, x, y, v):
        return self.hess_f_xx(x, y) @ v

    def hvp_f_xy(self, x, y, v):
        return self.hess_f_xy(x, y) @ v

    def hvp_f_yx(self, x, y, u):
        return self.hess_f_xy(x, y).T @ u

    def hvp_f_yy(self, x, y, v):
        return self.hess_f_yy(x, y) @ v

    def hvp_g_xx(self, x, y, v):
        return self.hess_g_xx(x, y) @ v

    def hvp_g_xy(self, x, y, v):
        return self.hess_g_xy(x, y) @ v

    def hvp_g_yx(self, x, y, u):
        return self.hess_g_xy(x, y).T @ u

    def hvp_g_yy(self, x, y, v):
        return self.hess_g_yy(x, y) @ v

    def lag_grad_y(self, x, y, lam):
        return self.grad_f_y(x, y) + lam * self.grad_g_y(x, y)

    def lag_hess_xx(self, x, y, lam):
        return self.hess_f_xx(x, y) + lam * self.hess_g_xx(x, y)

    def lag_hess_xy(self, x, y, lam):
        return self.hess_f_xy(x, y) + lam * self.hess_g_xy(x, y)

    def lag_hess_yy(self, x, y, lam):
        return self.hess_f_yy(x, y) + lam * self.hess_g_yy(x, y)

    def lag_hvp_xx(self, x, y, lam, v):
        return self.hvp_f_xx(x, y, v) + lam * self.hvp_g_xx(x, y, v)

    def lag_hvp_xy(self, x, y, lam, v):
        return self.hvp_f_xy(x, y, v) + lam * self.hvp_g_xy(x, y, v)

    def lag_hvp_yx(self, x, y, lam, u):
        return self.hvp_f_yx(x, y, u) + lam * self.hvp_g_yx(x, y, u)

    def lag_hvp_yy(self, x, y, lam, v):
        return self.hvp_f_yy(x, y, v) + lam * self.hvp_g_yy(x, y, v)


class MinimaxOracle:
    """Base class for ``min_x max_y f(x, y)`` with ``f(x, .)`` strongly concave."""

    d_x: int
    d_y: int
    params: SmoothnessParams | None = None

    @property
    def dims(self) -> tuple[int, int]:
        return self.d_x, self.d_y

    def f_val(self, x, y) -> float:
        raise NotImplementedError

    def grad_f_x(self, x, y):
        raise NotImplementedError

    def grad_f_y(self, x, y):
        raise NotImplementedError

    def hess_f_xx(self, x, y):
        raise NotImplementedError

    def hess_f_xy(self, x, y):
        raise NotImplementedError

    def hess_f_yy(self, x, y):
        raise NotImplementedError

    def hvp_f_xx(self, x, y, v):
        return self.hess_f_xx(x, y) @ v

    def hvp_f_xy(self, x, y, v):
        return self.hess_f_xy(x, y) @ v

    def hvp_f_yx(self, x, y, u):
        return self.hess_f_xy(x, y).T @ u

    def hvp_f_yy(self, x, y, v):
        return self.hess_f_yy(x, y) @ v


# ---------------------------------------------------------------------------
# quadratic family


class QuadraticBilevel(BilevelOracle):
    """f = ½xᵀAx + xᵀBy + ½yᵀCy + aᵀx + bᵀy,  g = ½yᵀQy + yᵀPx + qᵀy."""

    def __init__(self, A, B, C, a, b, Q, P, q, params: SmoothnessParams | None = None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.P = np.atleast_2d(np.asarray(P, dtype=float))
        self.a, self.b, self.q = _as_vec(a), _as_vec(b), _as_vec(q)
        self.d_x, self.d_y = self.A.shape[0], self.Q.shape[0]
        if self.B.shape != (self.d_x, self.d_y) or self.P.shape != (self.d_y, self.d_x):
            raise ValueError("inconsistent block shapes")
        eig_q = np.linalg.eigvalsh(self.Q)
        if eig_q[0] <= 0:
            raise ValueError("Q must be positive definite")
        self.params = params if params is not None else self._default_params(eig_q[0])
        self.closed_form = QuadraticSolution(self)

    def _default_params(self, mu: float) -> SmoothnessParams:
        zx = np.zeros((self.d_x, self.d_x))
        hf = np.block([[self.A, self.B], [self.B.T, self.C]])
        hg = np.block([[zx, self.P.T], [self.P, self.Q]])
        ell = max(np.linalg.norm(hf, 2), np.linalg.norm(hg, 2), mu)
        # f is not globally Lipschitz; its constant is pinned to ell
        return SmoothnessParams(mu=mu, ell=ell, rho=0.0, nu=0.0, C_lip=ell)

    def f_val(self, x, y):
        return float(0.5 * x @ self.A @ x + x @ self.B @ y + 0.5 * y @ self.C @ y + self.a @ x + self.b @ y)

    def g_val(self, x, y):
        return float(0.5 * y @ self.Q @ y + y @ self.P @ x + self.q @ y)

    def grad_f_x(self, x, y):
        return self.A @ x + self.B @ y + self.a

    def grad_f_y(self, x, y):
        return self.B.T @ x + self.C @ y + self.b

    def grad_g_x(self, x, y):
        return self.P.T @ y

    def grad_g_y(self, x, y):
        return self.Q @ y + self.P @ x + self.q

    def hess_f_xx(self, x, y):
        return self.A.copy()

    def hess_f_xy(self, x, y):
        return self.B.copy()

    def hess_f_yy(self, x, y):
        return self.C.copy()

    def hess_g_xx(self, x, y):
        return np.zeros((self.d_x, self.d_x))

    def hess_g_xy(self, x, y):
        return self.P.T.copy()

    def hess_g_yy(self, x, y):
        return self.Q.copy()

    def hvp_g_xx(self, x, y, v):
        return np.zeros(self.d_x)


class QuadraticSolution:
    """Closed forms for :class:`QuadraticBilevel`: y*, y*_λ, φ and L*_λ with derivatives."""

    def __init__(self, prob: QuadraticBilevel):
        self.prob = prob
        self._Qinv_P = np.linalg.solve(prob.Q, prob.P)
        self._Qinv_q = np.linalg.solve(prob.Q, prob.q)
        # y*(x) = J x + j
        self.J = -self._Qinv_P
        self.j = -self._Qinv_q
        p = prob
        H = p.A + p.B @ self.J + self.J.T @ p.B.T + self.J.T @ p.C @ self.J
        self._hess_phi = 0.5 * (H + H.T)
        self._grad_phi_0 = p.a + p.B @ self.j + self.J.T @ (p.b + p.C @ self.j)

    def y_star(self, x) -> np.ndarray:
        return self.J @ x + self.j

    def y_star_lam(self, x, lam: float) -> np.ndarray:
        p = self.prob
        rhs = p.B.T @ x + p.b + lam * (p.P @ x + p.q)
        return -np.linalg.solve(p.C + lam * p.Q, rhs)

    def phi(self, x) -> float:
        return self.prob.f_val(x, self.y_star(x))

    def grad_phi(self, x) -> np.ndarray:
        return self._hess_phi @ x + self._grad_phi_0

    def hess_phi(self, x=None) -> np.ndarray:
        return self._hess_phi.copy()

    def minimizer(self) -> np.ndarray:
        """Stationary point of φ (the global minimizer when ∇²φ ≻ 0)."""
        return np.linalg.solve(self._hess_phi, -self._grad_phi_0)

    @property
    def phi_star(self) -> float:
        if np.linalg.eigvalsh(self._hess_phi)[0] <= 0:
            return -np.inf
        return self.phi(self.minimizer())

    def lagrangian_value(self, x, lam: float) -> float:
        p = self.prob
        y_lam = self.y_star_lam(x, lam)
        ys = self.y_star(x)
        return p.f_val(x, y_lam) + lam * (p.g_val(x, y_lam) - p.g_val(x, ys))

    def lagrangian_grad(self, x, lam: float) -> np.ndarray:
        p = self.prob
        y_lam = self.y_star_lam(x, lam)
        ys = self.y_star(x)
        return p.grad_f_x(x, y_lam) + lam * (p.grad_g_x(x, y_lam) - p.grad_g_x(x, ys))

    def lagrangian_hess(self, lam: float) -> np.ndarray:
        p = self.prob
        Lxy = p.B + lam * p.P.T
        Lyy = p.C + lam * p.Q
        H = p.A - Lxy @ np.linalg.solve(Lyy, Lxy.T) + lam * p.P.T @ self._Qinv_P
        return 0.5 * (H + H.T)

    def ground_truth(self, x) -> GroundTruth:
        x = _as_vec(x)
        min_eig = float(np.linalg.eigvalsh(self._hess_phi)[0])
        return GroundTruth(
            phi=self.phi(x),
            grad_phi=self.grad_phi(x),
            hess_phi_min_eig=min_eig,
            xi=max(-min_eig, 0.0),
            y_star=self.y_star(x),
        )


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _random_block(rng, rows, cols, norm):
    m = rng.standard_normal((rows, cols))
    return norm * m / max(np.linalg.norm(m, 2), 1e-300)


def make_quadratic_bilevel(
    seed: int,
    d_x: int,
    d_y: int,
    cond: float,
    ell_q: float = 1.0,
    coupling: float = 0.5,
    hyper_curvature: float | None = 0.1,
):
    """Random quadratic bilevel instance with closed-form hyperobjective.

    The eigenvalues of ``Q`` are log-uniform on ``[ell_q / cond, ell_q]`` with
    both endpoints attained. ``coupling`` is the spectral norm of ``P`` and of
    the blocks of ``f``. When ``hyper_curvature`` is set, ``A`` is shifted so
    that the smallest eigenvalue of ``∇²φ`` equals it (making φ bounded below).

    Returns ``(oracle, closed_form)``.
    """
    if cond < 1:
        raise ValueError("cond must be at least 1")
    if d_x < 1 or d_y < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    mu = ell_q / cond
    if d_y == 1:
        eigs = np.array([mu])
    else:
        inner = np.exp(rng.uniform(np.log(mu), np.log(ell_q), size=d_y - 2))
        eigs = np.sort(np.concatenate([[mu, ell_q], inner]))
    U = _random_orthogonal(rng, d_y)
    Q = (U * eigs) @ U.T
    Q = 0.5 * (Q + Q.T)
    P = _random_block(rng, d_y, d_x, coupling)
    A0 = _random_block(rng, d_x, d_x, coupling)
    A = 0.5 * (A0 + A0.T)
    B = _random_block(rng, d_x, d_y, coupling)
    C0 = _random_block(rng, d_y, d_y, coupling)
    C = 0.5 * (C0 + C0.T)
    a = rng.standard_normal(d_x)
    b = rng.standard_normal(d_y)
    q = rng.standard_normal(d_y)
    prob = QuadraticBilevel(A, B, C, a, b, Q, P, q)
    if hyper_curvature is not None:
        shift = hyper_curvature - np.linalg.eigvalsh(prob.closed_form.hess_phi())[0]
        prob = QuadraticBilevel(A + shift * np.eye(d_x), B, C, a, b, Q, P, q)
    return prob, prob.closed_form


# ---------------------------------------------------------------------------
# synthetic minimax


def w_piecewise(x, eps: float, L: float):
    """Six-branch cubic ``w`` with a strict saddle at 0 and valleys at ±(L+1)√eps.

    Returns ``(value, first derivative, second derivative)``; accepts scalars
    or arrays.
    """
    if eps <= 0 or L < 1:
        raise ValueError("need eps > 0 and L >= 1")
    xa = np.asarray(x, dtype=float)
    s = np.sqrt(eps)
    floor = (3 * L + 1) * eps**1.5 / 3
    um = xa + (L + 1) * s
    up = xa - (L + 1) * s
    conds = [xa <= -L * s, xa <= -s, xa <= 0, xa <= s, xa <= L * s]
    val = np.select(
        conds,
        [
            s * um**2 - um**3 / 3 - floor,
            eps * xa + eps**1.5 / 3,
            -s * xa**2 - xa**3 / 3,
            -s * xa**2 + xa**3 / 3,
            -eps * xa + eps**1.5 / 3,
        ],
        s * up**2 + up**3 / 3 - floor,
    )
    d1 = np.select(
        conds,
        [2 * s * um - um**2, np.full_like(xa, eps), -2 * s * xa - xa**2, -2 * s * xa + xa**2, np.full_like(xa, -eps)],
        2 * s * up + up**2,
    )
    d2 = np.select(
        conds,
        [2 * s - 2 * um, np.zeros_like(xa), -2 * s - 2 * xa, -2 * s + 2 * xa, np.zeros_like(xa)],
        2 * s + 2 * up,
    )
    if xa.ndim == 0:
        return float(val), float(d1), float(d2)
    return val, d1, d2


class SyntheticMinimax(MinimaxOracle):
    """f(x, y) = w(x₃) − 10y₁² + x₁y₁ − 5y₂² + x₂y₂."""

    d_x, d_y = 3, 2

    def __init__(self, eps: float = 0.01, L: float = 3.0):
        if eps <= 0 or L < 1:
            raise ValueError("need eps > 0 and L >= 1")
        self.eps, self.L = eps, L
        ell = 10.0 + np.sqrt(101.0)  # spectral norm of the (x1, y1) block
        self.params = SmoothnessParams(mu=10.0, ell=ell, rho=2.0, nu=0.0, C_lip=ell)
        self.closed_form = SyntheticMinimaxSolution(self)

    def _w(self, x3):
        return w_piecewise(x3, self.eps, self.L)

    def f_val(self, x, y):
        return self._w(x[2])[0] - 10 * y[0] ** 2 + x[0] * y[0] - 5 * y[1] ** 2 + x[1] * y[1]

    def grad_f_x(self, x, y):
        return np.array([y[0], y[1], self._w(x[2])[1]])

    def grad_f_y(self, x, y):
        return np.array([-20 * y[0] + x[0], -10 * y[1] + x[1]])

    def hess_f_xx(self, x, y):
        return np.diag([0.0, 0.0, self._w(x[2])[2]])

    def hess_f_xy(self, x, y):
        return np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])

    def hess_f_yy(self, x, y):
        return np.diag([-20.0, -10.0])


class SyntheticMinimaxSolution:
    def __init__(self, prob: SyntheticMinimax):
        self.prob = prob

    @property
    def phi_star(self) -> float:
        return -(3 * self.prob.L + 1) * self.prob.eps**1.5 / 3

    @property
    def plateau_floor(self) -> float:
        """w at the far end of the linear stretch between the saddle and a valley."""
        return w_piecewise(self.prob.L * np.sqrt(self.prob.eps), self.prob.eps, self.prob.L)[0]

    def y_star(self, x) -> np.ndarray:
        return np.array([x[0] / 20, x[1] / 10])

    def phi(self, x) -> float:
        return self.prob._w(x[2])[0] + x[0] ** 2 / 40 + x[1] ** 2 / 20

    def grad_phi(self, x) -> np.ndarray:
        return np.array([x[0] / 20, x[1] / 10, self.prob._w(x[2])[1]])

    def hess_phi(self, x) -> np.ndarray:
        return np.diag([1 / 20, 1 / 10, self.prob._w(x[2])[2]])

    def ground_truth(self, x) -> GroundTruth:
        x = _as_vec(x)
        min_eig = float(np.linalg.eigvalsh(self.hess_phi(x))[0])
        return GroundTruth(self.phi(x), self.grad_phi(x), min_eig, max(-min_eig, 0.0), self.y_star(x))


def make_synthetic_minimax(eps: float = 0.01, L: float = 3.0):
    """Returns ``(oracle, closed_form)`` for the saddle-escape test problem."""
    prob = SyntheticMinimax(eps, L)
    return prob, prob.closed_form


# ---------------------------------------------------------------------------
# data hypercleaning


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def _softplus(t):
    return np.logaddexp(0.0, t)


class HyperCleaning(BilevelOracle):
    """Per-sample weights ``sigmoid(x_i)`` on a noisy training set.

    Upper level: mean validation logistic loss of ``y``. Lower level: weighted
    mean training logistic loss plus ``c * ||y||^2``.
    """

    def __init__(self, A_tr, b_tr, A_val, b_val, c: float, flipped: np.ndarray, clean_labels: np.ndarray):
        self.A_tr = np.asarray(A_tr, dtype=float)
        self.b_tr = np.asarray(b_tr, dtype=float)
        self.A_val = np.asarray(A_val, dtype=float)
        self.b_val = np.asarray(b_val, dtype=float)
        self.c = float(c)
        self.flipped = flipped
        self.clean_labels = clean_labels
        self.n_tr, self.d_y = self.A_tr.shape
        self.n_val = self.A_val.shape[0]
        self.d_x = self.n_tr
        self.params = self._estimate_params()

    def _estimate_params(self) -> SmoothnessParams:
        # logistic curvature is at most 1/4; sigmoid derivatives are bounded
        # by 1/4 and 1/(6√3)
        s_tr = np.linalg.norm(self.A_tr, 2) ** 2 / self.n_tr
        s_val = np.linalg.norm(self.A_val, 2) ** 2 / self.n_val
        row = np.linalg.norm(self.A_tr, axis=1).max()
        mu = 2 * self.c
        ell = max(0.25 * s_tr + 2 * self.c, 0.25 * s_val, row / self.n_tr, mu)
        return SmoothnessParams(mu=mu, ell=ell, rho=ell, nu=ell, C_lip=ell)

    def _train_terms(self, x, y):
        z = self.A_tr @ y
        p = _sigmoid(z)
        loss = _softplus(z) - self.b_tr * z
        sx = _sigmoid(x)
        ds = sx * (1 - sx)
        return z, p, loss, sx, ds

    def f_val(self, x, y):
        z = self.A_val @ y
        return float(np.mean(_softplus(z) - self.b_val * z))

    def g_val(self, x, y):
        _, _, loss, sx, _ = self._train_terms(x, y)
        return float(np.mean(sx * loss) + self.c * y @ y)

    def grad_f_x(self, x, y):
        return np.zeros(self.d_x)

    def grad_f_y(self, x, y):
        z = self.A_val @ y
        return self.A_val.T @ (_sigmoid(z) - self.b_val) / self.n_val

    def grad_g_x(self, x, y):
        _, _, loss, _, ds = self._train_terms(x, y)
        return ds * loss / self.n_tr

    def grad_g_y(self, x, y):
        _, p, _, sx, _ = self._train_terms(x, y)
        return self.A_tr.T @ (sx * (p - self.b_tr)) / self.n_tr + 2 * self.c * y

    def hess_f_xx(self, x, y):
        return np.zeros((self.d_x, self.d_x))

    def hess_f_xy(self, x, y):
        return np.zeros((self.d_x, self.d_y))

    def hess_f_yy(self, x, y):
        p = _sigmoid(self.A_val @ y)
        return (self.A_val.T * (p * (1 - p))) @ self.A_val / self.n_val

    def hess_g_xx(self, x, y):
        _, _, loss, sx, ds = self._train_terms(x, y)
        return np.diag(ds * (1 - 2 * sx) * loss / self.n_tr)

    def hess_g_xy(self, x, y):
        _, p, _, _, ds = self._train_terms(x, y)
        return (ds * (p - self.b_tr))[:, None] * self.A_tr / self.n_tr

    def hess_g_yy(self, x, y):
        _, p, _, sx, _ = self._train_terms(x, y)
        H = (self.A_tr.T * (sx * p * (1 - p))) @ self.A_tr / self.n_tr
        return H + 2 * self.c * np.eye(self.d_y)

    def hvp_f_xx(self, x, y, v):
        return np.zeros(self.d_x)

    def hvp_f_xy(self, x, y, v):
        return np.zeros(self.d_x)

    def hvp_f_yx(self, x, y, u):
        return np.zeros(self.d_y)

    def hvp_f_yy(self, x, y, v):
        z = self.A_val @ y
        p = _sigmoid(z)
        return self.A_val.T @ (p * (1 - p) * (self.A_val @ v)) / self.n_val

    def hvp_g_xx(self, x, y, v):
        _, _, loss, sx, ds = self._train_terms(x, y)
        return ds * (1 - 2 * sx) * loss * v / self.n_tr

    def hvp_g_xy(self, x, y, v):
        _, p, _, _, ds = self._train_terms(x, y)
        return ds * (p - self.b_tr) * (self.A_tr @ v) / self.n_tr

    def hvp_g_yx(self, x, y, u):
        _, p, _, _, ds = self._train_terms(x, y)
        return self.A_tr.T @ (ds * (p - self.b_tr) * u) / self.n_tr

    def hvp_g_yy(self, x, y, v):
        _, p, _, sx, _ = self._train_terms(x, y)
        return self.A_tr.T @ (sx * p * (1 - p) * (self.A_tr @ v)) / self.n_tr + 2 * self.c * v

    def sample_weights(self, x) -> np.ndarray:
        return _sigmoid(np.asarray(x, dtype=float))

    def validation_loss(self, y) -> float:
        return self.f_val(None, y)


def make_hypercleaning(features, labels, val_split: float = 0.3, noise_rate: float = 0.0, c: float = 1e-3, seed: int = 0):
    """Build the hypercleaning oracle from a labelled binary dataset.

    Samples are shuffled by ``seed``; the first ``val_split`` fraction becomes
    the validation set. A ``noise_rate`` fraction of training labels is
    flipped and the flipped indices are stored on the oracle as ``flipped``.
    """
    if not 0 <= noise_rate < 1:
        raise ValueError("noise_rate must lie in [0, 1)")
    if c <= 0:
        raise ValueError("c must be positive")
    if hasattr(features, "toarray"):
        features = features.toarray()
    X = np.asarray(features, dtype=float)
    yl = np.asarray(labels, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != yl.shape[0]:
        raise ValueError("features and labels disagree in sample count")
    if not np.all((yl == 0) | (yl == 1)):
        raise ValueError("labels must be binary 0/1")
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    perm = rng.permutation(n)
    n_val = int(round(val_split * n))
    n_tr = n - n_val
    if n_val < 2 or n_tr < 2:
        raise ValueError("each split needs at least 2 samples")
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    b_tr = yl[tr_idx].copy()
    n_flip = int(np.floor(noise_rate * n_tr))
    flipped = np.sort(rng.choice(n_tr, size=n_flip, replace=False)) if n_flip else np.array([], dtype=int)
    clean = b_tr.copy()
    b_tr[flipped] = 1 - b_tr[flipped]
    return HyperCleaning(X[tr_idx], b_tr, X[val_idx], yl[val_idx], c, flipped, clean)


def synthetic_logistic_data(n: int, d: int, seed: int = 0, margin: float = 3.0):
    """Gaussian features with labels drawn from a well-separated logistic model."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w = rng.standard_normal(d)
    w *= margin / np.linalg.norm(w)
    labels = (rng.uniform(size=n) < _sigmoid(X @ w)).astype(float)
    return X, labels


# ---------------------------------------------------------------------------
# exponential-ridge hyperparameter tuning


def _softmax_rows(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _ce_terms(A, labels, Y):
    Z = A @ Y.T
    P = _softmax_rows(Z)
    n = A.shape[0]
    logz = np.log(np.exp(Z - Z.max(axis=1, keepdims=True)).sum(axis=1)) + Z.max(axis=1)
    loss = float(np.mean(logz - Z[np.arange(n), labels]))
    G = P.copy()
    G[np.arange(n), labels] -= 1
    grad = G.T @ A / n
    return loss, grad, P


def _ce_hessian(A, P):
    n = A.shape[0]
    S = np.einsum("ij,jm->ijm", P, np.eye(P.shape[1])) - P[:, :, None] * P[:, None, :]
    H = np.einsum("ijm,ik,il->jkml", S, A, A) / n
    c, p = P.shape[1], A.shape[1]
    return H.reshape(c * p, c * p)


class ExpRidgeTuning(BilevelOracle):
    """Learn per-feature ridge strengths ``exp(x_k)`` for multinomial regression.

    ``y`` is the flattened ``(classes, features)`` weight matrix in row-major
    order, so coordinate ``(j, k)`` sits at index ``j * p + k``.
    """

    def __init__(self, A_tr, b_tr, A_val, b_val, seed: int = 0):
        self.A_tr = np.asarray(A_tr, dtype=float)
        self.A_val = np.asarray(A_val, dtype=float)
        self.b_tr = np.asarray(b_tr).astype(int)
        self.b_val = np.asarray(b_val).astype(int)
        if self.A_tr.ndim != 2 or self.A_val.ndim != 2 or self.A_tr.shape[0] == 0 or self.A_val.shape[0] == 0:
            raise ValueError("empty or malformed feature matrices")
        if self.A_tr.shape[1] != self.A_val.shape[1]:
            raise ValueError("train and validation feature dimensions differ")
        if self.A_tr.shape[0] != self.b_tr.size or self.A_val.shape[0] != self.b_val.size:
            raise ValueError("label count mismatch")
        self.n_classes = int(max(self.b_tr.max(), self.b_val.max())) + 1
        if self.n_classes < 2 or np.unique(self.b_tr).size < 2:
            raise ValueError("need at least two classes in the training labels")
        if self.b_tr.min() < 0 or self.b_val.min() < 0:
            raise ValueError("labels must be nonnegative class indices")
        self.seed = seed
        self.p = self.A_tr.shape[1]
        self.d_x = self.p
        self.d_y = self.n_classes * self.p
        self._scale = 1.0 / (self.n_classes * self.p)
        self.params = None

    def _Y(self, y):
        return np.asarray(y, dtype=float).reshape(self.n_classes, self.p)

    def f_val(self, x, y):
        return _ce_terms(self.A_val, self.b_val, self._Y(y))[0]

    def g_val(self, x, y):
        Y = self._Y(y)
        loss = _ce_terms(self.A_tr, self.b_tr, Y)[0]
        return loss + 0.5 * self._scale * float(np.sum(np.exp(x)[None, :] * Y**2))

    def grad_f_x(self, x, y):
        return np.zeros(self.d_x)

    def grad_f_y(self, x, y):
        return _ce_terms(self.A_val, self.b_val, self._Y(y))[1].reshape(-1)

    def grad_g_x(self, x, y):
        Y = self._Y(y)
        return 0.5 * self._scale * np.exp(x) * np.sum(Y**2, axis=0)

    def grad_g_y(self, x, y):
        Y = self._Y(y)
        grad = _ce_terms(self.A_tr, self.b_tr, Y)[1]
        return (grad + self._scale * np.exp(x)[None, :] * Y).reshape(-1)

    def hess_f_xx(self, x, y):
        return np.zeros((self.d_x, self.d_x))

    def hess_f_xy(self, x, y):
        return np.zeros((self.d_x, self.d_y))

    def hess_f_yy(self, x, y):
        P = _ce_terms(self.A_val, self.b_val, self._Y(y))[2]
        return _ce_hessian(self.A_val, P)

    def hess_g_xx(self, x, y):
        return np.diag(self.grad_g_x(x, y))

    def hess_g_xy(self, x, y):
        Y = self._Y(y)
        out = np.zeros((self.p, self.n_classes, self.p))
        k = np.arange(self.p)
        out[k, :, k] = (self._scale * np.exp(x)[:, None] * Y.T)
        return out.reshape(self.p, self.d_y)

    def hess_g_yy(self, x, y):
        P = _ce_terms(self.A_tr, self.b_tr, self._Y(y))[2]
        reg = np.tile(self._scale * np.exp(x), self.n_classes)
        return _ce_hessian(self.A_tr, P) + np.diag(reg)


def make_exp_ridge_tuning(train, val, seed: int = 0) -> ExpRidgeTuning:
    """``train`` and ``val`` are ``(features, integer labels)`` pairs."""
    A_tr, b_tr = train
    A_val, b_val = val
    if hasattr(A_tr, "toarray"):
        A_tr = A_tr.toarray()
    if hasattr(A_val, "toarray"):
        A_val = A_val.toarray()
    return ExpRidgeTuning(A_tr, b_tr, A_val, b_val, seed)


def synthetic_multinomial_data(n: int, p: int, n_classes: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    W = rng.standard_normal((n_classes, p))
    probs = _softmax_rows(X @ W.T)
    labels = np.array([rng.choice(n_classes, p=row) for row in probs])
    return X, labels


# ---------------------------------------------------------------------------
# ground truth


def _inner_solve(grad, z0, ell, mu, tol, max_iter=200_000):
    """AGD restarted every block until ``||grad|| <= tol``."""
    kappa = ell / mu
    theta = (np.sqrt(kappa) - 1) / (np.sqrt(kappa) + 1)
    block = max(int(np.ceil(2 * np.sqrt(kappa))), 10)
    z = np.array(z0, dtype=float)
    used = 0
    best, best_norm = z.copy(), np.linalg.norm(grad(z))
    while used < max_iter:
        if best_norm <= tol:
            return best
        z_prev, zt = best.copy(), best.copy()
        for _ in range(block):
            z_new = zt - grad(zt) / ell
            zt = z_new + theta * (z_new - z_prev)
            z_prev = z_new
        used += block
        n = np.linalg.norm(grad(z_prev))
        if not np.isfinite(n):
            break
        if n < best_norm:
            best, best_norm = z_prev, n
        else:
            # restart from the best point with plain gradient steps
            for _ in range(block):
                best = best - grad(best) / ell
            best_norm = np.linalg.norm(grad(best))
    if best_norm <= tol:
        return best
    raise InnerSolveError(f"inner solve stalled at gradient norm {best_norm:.3e} (tol {tol:.1e})")


def _lower_bounds(oracle, x, y0, minimax):
    """Curvature interval of the inner problem at (x, y0), from the oracle's Hessian."""
    H = oracle.hess_f_yy(x, y0) if minimax else oracle.hess_g_yy(x, y0)
    eig = np.linalg.eigvalsh(-H if minimax else H)
    mu = eig[0]
    ell = eig[-1]
    if oracle.params is not None:
        mu = min(mu, oracle.params.mu)
        ell = max(ell, oracle.params.ell)
    return 2.0 * ell, 0.5 * mu


def _implicit_grad(oracle, x, tol, y0, minimax):
    if minimax:
        ell, mu = _lower_bounds(oracle, x, y0, True)
        y = _inner_solve(lambda v: -oracle.grad_f_y(x, v), y0, ell, mu, tol)
        return oracle.grad_f_x(x, y), y
    ell, mu = _lower_bounds(oracle, x, y0, False)
    y = _inner_solve(lambda v: oracle.grad_g_y(x, v), y0, ell, mu, tol)
    corr = oracle.hess_g_xy(x, y) @ linalg.solve(oracle.hess_g_yy(x, y), oracle.grad_f_y(x, y), assume_a="pos")
    return oracle.grad_f_x(x, y) - corr, y


def ground_truth_eval(oracle, x, tol: float = 1e-10, use_closed_form: bool = True) -> GroundTruth:
    """Hyperobjective value, gradient and smallest Hessian eigenvalue at ``x``.

    Uses the family's closed form when available. Otherwise the inner problem
    is solved by restarted AGD to gradient norm ``tol``, the gradient comes
    from the implicit-function formula and the Hessian from central
    differences of that gradient with step ``sqrt(tol)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = _as_vec(x)
    if use_closed_form and getattr(oracle, "closed_form", None) is not None:
        return oracle.closed_form.ground_truth(x)
    minimax = isinstance(oracle, MinimaxOracle)
    grad_phi, y = _implicit_grad(oracle, x, tol, np.zeros(oracle.d_y), minimax)
    phi = float(oracle.f_val(x, y))
    h = np.sqrt(tol)
    d = x.size
    H = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        gp, _ = _implicit_grad(oracle, x + e, tol, y, minimax)
        gm, _ = _implicit_grad(oracle, x - e, tol, y, minimax)
        H[:, i] = (gp - gm) / (2 * h)
    H = 0.5 * (H + H.T)
    min_eig = float(np.linalg.eigvalsh(H)[0])
    return GroundTruth(phi, grad_phi, min_eig, max(-min_eig, 0.0), y)


def validate_oracle(oracle: BilevelOracle, points, mu: float | None = None, fd_tol: float = 1e-5) -> None:
    """Check symmetry, gradient consistency and strong convexity at ``points``.

    ``points`` is an iterable of ``(x, y)`` pairs. Raises ``AssertionError``
    describing the first violation.
    """
    mu = oracle.params.mu if mu is None else mu
    for x, y in points:
        for name in ("hess_f_xx", "hess_f_yy", "hess_g_xx", "hess_g_yy"):
            M = getattr(oracle, name)(x, y)
            assert np.all(np.isfinite(M)), f"{name} not finite"
            scale = max(1.0, np.abs(M).max())
            assert np.abs(M - M.T).max() <= 1e-12 * scale, f"{name} not symmetric"
        h = 1e-6
        fd = np.array(
            [(oracle.g_val(x, y + h * e) - oracle.g_val(x, y - h * e)) / (2 * h) for e in np.eye(y.size)]
        )
        gy = oracle.grad_g_y(x, y)
        assert np.linalg.norm(fd - gy) <= fd_tol * max(1.0, np.linalg.norm(gy)), "grad_g_y disagrees with g_val"
        lam_min = np.linalg.eigvalsh(oracle.hess_g_yy(x, y))[0]
        assert lam_min >= mu - 1e-8, f"lower level not {mu}-strongly convex (min eig {lam_min})"
