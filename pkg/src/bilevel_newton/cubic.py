"""Solvers for the cubic-regularized model ``m(s) = g's + s'Hs/2 + M/6 ||s||^3``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize


class CubicSolverError(RuntimeError):
    pass


@dataclass
class CubicModel:
    """Model gradient ``g``, curvature ``H`` (dense array or anything with ``@``) and weight ``M``."""

    g: np.ndarray
    H: object
    M: float

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        if not self.M > 0:
            raise ValueError("M must be positive")

    @property
    def dense(self) -> bool:
        return isinstance(self.H, np.ndarray)

    def hvp(self, v) -> np.ndarray:
        return np.asarray(self.H @ v, dtype=float).reshape(-1)


@dataclass
class CubicResult:
    s: np.ndarray
    delta: float
    branch: str
    hard_case: bool = False
    n_iter: int = 0


def cubic_model_value(model: CubicModel, s, Hs=None) -> float:
    s = np.asarray(s, dtype=float)
    if Hs is None:
        Hs = model.hvp(s) if np.any(s) else np.zeros_like(s)
    ns = np.linalg.norm(s)
    return float(model.g @ s + 0.5 * s @ Hs + model.M / 6 * ns**3)


def cubic_model_grad(model: CubicModel, s, Hs=None) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if Hs is None:
        Hs = model.hvp(s) if np.any(s) else np.zeros_like(s)
    return model.g + Hs + 0.5 * model.M * np.linalg.norm(s) * s


def cubic_solve_exact(model: CubicModel) -> CubicResult:
    """Global minimizer of a dense cubic model via eigendecomposition.

    The step is ``s(r) = -(H + (M r / 2) I)^{-1} g`` with ``r = ||s(r)||``
    found on ``r > max(0, -2 lambda_min / M)``; the root is sought in the
    shift ``lambda_min + M r / 2`` rather than in ``r``. When ``g`` has no component
    along the bottom eigenspace and the interior root does not exist, the
    step is completed along that eigenspace to the required length.
    """
    if not model.dense:
        raise ValueError("exact solver needs a dense H")
    H = 0.5 * (model.H + model.H.T)
    g, M = model.g, model.M
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
        raise CubicSolverError("non-finite model data")
    lam, V = np.linalg.eigh(H)
    gt = V.T @ g
    gnorm = np.linalg.norm(g)
    lam_min = lam[0]
    r_lo = max(0.0, -2.0 * lam_min / M)
    eig_tol = 1e-12 * max(1.0, np.abs(lam).max())
    bottom = lam <= lam_min + eig_tol
    nz = gt != 0

    # work in the shift delta = lam_min + M r / 2 so near-singular denominators keep full precision
    gap = lam - lam_min

    def step_norm(delta):
        with np.errstate(over="ignore", divide="ignore"):
            return np.linalg.norm(gt[nz] / (gap[nz] + delta))

    def radius(delta):
        return 2.0 * (delta - lam_min) / M

    orth = np.all(np.abs(gt[bottom]) <= 1e-12 * gnorm)
    if gnorm == 0 or (orth and r_lo > 0):
        rest = ~bottom & nz
        coef = np.zeros_like(gt)
        coef[rest] = -gt[rest] / (lam[rest] + 0.5 * M * r_lo)
        n_rest = np.linalg.norm(coef)
        if n_rest <= r_lo:
            tau = math.sqrt(max(r_lo**2 - n_rest**2, 0.0))
            i0 = int(np.flatnonzero(bottom)[0])
            sign = -np.sign(gt[i0]) if gt[i0] != 0 else 1.0
            coef[i0] += sign * tau
            s = V @ coef
            return CubicResult(s, cubic_model_value(model, s, H @ s), "exact", hard_case=r_lo > 0)

    def secular(delta):
        # 1/||s|| - 1/r is increasing in delta and nearly linear near the root
        with np.errstate(over="ignore", divide="ignore"):
            return 1.0 / step_norm(delta) - 1.0 / radius(delta)

    base = max(lam_min, 0.0)
    lo = base + 4 * np.spacing(base)
    hi = lam_min + math.sqrt(M * gnorm) + np.abs(lam).max() + 1e-14
    while secular(hi) < 0:
        hi = base + 2.0 * (hi - base) + 1e-14
        if hi > 1e300:
            raise CubicSolverError("failed to bracket the secular root")
    if secular(lo) >= 0:
        delta = lo
    else:
        delta = optimize.brentq(secular, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    coef = np.zeros_like(gt)
    coef[nz] = -gt[nz] / (gap[nz] + delta)
    s = V @ coef
    return CubicResult(s, cubic_model_value(model, s, H @ s), "exact", hard_case=False)


def perturbation_radius(L: float, M: float, eps: float, C_sigma: float = 1.0) -> float:
    return C_sigma * M**2 * math.sqrt(eps**3 / M**3) / (4608 * (4 * L + math.sqrt(M * eps)))


def cubic_gd_iterations(L: float, M: float, eps: float, delta_prime: float, d: int, C_sigma: float = 1.0, C_H: float = 1 / 200) -> int:
    """Iteration count that makes the perturbed gradient solver succeed with probability ``1 - delta_prime``."""
    sm = math.sqrt(M * eps)
    body = (
        6 * math.log(3 + 9 * math.sqrt(d) / delta_prime)
        + 18 * math.log(6 * L / sm)
        + 14 * math.log(48 * (L + C_H * sm) / (C_sigma * sm) + 24 / C_sigma)
    )
    return int(math.ceil(19200 * L / (C_sigma * sm) * body))


def cubic_solve_gd(
    model: CubicModel,
    L: float,
    eps: float,
    delta_prime: float,
    C_sigma: float = 1.0,
    rng: np.random.Generator | None = None,
    K: int | None = None,
    tol: float | None = None,
) -> CubicResult:
    """Approximate model minimizer using only products with ``H``.

    Large gradients take the Cauchy step along ``-g``. Otherwise the
    gradient is perturbed uniformly on a small sphere and plain gradient
    descent with step ``1/(20 L)`` runs for ``K`` iterations (default from
    :func:`cubic_gd_iterations`). ``tol`` stops early once the perturbed
    model gradient falls below it.
    """
    if not (L > 0 and eps > 0 and 0 < delta_prime < 1):
        raise ValueError("need L > 0, eps > 0 and 0 < delta_prime < 1")
    g, M = model.g, model.M
    gn = np.linalg.norm(g)
    if gn >= L**2 / M:
        Hg = model.hvp(g)
        a = g @ Hg / (M * gn**2)
        Rc = -a + math.sqrt(a**2 + 2 * gn / M)
        s = -Rc * g / gn
        return CubicResult(s, cubic_model_value(model, s), "cauchy")
    rng = np.random.default_rng() if rng is None else rng
    zeta = rng.standard_normal(g.size)
    zeta /= np.linalg.norm(zeta)
    gt = g + perturbation_radius(L, M, eps, C_sigma) * zeta
    if K is None:
        K = cubic_gd_iterations(L, M, eps, delta_prime, g.size, C_sigma)
    eta = 1.0 / (20 * L)
    s = np.zeros_like(g)
    Hs = np.zeros_like(g)
    k = 0
    for k in range(1, K + 1):
        grad = gt + Hs + 0.5 * M * np.linalg.norm(s) * s
        if tol is not None and np.linalg.norm(grad) <= tol:
            k -= 1
            break
        s = s - eta * grad
        if not np.all(np.isfinite(s)):
            raise CubicSolverError("non-finite cubic iterate")
        Hs = model.hvp(s)
    return CubicResult(s, cubic_model_value(model, s, Hs), "perturbed_gd", n_iter=k)


def final_iteration_cap(L: float, M: float, eps: float) -> int:
    return 10 * int(math.ceil(400 * L**2 / (M * eps)))


def cubic_solve_final(model: CubicModel, eps: float, L: float, max_iter: int | None = None) -> np.ndarray:
    """Gradient descent on the model until its gradient norm is at most ``eps / 2``."""
    cap = final_iteration_cap(L, model.M, eps) if max_iter is None else max_iter
    eta = 1.0 / (20 * L)
    s = np.zeros_like(model.g)
    grad = model.g.copy()
    for _ in range(cap + 1):
        if np.linalg.norm(grad) <= eps / 2:
            return s
        s = s - eta * grad
        grad = model.g + model.hvp(s) + 0.5 * model.M * np.linalg.norm(s) * s
        if not np.all(np.isfinite(grad)):
            raise CubicSolverError("non-finite cubic iterate")
    raise CubicSolverError(f"final cubic solver exceeded {cap} iterations")
