"""Outer loops: cubic-regularized Newton on the penalized value function (exact, inexact and
lazy variants), lazy cubic Newton for minimax problems, and first-order baselines."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .agd import AgdConfig, ScheduleState, agd_run, schedule_K
from .cubic import CubicModel, CubicSolverError, cubic_solve_exact, cubic_solve_final, cubic_solve_gd
from .estimators import (
    LagrangianContext,
    grad_estimate,
    hess_estimate,
    hess_estimate_cheb,
    lagrangian_inner_oracle,
    lower_inner_oracle,
    minimax_grad,
    minimax_hess,
)
from .problems import MinimaxOracle, SmoothnessParams, _inner_solve, ground_truth_eval
from .telemetry import OracleCounter, Trace, counted

# accuracy constants for the gradient and Hessian estimates
FSBA_CONSTANTS = (1 / 192, 1 / 48)
LAZY_CONSTANTS = (1 / 576, 1 / 288)
INEXACT_CONSTANTS = (1 / 240, 1 / 200)


@dataclass(frozen=True)
class SolverConfig:
    """Settings shared by all outer solvers.

    ``lam`` is the penalty multiplier (unused by minimax solvers), ``M`` the
    cubic weight, ``m`` the Hessian refresh period and ``eps`` the target
    accuracy. ``L_override`` and ``rho_bar_override`` replace the default
    Lipschitz constants of the value-function gradient and Hessian.
    ``T_max=None`` derives the cap from ``delta_phi`` (or the family's known
    optimum). The remaining fields tune the Hessian-free variant.
    """

    lam: float = 0.0
    M: float = 1.0
    eps: float = 1e-3
    m: int = 1
    T_max: int | None = None
    delta: float = 0.1
    params: SmoothnessParams | None = None
    eps_tilde_override: float | None = None
    L_override: float | None = None
    rho_bar_override: float | None = None
    R_override: float | None = None
    delta_phi: float | None = None
    seed: int = 0
    C_sigma: float = 1.0
    cheb_order: int | None = None
    eps_H: float | None = None
    cubic_max_iter: int | None = None
    cubic_tol: float | None = None
    termination: str = "sqrt"
    exact_subsolver: bool = False
    materialize: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.M > 0:
            raise ValueError("M must be positive")
        if self.termination not in ("sqrt", "printed"):
            raise ValueError("termination must be 'sqrt' or 'printed'")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)


@dataclass
class IterateState:
    t: int
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray | None
    snapshot_x: np.ndarray | None = None
    snapshot_H: np.ndarray | None = None
    last_step_norm: float | None = None


@dataclass
class SospVerdict:
    grad_norm: float
    min_eig: float
    xi: float
    gamma: float
    is_fosp: bool
    is_sosp: bool


# ---------------------------------------------------------------------------
# theory-driven settings


def penalty_lambda(params: SmoothnessParams, eps: float, M: float, delta_phi: float) -> float:
    """Penalty multiplier ``max{l k^2 / D, l k^3 / eps, l k^5 / sqrt(M eps)}`` (at least ``2 ell / mu``)."""
    lb, k = params.ell_bar, params.kappa
    return max(lb * k**2 / delta_phi, lb * k**3 / eps, lb * k**5 / math.sqrt(M * eps), 2 * params.ell / params.mu)


def _safe_div(a, b):
    return a / b if b > 0 else math.inf


def eps_tilde_newton(ctx: LagrangianContext, eps: float, M: float, constants=FSBA_CONSTANTS) -> float:
    c_g, c_h = constants
    return min(c_g * eps / (4 * ctx.lam * ctx.params.ell_bar), _safe_div(c_h * math.sqrt(M * eps), 2 * ctx.C2))


def eps_tilde_inexact(ctx: LagrangianContext, eps: float, M: float, eps_H: float | None = None) -> float:
    c_g, c_h = INEXACT_CONSTANTS
    h = _hessian_target(ctx, eps, M, eps_H)
    return min(c_g * eps / (2 * ctx.lam * ctx.params.ell_bar), _safe_div(h, 4 * ctx.C2))


def eps_tilde_minimax(params: SmoothnessParams, eps: float, M: float) -> float:
    return min(eps / (576 * params.ell), _safe_div(math.sqrt(M * eps), 288 * params.rho))


def _hessian_target(ctx, eps, M, eps_H):
    c_h = INEXACT_CONSTANTS[1]
    base = c_h * math.sqrt(M * eps)
    return base if eps_H is None else min(base, eps_H * ctx.L)


def chebyshev_order(ctx: LagrangianContext, eps: float, M: float, eps_H: float | None = None) -> int:
    """Series order making the Chebyshev part of the Hessian error small enough."""
    k, ell, lam = ctx.params.kappa, ctx.params.ell, ctx.lam
    arg = 24 * (lam + 1) * k * ell / _hessian_target(ctx, eps, M, eps_H)
    return max(1, math.ceil((math.sqrt(3 * k) + 1) / 2 * math.log(max(arg, 1.0))))


def minimax_rho_bar(params: SmoothnessParams) -> float:
    k = params.ell / params.mu
    return 4 * math.sqrt(2) * k**3 * params.rho


def default_T_max(delta_phi: float, M: float, eps: float) -> int:
    return max(10, 10 * math.ceil(delta_phi * math.sqrt(M) * eps**-1.5))


# ---------------------------------------------------------------------------
# helpers


def _params(oracle, cfg: SolverConfig) -> SmoothnessParams:
    p = cfg.params if cfg.params is not None else getattr(oracle, "params", None)
    if p is None:
        raise ValueError("smoothness parameters missing: set cfg.params")
    return p


def _context(oracle, cfg: SolverConfig) -> LagrangianContext:
    return LagrangianContext.build(oracle, cfg.lam, _params(oracle, cfg), cfg.L_override, cfg.rho_bar_override)


def _delta_phi(oracle, cfg, x0) -> float:
    if cfg.delta_phi is not None:
        return cfg.delta_phi
    cf = getattr(oracle, "closed_form", None)
    star = getattr(cf, "phi_star", None)
    if star is None or not np.isfinite(star):
        raise ValueError("T_max is unset and the optimal value is unknown: set T_max or delta_phi")
    return max(cf.phi(x0) - star, 1e-12)


def _T_max(oracle, cfg, x0) -> int:
    if cfg.T_max is not None:
        return int(cfg.T_max)
    return default_T_max(_delta_phi(oracle, cfg, x0), cfg.M, cfg.eps)


def _radius(oracle, cfg, x0, lam=None) -> float:
    if cfg.R_override is not None:
        return cfg.R_override
    cf = getattr(oracle, "closed_form", None)
    p = _params(oracle, cfg)
    if isinstance(oracle, MinimaxOracle):
        if cf is not None:
            return float(np.linalg.norm(cf.y_star(x0)))
        y = _inner_solve(lambda v: -oracle.grad_f_y(x0, v), np.zeros(oracle.d_y), 2 * p.ell, p.mu / 2, 1e-8)
        return float(np.linalg.norm(y))
    if cf is not None and hasattr(cf, "y_star_lam"):
        return float(max(np.linalg.norm(cf.y_star(x0)), np.linalg.norm(cf.y_star_lam(x0, lam))))
    z = np.zeros(oracle.d_y)
    ys = _inner_solve(lambda v: oracle.grad_g_y(x0, v), z, 2 * p.ell, p.mu / 2, 1e-8)
    yl = _inner_solve(lambda v: oracle.lag_grad_y(x0, v, lam), z, 2 * (1 + lam) * p.ell, lam * p.mu / 4, 1e-8)
    return float(max(np.linalg.norm(ys), np.linalg.norm(yl)))


def _value(oracle, x, lam=None):
    cf = getattr(oracle, "closed_form", None)
    if cf is None:
        return None
    if lam is not None and hasattr(cf, "lagrangian_value"):
        return float(cf.lagrangian_value(x, lam))
    return float(cf.phi(x))


class _Clock:
    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.t0


def _finish(trace: Trace, x, counter) -> np.ndarray:
    """Append the output point; on a cap hit return the iterate with the smallest estimated gradient."""
    trace.iterates.append(x.copy())
    trace.counter = counter
    if not trace.converged and trace.records:
        if trace.failure is None:
            trace.failure = "iteration cap reached"
        best = int(np.argmin(trace.column("grad_est_norm")))
        x = trace.iterates[best].copy()
        trace.info["best_index"] = best
    return x


class _BilevelInner:
    """Warm-started inner sequences ``w`` (lower level) and ``y`` (Lagrangian)."""

    def __init__(self, ctx: LagrangianContext, eps_tilde: float, R: float):
        p = ctx.params
        self.ctx = ctx
        self.state = ScheduleState(eps_tilde, R, 3 * p.kappa, 4 * p.kappa)
        self.y = np.zeros(ctx.oracle.d_y)
        self.w = np.zeros(ctx.oracle.d_y)

    def update(self, t, x, prev_step):
        ctx, p = self.ctx, self.ctx.params
        K = schedule_K(t, prev_step, self.state)
        self.w = agd_run(lower_inner_oracle(ctx.oracle, x), self.w, AgdConfig.from_constants(p.ell, p.ell / p.kappa, K))
        self.y = agd_run(lagrangian_inner_oracle(ctx, x), self.y, AgdConfig.from_constants(ctx.ell2, ctx.ell2 / (3 * p.kappa), K))
        return K


# ---------------------------------------------------------------------------
# exact and lazy cubic Newton on the penalized value function


def _newton_loop(oracle, cfg: SolverConfig, x0, m: int, rule: str, constants, name: str):
    counter = OracleCounter(max(oracle.d_x, oracle.d_y))
    o = counted(oracle, counter)
    ctx = _context(o, cfg)
    x = np.array(x0, dtype=float)
    eps, M = cfg.eps, cfg.M
    eps_tilde = cfg.eps_tilde_override or eps_tilde_newton(ctx, eps, M, constants)
    inner = _BilevelInner(ctx, eps_tilde, _radius(oracle, cfg, x, ctx.lam))
    T = _T_max(oracle, cfg, x)
    trace = Trace(name, counter.d, info={"eps_tilde": eps_tilde, "lam": ctx.lam, "M": M, "m": m, "T_max": T, "rho_bar": ctx.rho_bar})
    clock = _Clock()
    state = IterateState(0, x, inner.y, inner.w)
    rho_bar = ctx.rho_bar
    for t in range(T):
        state.t = t
        K = inner.update(t, x, state.last_step_norm)
        g = grad_estimate(ctx, x, inner.y, inner.w)
        if t % m == 0:
            state.snapshot_x = x.copy()
            state.snapshot_H = hess_estimate(ctx, x, inner.y, inner.w)
            trace.hessian_evals += 1
        res = cubic_solve_exact(CubicModel(g, state.snapshot_H, M))
        s = res.s
        ns = float(np.linalg.norm(s))
        trace.iterates.append(x.copy())
        trace.steps.append(s.copy())
        trace.inner_y.append(inner.y.copy())
        trace.inner_w.append(inner.w.copy())
        trace.append(
            counter,
            clock(),
            t=t,
            step_norm=ns,
            grad_est_norm=float(np.linalg.norm(g)),
            pi_t=t - t % m,
            K_t1=K,
            K_t2=K,
            lagrangian_value=_value(oracle, x, ctx.lam),
        )
        if rule == "newton":
            stop = ns <= 0.5 * math.sqrt(eps / M)
        else:
            lag = float(np.linalg.norm(state.snapshot_x - x))
            stop = eps >= (1 / M) * (288 / 287) ** 2 * ((M + 2 * rho_bar) / math.sqrt(2) * ns + rho_bar * lag) ** 2
        x = x + s
        state.x, state.last_step_norm = x, ns
        if stop:
            trace.converged = True
            break
    return _finish(trace, x, counter), trace


def fsba_run(oracle, cfg: SolverConfig, x0):
    """Cubic Newton with a fresh Hessian estimate every iteration.

    Stops once the step is at most ``sqrt(eps / M) / 2`` and returns the
    point after that step.
    """
    return _newton_loop(oracle, cfg, x0, 1, "newton", FSBA_CONSTANTS, "fsba")


def lfsba_run(oracle, cfg: SolverConfig, x0):
    """Cubic Newton that refreshes the Hessian estimate every ``cfg.m`` iterations."""
    return _newton_loop(oracle, cfg, x0, cfg.m, "lazy", LAZY_CONSTANTS, "lfsba")


# ---------------------------------------------------------------------------
# Hessian-free variant


def ifsba_run(oracle, cfg: SolverConfig, x0):
    """Hessian-vector-product-only variant.

    The Hessian estimate is a matrix-free operator built from Chebyshev
    series, the cubic model is minimized by perturbed gradient descent, and
    once the model decrease is too small a final gradient solve produces the
    output. With ``cfg.materialize`` the operator is expanded once per
    iteration through ``d_x`` operator products, which is cheaper than
    re-applying it at every inner step whenever ``d_x`` is below the number of
    cubic iterations.
    """
    counter = OracleCounter(max(oracle.d_x, oracle.d_y))
    o = counted(oracle, counter)
    ctx = _context(o, cfg)
    x = np.array(x0, dtype=float)
    eps, M, L = cfg.eps, cfg.M, ctx.L
    eps_tilde = cfg.eps_tilde_override or eps_tilde_inexact(ctx, eps, M, cfg.eps_H)
    order = cfg.cheb_order or chebyshev_order(ctx, eps, M, cfg.eps_H)
    inner = _BilevelInner(ctx, eps_tilde, _radius(oracle, cfg, x, ctx.lam))
    T = _T_max(oracle, cfg, x)
    delta_prime = cfg.delta / T
    if cfg.termination == "sqrt":
        threshold = -math.sqrt(eps**3 / M) / 128
    else:
        threshold = -(eps**3) / (128 * M)
    rng = np.random.default_rng(cfg.seed)
    trace = Trace("ifsba", counter.d, info={"eps_tilde": eps_tilde, "cheb_order": order, "lam": ctx.lam, "L": L, "threshold": threshold, "T_max": T})
    clock = _Clock()
    prev = None
    for t in range(T):
        K = inner.update(t, x, prev)
        g = grad_estimate(ctx, x, inner.y, inner.w)
        op = hess_estimate_cheb(ctx, x, inner.y, inner.w, order, order, matrix_free=True)
        if cfg.exact_subsolver:
            C = op.matmat(np.eye(o.d_x))
            model = CubicModel(g, 0.5 * (C + C.T), M)
            res = cubic_solve_exact(model)
        else:
            if cfg.materialize:
                C = op.matmat(np.eye(o.d_x))
                model = CubicModel(g, 0.5 * (C + C.T), M)
            else:
                model = CubicModel(g, op, M)
            res = cubic_solve_gd(model, L, eps, delta_prime, cfg.C_sigma, rng, K=cfg.cubic_max_iter, tol=cfg.cubic_tol)
        s = res.s
        trace.iterates.append(x.copy())
        trace.steps.append(s.copy())
        trace.inner_y.append(inner.y.copy())
        trace.inner_w.append(inner.w.copy())
        trace.append(
            counter,
            clock(),
            t=t,
            step_norm=float(np.linalg.norm(s)),
            grad_est_norm=float(np.linalg.norm(g)),
            pi_t=t,
            K_t1=K,
            K_t2=K,
            lagrangian_value=_value(oracle, x, ctx.lam),
        )
        if res.delta > threshold:
            if cfg.exact_subsolver:
                x = x + s
                trace.converged = True
                break
            try:
                s_final = cubic_solve_final(model, eps, L)
            except CubicSolverError as exc:
                trace.failure = str(exc)
                break
            x = x + s_final
            trace.converged = True
            break
        prev = float(np.linalg.norm(s))
        x = x + s
    return _finish(trace, x, counter), trace


# ---------------------------------------------------------------------------
# minimax


def lmcn_run(oracle, cfg: SolverConfig, x0):
    """Lazy cubic Newton for ``min_x max_y f``: one warm-started ascent sequence in ``y``."""
    counter = OracleCounter(max(oracle.d_x, oracle.d_y))
    o = counted(oracle, counter)
    p = _params(oracle, cfg)
    kappa = p.ell / p.mu
    x = np.array(x0, dtype=float)
    eps, M, m = cfg.eps, cfg.M, cfg.m
    rho_bar = minimax_rho_bar(p) if cfg.rho_bar_override is None else cfg.rho_bar_override
    eps_tilde = cfg.eps_tilde_override or eps_tilde_minimax(p, eps, M)
    sched = ScheduleState(eps_tilde, _radius(oracle, cfg, x), kappa, kappa)
    T = _T_max(oracle, cfg, x)
    trace = Trace("lmcn", counter.d, info={"eps_tilde": eps_tilde, "rho_bar": rho_bar, "M": M, "m": m, "T_max": T})
    clock = _Clock()
    y = np.zeros(oracle.d_y)
    prev = None
    x_snap = H_snap = None
    for t in range(T):
        K = schedule_K(t, prev, sched)
        y = agd_run(lambda v: -o.grad_f_y(x, v), y, AgdConfig.from_constants(p.ell, p.mu, K))
        g = minimax_grad(o, x, y)
        if t % m == 0:
            x_snap = x.copy()
            H_snap = minimax_hess(o, x, y)
            trace.hessian_evals += 1
        s = cubic_solve_exact(CubicModel(g, H_snap, M)).s
        ns = float(np.linalg.norm(s))
        trace.iterates.append(x.copy())
        trace.steps.append(s.copy())
        trace.inner_y.append(y.copy())
        trace.append(
            counter, clock(), t=t, step_norm=ns, grad_est_norm=float(np.linalg.norm(g)),
            pi_t=t - t % m, K_t1=K, K_t2=0, lagrangian_value=_value(oracle, x),
        )
        lag = float(np.linalg.norm(x_snap - x))
        stop = eps >= (1 / M) * (288 / 287) ** 2 * ((M + 2 * rho_bar) / math.sqrt(2) * ns + rho_bar * lag) ** 2
        x = x + s
        prev = ns
        if stop:
            trace.converged = True
            break
    return _finish(trace, x, counter), trace


def gda_run(oracle, cfg: SolverConfig, x0, eta_x: float, eta_y: float, y0=None, max_cost: float | None = None):
    """Simultaneous gradient descent (in ``x``) and ascent (in ``y``).

    Stops when ``||grad_x f|| <= eps`` still holds after refining ``y``, after
    ``T_max`` steps, or once ``max_cost`` oracle units are spent.
    """
    counter = OracleCounter(max(oracle.d_x, oracle.d_y))
    o = counted(oracle, counter)
    p = _params(oracle, cfg)
    x = np.array(x0, dtype=float)
    y = np.zeros(oracle.d_y) if y0 is None else np.array(y0, dtype=float)
    T = cfg.T_max if cfg.T_max is not None else 100_000
    trace = Trace("gda", counter.d, info={"eta_x": eta_x, "eta_y": eta_y})
    clock = _Clock()
    refine = AgdConfig.from_constants(p.ell, p.mu, max(1, math.ceil(2 * math.sqrt(p.ell / p.mu) * 20)))
    limit = 1e6 * (1 + np.linalg.norm(x) + np.linalg.norm(y))
    for t in range(T):
        gx = o.grad_f_x(x, y)
        gy = o.grad_f_y(x, y)
        if np.linalg.norm(gx) <= cfg.eps:
            y = agd_run(lambda v: -o.grad_f_y(x, v), y, refine)
            gx = o.grad_f_x(x, y)
            if np.linalg.norm(gx) <= cfg.eps:
                trace.converged = True
        trace.iterates.append(x.copy())
        trace.inner_y.append(y.copy())
        trace.append(
            counter, clock(), t=t, step_norm=float(eta_x * np.linalg.norm(gx)), grad_est_norm=float(np.linalg.norm(gx)),
            pi_t=t, K_t1=0, K_t2=0, lagrangian_value=_value(oracle, x),
        )
        if trace.converged or (max_cost is not None and counter.total >= max_cost):
            break
        x, y = x - eta_x * gx, y + eta_y * gy
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))) or np.linalg.norm(x) + np.linalg.norm(y) > limit:
            trace.failure = "diverged"
            break
    trace.iterates.append(x.copy())
    trace.info["y_final"] = y
    trace.counter = counter
    return x, trace


# ---------------------------------------------------------------------------
# first-order baseline on the penalized value function


def f2ba_run(oracle, cfg: SolverConfig, x0, step_size: float):
    """Inexact gradient descent on the penalized value function."""
    counter = OracleCounter(max(oracle.d_x, oracle.d_y))
    o = counted(oracle, counter)
    ctx = _context(o, cfg)
    x = np.array(x0, dtype=float)
    eps_tilde = cfg.eps_tilde_override or eps_tilde_newton(ctx, cfg.eps, cfg.M)
    inner = _BilevelInner(ctx, eps_tilde, _radius(oracle, cfg, x, ctx.lam))
    T = cfg.T_max if cfg.T_max is not None else 100_000
    trace = Trace("f2ba", counter.d, info={"eps_tilde": eps_tilde, "step_size": step_size})
    clock = _Clock()
    prev = None
    limit = 1e6 * (1 + np.linalg.norm(x))
    for t in range(T):
        K = inner.update(t, x, prev)
        g = grad_estimate(ctx, x, inner.y, inner.w)
        gn = float(np.linalg.norm(g))
        trace.iterates.append(x.copy())
        trace.append(
            counter, clock(), t=t, step_norm=step_size * gn, grad_est_norm=gn, pi_t=t, K_t1=K, K_t2=K,
            lagrangian_value=_value(oracle, x, ctx.lam),
        )
        if gn <= cfg.eps:
            trace.converged = True
            break
        x = x - step_size * g
        prev = step_size * gn
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > limit:
            trace.failure = "diverged"
            break
    trace.iterates.append(x.copy())
    trace.counter = counter
    return x, trace


# ---------------------------------------------------------------------------
# verdicts


def sosp_check(oracle, x, eps: float, M: float, params: SmoothnessParams | None = None, slack: float = 5.0, tol: float = 1e-10) -> SospVerdict:
    """Ground-truth stationarity verdict at ``x`` with tolerances scaled by ``slack``."""
    gt = ground_truth_eval(oracle, x, tol)
    gn = float(np.linalg.norm(gt.grad_phi))
    gamma = max(gt.xi**3 / (987 * M**2), gn**1.5 / (120 * math.sqrt(3 * M)))
    is_fosp = gn <= slack * eps
    is_sosp = is_fosp and gt.hess_phi_min_eig >= -slack * math.sqrt(M * eps)
    return SospVerdict(gn, gt.hess_phi_min_eig, gt.xi, gamma, is_fosp, is_sosp)
