"""Accelerated gradient descent for strongly convex inner problems and its iteration schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class DivergenceError(FloatingPointError):
    """An AGD iterate blew up; usually a wrong smoothness constant."""


@dataclass(frozen=True)
class AgdConfig:
    eta: float
    theta: float
    K: int

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 <= self.theta < 1:
            raise ValueError("theta must lie in [0, 1)")
        if self.K < 0:
            raise ValueError("K must be nonnegative")

    @classmethod
    def from_constants(cls, ell: float, mu: float, K: int) -> "AgdConfig":
        """Step ``1/ell`` and momentum ``(sqrt(kappa) - 1) / (sqrt(kappa) + 1)``."""
        rk = math.sqrt(ell / mu)
        return cls(eta=1.0 / ell, theta=(rk - 1) / (rk + 1), K=int(K))


def agd_run(h: Callable[[np.ndarray], np.ndarray], z0, cfg: AgdConfig) -> np.ndarray:
    """Run exactly ``cfg.K`` accelerated steps from ``z0`` and return the last plain iterate."""
    z = np.array(z0, dtype=float)
    limit = 1e6 * (1.0 + np.linalg.norm(z))
    z_ex = z.copy()
    for _ in range(cfg.K):
        z_next = z_ex - cfg.eta * h(z_ex)
        z_ex = z_next + cfg.theta * (z_next - z)
        z = z_next
        nz = np.linalg.norm(z)
        if not np.isfinite(nz) or nz > limit:
            raise DivergenceError(f"AGD iterate norm {nz:.3e} exceeds guard {limit:.3e}")
    return z


def agd_bound(kappa: float, K: int) -> float:
    """Contraction factor on the squared distance after ``K`` steps."""
    return (kappa + 1) * (1 - 1 / math.sqrt(kappa)) ** K


@dataclass(frozen=True)
class ScheduleState:
    """Inputs to the inner-iteration schedule.

    ``coupling`` multiplies the previous outer step norm: it bounds how far
    the inner solution moves when ``x`` moves.
    """

    eps_tilde: float
    R: float
    kappa_inner: float
    coupling: float

    def __post_init__(self):
        if not self.eps_tilde > 0:
            raise ValueError("eps_tilde must be positive")
        if self.R < 0:
            raise ValueError("R must be nonnegative")


def schedule_K(t: int, prev_step_norm: float | None, st: ScheduleState) -> int:
    """Inner AGD iterations that keep the warm-started error below ``eps_tilde``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    rk = math.sqrt(st.kappa_inner)
    scale = math.sqrt(st.kappa_inner + 1) / st.eps_tilde
    if t == 0:
        dist = st.R
    else:
        if prev_step_norm is None:
            raise ValueError("prev_step_norm is required after the first iteration")
        dist = st.eps_tilde + st.coupling * prev_step_norm
    arg = scale * dist
    if arg <= 1:
        return 1
    return max(1, math.ceil(2 * rk * math.log(arg)))
