"""Second-order methods for bilevel and minimax optimization."""
from .agd import AgdConfig, agd_bound, agd_run, schedule_K
from .cubic import CubicModel, cubic_solve_exact, cubic_solve_final, cubic_solve_gd
from .estimators import LagrangianContext, cheb_inverse_apply, grad_estimate, hess_estimate, hess_estimate_cheb
from .problems import (
    SmoothnessParams,
    ground_truth_eval,
    make_hypercleaning,
    make_quadratic_bilevel,
    make_synthetic_minimax,
)
from .solvers import (
    SolverConfig,
    f2ba_run,
    fsba_run,
    gda_run,
    ifsba_run,
    lfsba_run,
    lmcn_run,
    sosp_check,
    penalty_lambda,
)
from .telemetry import OracleCounter, Trace, total_cost

__all__ = [
    "AgdConfig",
    "CubicModel",
    "LagrangianContext",
    "OracleCounter",
    "SmoothnessParams",
    "SolverConfig",
    "Trace",
    "agd_bound",
    "agd_run",
    "cheb_inverse_apply",
    "cubic_solve_exact",
    "cubic_solve_final",
    "cubic_solve_gd",
    "f2ba_run",
    "fsba_run",
    "gda_run",
    "grad_estimate",
    "ground_truth_eval",
    "hess_estimate",
    "hess_estimate_cheb",
    "ifsba_run",
    "lfsba_run",
    "lmcn_run",
    "make_hypercleaning",
    "make_quadratic_bilevel",
    "make_synthetic_minimax",
    "schedule_K",
    "sosp_check",
    "penalty_lambda",
    "total_cost",
]
