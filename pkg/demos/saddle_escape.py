"""Second-order escape versus gradient descent ascent on a three-dimensional saddle.

The outer objective has a strict saddle at the origin and a shallow plateau
along the third coordinate. The lazy cubic Newton method reads the negative
curvature off its Hessian estimate and leaves the plateau; gradient descent
ascent with the same oracle budget drifts along it.
"""
import numpy as np

from bilevel_newton.problems import make_synthetic_minimax, w_piecewise
from bilevel_newton.solvers import SolverConfig, gda_run, lmcn_run


def main() -> None:
    eps, L = 0.01, 3.0
    prob, cf = make_synthetic_minimax(eps, L)
    x0 = np.array([1e-3, 1e-3, 1e-1])
    target = -(3 * L + 1) * eps**1.5 / 6

    x, tr = lmcn_run(prob, SolverConfig(M=5.0, eps=1e-3, m=3), x0)
    budget = tr.records[-1].total_cost
    xg, tg = gda_run(prob, SolverConfig(eps=1e-3), x0, 1 / prob.params.ell, 1 / prob.params.ell, max_cost=budget)

    print(f"start x = {x0}, plateau value of w = {cf.plateau_floor:.5f}, escape target w <= {target:.5f}")
    print(f"{'iter':>5} {'cost':>7} {'x3':>9} {'w(x3)':>9}")
    for k in range(0, len(tr.records), max(1, len(tr.records) // 10)):
        rec = tr.records[k]
        x3 = tr.iterates[k][2]
        print(f"{k:>5} {rec.total_cost:>7g} {x3:>9.4f} {w_piecewise(x3, eps, L)[0]:>9.5f}")
    print(f"LMCN: {len(tr)} iterations, cost {budget:g}, |grad phi| = {np.linalg.norm(cf.grad_phi(x)):.1e}, "
          f"w(x3) = {w_piecewise(x[2], eps, L)[0]:.5f}")
    print(f"GDA:  cost {tg.records[-1].total_cost:g}, w(x3) = {w_piecewise(xg[2], eps, L)[0]:.5f}, not past the plateau")


if __name__ == "__main__":
    main()
