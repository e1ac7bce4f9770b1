import numpy as np
import pytest
from scipy import optimize

from bilevel_newton.cubic import CubicModel, cubic_model_value


def random_model(rng, d, M=None, neg=True):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = rng.uniform(-1.0 if neg else 0.1, 2.0, size=d)
    H = Q @ np.diag(eig) @ Q.T
    g = rng.standard_normal(d) * rng.uniform(0.01, 3.0)
    return CubicModel(g, 0.5 * (H + H.T), rng.uniform(0.2, 5.0) if M is None else M)


def hard_case_model(rng, d):
    """Bottom eigenvector orthogonal to g and g small enough that no interior root exists."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.sort(rng.uniform(0.5, 3.0, size=d))
    lam[0] = -rng.uniform(0.5, 2.0)
    M = rng.uniform(0.5, 3.0)
    r_lo = -2 * lam[0] / M
    coef = np.zeros(d)
    coef[1:] = rng.standard_normal(d - 1)
    # shrink so that ||s(r_lo)|| stays below r_lo
    n_at_lo = np.linalg.norm(coef[1:] / (lam[1:] + 0.5 * M * r_lo))
    coef *= 0.5 * r_lo / n_at_lo
    H = Q @ np.diag(lam) @ Q.T
    return CubicModel(Q @ coef, 0.5 * (H + H.T), M)


def _grid_values(model, c1, c2, half, step):
    H, g, M = model.H, model.g, model.M
    S1, S2 = np.meshgrid(np.arange(c1 - half, c1 + half + step, step), np.arange(c2 - half, c2 + half + step, step), indexing="ij")
    n = np.sqrt(S1**2 + S2**2)
    vals = g[0] * S1 + g[1] * S2 + 0.5 * (H[0, 0] * S1**2 + 2 * H[0, 1] * S1 * S2 + H[1, 1] * S2**2) + M / 6 * n**3
    return S1, S2, vals


def brute_force_2d(model, step=1e-3):
    """Coarse grid over a box containing the global minimizer, a ``step`` grid around the best cells, then local polish."""
    H, g, M = model.H, model.g, model.M
    R = 2 * np.linalg.norm(H, 2) / M + np.sqrt(2 * np.linalg.norm(g) / M) + 0.1
    S1, S2, vals = _grid_values(model, 0.0, 0.0, R, 2e-2)
    out = None
    for k in np.argsort(vals, axis=None)[:5]:
        F1, F2, fine = _grid_values(model, S1.flat[k], S2.flat[k], 2e-2, step)
        j = np.argmin(fine)
        s0 = np.array([F1.flat[j], F2.flat[j]])
        res = optimize.minimize(lambda s: cubic_model_value(model, s, H @ s), s0, method="BFGS", options={"gtol": 1e-12})
        if out is None or res.fun < out.fun:
            out = res
    return out.x, out.fun


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
