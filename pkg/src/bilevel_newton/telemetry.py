"""Oracle-call accounting and per-iteration traces.

Cost model: a partial gradient or a Hessian-vector product costs one unit;
a dense Hessian block costs ``d = max(d_x, d_y)`` units. A block of the
Lagrangian ``f + lam * g`` counts as one block, a gradient of it as two
partial gradients.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

CSV_COLUMNS = (
    "t",
    "step_norm",
    "grad_est_norm",
    "pi_t",
    "K_t1",
    "K_t2",
    "grad_calls",
    "hvp_calls",
    "hess_block_calls",
    "total_cost",
    "wall_time",
)


class OracleCounter:
    """Thread-safe counters for first-order, HVP and dense-block calls."""

    def __init__(self, d: int):
        self.d = int(d)
        self.grad_calls = 0
        self.hvp_calls = 0
        self.hess_block_calls = 0
        self._lock = threading.Lock()

    def add(self, kind: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counters are monotone")
        with self._lock:
            setattr(self, kind, getattr(self, kind) + n)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "grad_calls": self.grad_calls,
                "hvp_calls": self.hvp_calls,
                "hess_block_calls": self.hess_block_calls,
            }

    @property
    def total(self) -> float:
        return total_cost(self)


def total_cost(counter) -> float:
    """``grad_calls + hvp_calls + d * hess_block_calls`` in units of one gradient."""
    if isinstance(counter, dict):
        return float(counter["grad_calls"] + counter["hvp_calls"] + counter["d"] * counter["hess_block_calls"])
    return float(counter.grad_calls + counter.hvp_calls + counter.d * counter.hess_block_calls)


_COSTS = {
    "grad_calls": (
        "grad_f_x",
        "grad_f_y",
        "grad_g_x",
        "grad_g_y",
    ),
    "hess_block_calls": (
        "hess_f_xx",
        "hess_f_xy",
        "hess_f_yy",
        "hess_g_xx",
        "hess_g_xy",
        "hess_g_yy",
        "lag_hess_xx",
        "lag_hess_xy",
        "lag_hess_yy",
    ),
    "hvp_calls": (
        "hvp_f_xx",
        "hvp_f_xy",
        "hvp_f_yx",
        "hvp_f_yy",
        "hvp_g_xx",
        "hvp_g_xy",
        "hvp_g_yx",
        "hvp_g_yy",
        "lag_hvp_xx",
        "lag_hvp_xy",
        "lag_hvp_yx",
        "lag_hvp_yy",
    ),
}


class CountingOracle:
    """Wraps an oracle so every derivative call is charged to ``counter``.

    Values, dimensions, smoothness constants and closed forms pass through
    uncounted.
    """

    def __init__(self, oracle, counter: OracleCounter):
        self.inner = oracle
        self.counter = counter

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def lag_grad_y(self, x, y, lam):
        self.counter.add("grad_calls", 2)
        return self.inner.lag_grad_y(x, y, lam)


def _make_counted(name, kind):
    def method(self, *args):
        self.counter.add(kind)
        return getattr(self.inner, name)(*args)

    method.__name__ = name
    return method


for _kind, _names in _COSTS.items():
    for _name in _names:
        setattr(CountingOracle, _name, _make_counted(_name, _kind))


def counted(oracle, counter: OracleCounter | None = None) -> CountingOracle:
    """Wrap ``oracle`` with a fresh counter (or the given one)."""
    if counter is None:
        counter = OracleCounter(max(oracle.d_x, oracle.d_y))
    return CountingOracle(oracle, counter)


@dataclass
class TraceRecord:
    t: int
    step_norm: float
    grad_est_norm: float
    pi_t: int
    K_t1: int
    K_t2: int
    grad_calls: int
    hvp_calls: int
    hess_block_calls: int
    total_cost: float
    wall_time: float
    lagrangian_value: float | None = None

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in CSV_COLUMNS)


@dataclass
class Trace:
    """Per-iteration records plus the iterates and run-level flags."""

    solver: str
    d: int
    records: list[TraceRecord] = field(default_factory=list)
    iterates: list[np.ndarray] = field(default_factory=list)
    steps: list[np.ndarray] = field(default_factory=list)
    inner_y: list[np.ndarray] = field(default_factory=list)
    inner_w: list[np.ndarray] = field(default_factory=list)
    converged: bool = False
    hessian_evals: int = 0
    failure: str | None = None
    info: dict = field(default_factory=dict)
    counter: object = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, counter: OracleCounter, wall_time: float, **fields) -> TraceRecord:
        snap = counter.snapshot()
        rec = TraceRecord(total_cost=total_cost({**snap, "d": counter.d}), wall_time=wall_time, **snap, **fields)
        self.records.append(rec)
        return rec

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def deterministic_view(self) -> list[tuple]:
        """Everything except wall-clock time, for reproducibility checks."""
        return [tuple(v for k, v in zip(CSV_COLUMNS, r.row()) if k != "wall_time") for r in self.records]
