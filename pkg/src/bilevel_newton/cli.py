"""Batch experiment runner: config parsing, libsvm ingestion, solver dispatch and trace output.

Usage::

    bilevel-newton run experiment.yaml [--m 5] [--lambda 1000] [--eps 1e-4]
    bilevel-newton sweep experiment.yaml --grid minimax-grid
    bilevel-newton check experiment.yaml

Outputs go under ``$BILEVEL_NEWTON_OUTPUT`` (default ``./runs``) unless the
config names an ``output`` directory. Exit codes: 0 ok, 2 config error,
3 data error, 4 a solver did not converge.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import itertools
import json
import logging
import os
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from scipy import sparse

from . import problems, solvers
from .agd import DivergenceError
from .cubic import CubicSolverError
from .estimators import CurvatureError
from .telemetry import CSV_COLUMNS, Trace

log = logging.getLogger("bilevel_newton")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4
OUTPUT_ENV = "BILEVEL_NEWTON_OUTPUT"
SOLVER_NAMES = ("fsba", "ifsba", "lfsba", "lmcn", "f2ba", "gda")
FAMILIES = ("quadratic", "minimax", "hypercleaning", "exp_ridge")
_CONFIG_FIELDS = {f.name for f in fields(solvers.SolverConfig)}

GRID_PRESETS = {
    "hypercleaning-grid": {"lam": [100.0, 300.0, 1000.0, 3000.0], "M": [0.1, 1.0, 10.0]},
    "minimax-grid": {"M": [1.0, 5.0, 10.0], "m": [1, 3, 10]},
    "lazy-m": {"m": [1, 2, 5, 10, 20]},
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data


def parse_libsvm(path) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Read ``label idx:val ...`` lines (1-based indices) into a CSR matrix and integer labels.

    Labels are mapped to ``0..c-1`` in sorted order of their distinct values.
    """
    rows, cols, vals, raw_labels = [], [], [], []
    n_cols = 0
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad label {tokens[0]!r}") from exc
        entries = []
        for tok in tokens[1:]:
            idx, sep, val = tok.partition(":")
            try:
                i, v = int(idx), float(val)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad entry {tok!r}") from exc
            if not sep or i < 1:
                raise DataError(f"{path}:{lineno}: bad entry {tok!r}")
            entries.append((i - 1, v))
        idxs = [i for i, _ in entries]
        if any(a >= b for a, b in zip(idxs, idxs[1:])):
            warnings.warn(f"{path}:{lineno}: indices not increasing, re-sorted", stacklevel=2)
            entries.sort()
        r = len(raw_labels)
        for i, v in entries:
            rows.append(r)
            cols.append(i)
            vals.append(v)
            n_cols = max(n_cols, i + 1)
        raw_labels.append(label)
    if not raw_labels:
        raise DataError(f"{path}: no samples")
    distinct = sorted(set(raw_labels))
    labels = np.array([distinct.index(v) for v in raw_labels], dtype=int)
    X = sparse.csr_matrix((vals, (rows, cols)), shape=(len(raw_labels), n_cols), dtype=float)
    X.sum_duplicates()
    return X, labels


def write_libsvm(path, X, labels) -> None:
    X = sparse.csr_matrix(X)
    lines = []
    for r in range(X.shape[0]):
        lo, hi = X.indptr[r], X.indptr[r + 1]
        items = " ".join(f"{c + 1}:{float(v)!r}" for c, v in zip(X.indices[lo:hi], X.data[lo:hi]))
        lines.append(f"{labels[r]} {items}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# config


@dataclass
class SolverSpec:
    name: str
    config: dict = field(default_factory=dict)
    x0: object = "zeros"
    step_size: float | None = None
    eta_x: float | None = None
    eta_y: float | None = None
    max_cost: float | None = None


@dataclass
class ExperimentConfig:
    name: str
    problem: dict
    solvers: list[SolverSpec]
    repeat: int = 1
    seed: int = 0
    output: str | None = None
    verdict: bool = True
    slack: float = 5.0

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        raw = copy.deepcopy(raw)
        specs = raw.pop("solvers", None)
        if specs is None and "solver" in raw:
            specs = [raw.pop("solver")]
        if not specs:
            raise ConfigError("no solvers given")
        try:
            parsed = [SolverSpec(**s) if isinstance(s, dict) else SolverSpec(name=str(s)) for s in specs]
        except TypeError as exc:
            raise ConfigError(f"bad solver entry: {exc}") from exc
        problem = raw.pop("problem", None)
        if not isinstance(problem, dict):
            raise ConfigError("missing problem section")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(name=str(raw.pop("name", "experiment")), problem=problem, solvers=parsed, **raw)
        if base_dir is not None and "data" in problem and not Path(problem["data"]).is_absolute():
            problem["data"] = str(base_dir / problem["data"])
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        try:
            raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    def validate(self) -> None:
        fam = self.problem.get("family")
        if fam not in FAMILIES:
            raise ConfigError(f"unknown problem family {fam!r}")
        if fam in ("hypercleaning", "exp_ridge") and "data" not in self.problem and "synthetic" not in self.problem:
            raise ConfigError(f"{fam} needs 'data' or 'synthetic'")
        if "data" in self.problem and not Path(self.problem["data"]).is_file():
            raise ConfigError(f"data file {self.problem['data']} does not exist")
        if self.repeat < 1:
            raise ConfigError("repeat must be at least 1")
        minimax = fam == "minimax"
        for s in self.solvers:
            if s.name not in SOLVER_NAMES:
                raise ConfigError(f"unknown solver {s.name!r}")
            if minimax != (s.name in ("lmcn", "gda")):
                raise ConfigError(f"solver {s.name} does not apply to the {fam} family")
            bad = set(s.config) - _CONFIG_FIELDS
            if bad:
                raise ConfigError(f"unknown solver settings {sorted(bad)}")
            if s.name == "f2ba" and s.step_size is None:
                raise ConfigError("f2ba needs step_size")
            if s.name == "gda" and (s.eta_x is None or s.eta_y is None):
                raise ConfigError("gda needs eta_x and eta_y")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "problem": self.problem,
            "solvers": [vars(s) for s in self.solvers],
            "repeat": self.repeat,
            "seed": self.seed,
            "verdict": self.verdict,
            "slack": self.slack,
        }

    def config_hash(self) -> str:
        """Hash of the semantic content; key order and the output path do not matter."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        for s in out.solvers:
            for k, v in kw.items():
                if v is not None:
                    s.config[k] = v
        out.validate()
        return out


# ---------------------------------------------------------------------------
# construction


def build_problem(spec: dict):
    fam = spec["family"]
    kw = dict(spec.get("params", {}))
    seed = int(spec.get("seed", 0))
    try:
        if fam == "quadratic":
            return problems.make_quadratic_bilevel(seed, **kw)[0]
        if fam == "minimax":
            return problems.make_synthetic_minimax(**kw)[0]
        if "data" in spec:
            X, labels = parse_libsvm(spec["data"])
        else:
            syn = dict(spec["synthetic"])
            if fam == "hypercleaning":
                X, labels = problems.synthetic_logistic_data(seed=syn.pop("seed", seed), **syn)
            else:
                X, labels = problems.synthetic_multinomial_data(seed=syn.pop("seed", seed), **syn)
        if fam == "hypercleaning":
            if np.unique(labels).size != 2:
                raise DataError("hypercleaning needs binary labels")
            return problems.make_hypercleaning(X, labels, noise_rate=float(spec.get("noise_rate", 0.0)), seed=seed, **kw)
        X = X.toarray() if hasattr(X, "toarray") else np.asarray(X)
        perm = np.random.default_rng(seed).permutation(X.shape[0])
        n_val = int(round(float(kw.pop("val_split", 0.3)) * X.shape[0]))
        va, tr = perm[:n_val], perm[n_val:]
        return problems.make_exp_ridge_tuning((X[tr], labels[tr]), (X[va], labels[va]), seed=seed)
    except TypeError as exc:
        raise ConfigError(f"bad problem parameters: {exc}") from exc


def _initial_point(spec: SolverSpec, d_x: int) -> np.ndarray:
    x0 = spec.x0
    if isinstance(x0, str):
        if x0 == "zeros":
            return np.zeros(d_x)
        if x0 == "ones":
            return np.ones(d_x)
        raise ConfigError(f"unknown x0 {x0!r}")
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        return np.full(d_x, float(x0))
    if x0.shape != (d_x,):
        raise ConfigError(f"x0 has shape {x0.shape}, expected ({d_x},)")
    return x0


def _solver_config(spec: SolverSpec, oracle, x0, seed: int) -> solvers.SolverConfig:
    kw = dict(spec.config)
    kw.setdefault("seed", seed)
    if kw.get("lam") == "auto":
        cfg = solvers.SolverConfig(**{**kw, "lam": 0.0})
        delta = solvers._delta_phi(oracle, cfg, x0)
        kw["lam"] = solvers.penalty_lambda(solvers._params(oracle, cfg), cfg.eps, cfg.M, delta)
    try:
        return solvers.SolverConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver {spec.name}: {exc}") from exc


def run_solver(spec: SolverSpec, oracle, seed: int) -> tuple[np.ndarray, Trace]:
    x0 = _initial_point(spec, oracle.d_x)
    cfg = _solver_config(spec, oracle, x0, seed)
    if spec.name == "fsba":
        return solvers.fsba_run(oracle, cfg, x0)
    if spec.name == "lfsba":
        return solvers.lfsba_run(oracle, cfg, x0)
    if spec.name == "ifsba":
        return solvers.ifsba_run(oracle, cfg, x0)
    if spec.name == "lmcn":
        return solvers.lmcn_run(oracle, cfg, x0)
    if spec.name == "f2ba":
        return solvers.f2ba_run(oracle, cfg, x0, spec.step_size)
    return solvers.gda_run(oracle, cfg, x0, spec.eta_x, spec.eta_y, max_cost=spec.max_cost)


# ---------------------------------------------------------------------------
# output


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.12g" % v


def trace_csv(trace: Trace) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(",".join(_fmt(v) for v in rec.row()) for rec in trace.records)
    return "\n".join(lines) + "\n"


def emit_csv(trace: Trace, path) -> None:
    """Write one row per record with 12 significant digits and LF line endings."""
    _atomic_write(Path(path), trace_csv(trace))


def _summary(cfg: ExperimentConfig, spec: SolverSpec, oracle, x, trace: Trace) -> dict:
    out = {
        "solver": spec.name,
        "iterations": len(trace),
        "converged": trace.converged,
        "failure": trace.failure,
        "total_cost": trace.records[-1].total_cost if trace.records else 0.0,
        "final_grad_est_norm": trace.records[-1].grad_est_norm if trace.records else None,
        "hessian_evals": trace.hessian_evals,
    }
    has_truth = getattr(oracle, "closed_form", None) is not None
    if cfg.verdict and has_truth:
        sc = _solver_config(spec, oracle, x, cfg.seed)
        v = solvers.sosp_check(oracle, x, sc.eps, sc.M, slack=cfg.slack)
        out.update(final_grad_norm=v.grad_norm, min_eig=v.min_eig, is_fosp=v.is_fosp, is_sosp=v.is_sosp)
    return out


def output_root(cfg: ExperimentConfig) -> Path:
    base = cfg.output or os.environ.get(OUTPUT_ENV, "runs")
    return Path(base) / f"{cfg.name}-{cfg.config_hash()}"


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> int:
    """Run every solver ``repeat`` times; write traces and ``summary.json``; return an exit code."""
    try:
        oracle = build_problem(cfg.problem)
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    root = output_root(cfg)
    tasks = [(i, r, s) for i, s in enumerate(cfg.solvers) for r in range(cfg.repeat)]

    def one(task):
        i, r, spec = task
        # repeats share a seed so they double as a determinism check
        seed = cfg.seed * 1000 + i
        x, trace = run_solver(spec, oracle, seed)
        emit_csv(trace, root / f"{i:02d}_{spec.name}_r{r}.csv")
        return {"index": i, "repeat": r, "seed": seed, **_summary(cfg, spec, oracle, x, trace)}

    try:
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                results = list(pool.map(one, tasks))
        else:
            results = [one(t) for t in tasks]
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (CubicSolverError, DivergenceError, CurvatureError, problems.InnerSolveError) as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    summary = {"config_hash": cfg.config_hash(), "config": cfg.to_dict(), "runs": results}
    _atomic_write(root / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    log.info("wrote %s", root)
    if any(not res["converged"] for res in results):
        return EXIT_SOLVER
    return EXIT_OK


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def grid_points(preset: str) -> list[dict]:
    if preset not in GRID_PRESETS:
        raise ConfigError(f"unknown grid preset {preset!r}; choose from {sorted(GRID_PRESETS)}")
    grid = GRID_PRESETS[preset]
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bilevel-newton", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run every solver in a config and write traces",
        "sweep": "run a config once per point of a named grid",
        "check": "validate a config and build its problem without solving",
    }
    for name in ("run", "sweep", "check"):
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("config", help="YAML experiment file")
        p.add_argument("--m", type=int, help="override the Hessian refresh period of every solver")
        p.add_argument("--lambda", dest="lam", type=float, help="override the penalty weight of every solver")
        p.add_argument("--eps", type=float, help="override the target accuracy of every solver")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for solver runs")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name == "sweep":
            p.add_argument("--grid", required=True, help=f"one of {sorted(GRID_PRESETS)}")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config).with_overrides(m=args.m, lam=args.lam, eps=args.eps)
        if args.command == "check":
            d_x = build_problem(cfg.problem).d_x
            for spec in cfg.solvers:
                _initial_point(spec, d_x)
            print(f"ok {cfg.name} {cfg.config_hash()}")
            return EXIT_OK
        if args.command == "run":
            return run_experiment(cfg, args.jobs)
        points = grid_points(args.grid)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    codes = []
    for point in points:
        sub = cfg.with_overrides(**point)
        sub.name = f"{cfg.name}-" + "-".join(f"{k}{v:g}" for k, v in point.items())
        codes.append(run_experiment(sub, args.jobs))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
