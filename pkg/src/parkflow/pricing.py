"""Price optimization against a frozen prediction model.

``one_shot_optimize`` inverts the final NODE stack and solves the price reflection
in closed form. ``greedy_optimize`` and ``gradient_optimize`` are the black-box and
white-box search baselines; ``grid_oracle`` is an exhaustive reference for tiny N.
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .data import FeatureSample, SampleSet
from .diffcore import AdamState, NumericError, adam_step
from .model import (
    ModelParams,
    encode_long,
    encode_short,
    final_invert_layer,
    final_predict,
    initial_predict,
)
from .odeint import INVERSE_SOLVER, TRAIN_SOLVER, MlpField, SolverConfig, adjoint_from_end, integrate_forward

TAUS = (0.70, 0.75, 0.80)
GREEDY_STEP = 0.25


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class OptimizationRequest:
    sample: FeatureSample
    y_star: np.ndarray
    bounds: tuple[float, float]

    def __post_init__(self) -> None:
        self.y_star = np.asarray(self.y_star, dtype=float)
        if np.any(self.y_star < 0) or np.any(self.y_star > 1):
            raise ValueError("y_star must lie in [0, 1]")
        if not self.bounds[0] < self.bounds[1]:
            raise ValueError("p_min must be below p_max")


@dataclass
class OptimizationResult:
    p_star: np.ndarray
    y_pred: np.ndarray
    clamped: np.ndarray
    inelastic: np.ndarray
    oracle_queries: int
    wall_time: float
    method: str
    iterations: int = 1

    def error(self, y_star: np.ndarray) -> float:
        """Mean absolute deviation from the target."""
        return float(np.mean(np.abs(self.y_pred - y_star)))


class Oracle:
    """Frozen model bound to one case, counting every query made against it.

    The initial module does not see the price, so its output is computed once and
    reused; a full-model query for a price vector then costs one pass through the
    reflection and the final stack.
    """

    def __init__(self, params: ModelParams, sample: FeatureSample, solver: SolverConfig = TRAIN_SOLVER):
        self.params = params
        self.sample = sample
        self.solver = solver
        self.queries = 0
        self._z_init: Optional[np.ndarray] = None
        self._j_fields = [MlpField(params.mlp(f"j{i}")) for i in range(1, params.cfg.M + 1)]

    def _compute_z_init(self) -> np.ndarray:
        if self._z_init is None:
            s = self.sample
            Hs = encode_short(s.short, self.params, self.solver)
            Hl = encode_long(s.long, self.params)
            self._z_init = initial_predict(Hs, Hl, self.params, self.solver)
        return self._z_init

    def initial(self) -> np.ndarray:
        """Explicit initial-module query."""
        self.queries += 1
        return self._compute_z_init()

    def predict(self, prices: np.ndarray) -> np.ndarray:
        """y_hat for one price vector (N,) or a stack of them (B, N); one query per vector."""
        P = np.asarray(prices, dtype=float)
        self.queries += 1 if P.ndim == 1 else P.shape[0]
        z = self._compute_z_init() - (self.params.c * P + self.params.b)
        y = z if z.ndim == 2 else z[None]
        for fld in self._j_fields:
            y = integrate_forward(fld, y, self.solver)
        return y if P.ndim == 2 else y[0]

    def predict_grad(self, p: np.ndarray, y_star: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        """``||y* - y_hat||^2``, its gradient w.r.t. price, and y_hat (one query)."""
        self.queries += 1
        z = (self._compute_z_init() - (self.params.c * p + self.params.b))[None]
        ys = [z]
        for fld in self._j_fields:
            ys.append(integrate_forward(fld, ys[-1], self.solver))
        y = ys[-1][0]
        resid = y - y_star
        g = 2.0 * resid[None]
        for fld, y_end in zip(reversed(self._j_fields), reversed(ys[1:])):
            g = adjoint_from_end(fld, y_end, g, self.solver).dL_dz0
        return float(resid @ resid), -self.params.c * g[0], y

    def invert_layer(self, layer: int, y: np.ndarray, solver: SolverConfig) -> np.ndarray:
        self.queries += 1
        return final_invert_layer(y[None], self.params, layer, solver)[0]


def one_shot_optimize(
    req: OptimizationRequest,
    params: ModelParams,
    solver: SolverConfig = TRAIN_SOLVER,
    inverse_solver: SolverConfig = INVERSE_SOLVER,
) -> OptimizationResult:
    """Initial module once, M reverse integrals, closed-form price, one verification pass."""
    t0 = time.perf_counter()
    oracle = Oracle(params, req.sample, solver)
    lo, hi = req.bounds
    z_init = oracle.initial()
    z = req.y_star.copy()
    for i in range(params.cfg.M, 0, -1):
        z = oracle.invert_layer(i, z, inverse_solver)
    inelastic = params.inelastic()
    c_safe = np.where(inelastic, 1.0, params.c)
    p_raw = np.where(inelastic, lo, (z_init - z - params.b) / c_safe)
    clamped = ~inelastic & ((p_raw < lo) | (p_raw > hi))
    p = np.clip(p_raw, lo, hi)
    y = oracle.predict(p)
    return OptimizationResult(p, y, clamped, inelastic, oracle.queries, time.perf_counter() - t0, "oneshot")


def _grid(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(n + 1)


def greedy_optimize(
    req: OptimizationRequest,
    params: ModelParams,
    solver: SolverConfig = TRAIN_SOLVER,
    step: float = GREEDY_STEP,
) -> OptimizationResult:
    """Start at p_min; each round probe +step on every block below p_max and commit the best
    strict improvement of ``||y* - y_hat||^2``. Stop when no probe improves."""
    t0 = time.perf_counter()
    oracle = Oracle(params, req.sample, solver)
    lo, hi = req.bounds
    N = params.cfg.N
    n_steps = int(math.floor((hi - lo) / step + 1e-9))
    k = np.zeros(N, dtype=int)
    y = oracle.predict(lo + step * k)
    err = float(np.sum((req.y_star - y) ** 2))
    rounds = 0
    while True:
        rounds += 1
        best_i, best_err, best_y = -1, err, None
        for i in np.flatnonzero(k < n_steps):
            k[i] += 1
            y_i = oracle.predict(lo + step * k)
            k[i] -= 1
            e = float(np.sum((req.y_star - y_i) ** 2))
            if e < best_err:
                best_i, best_err, best_y = i, e, y_i
        if best_i < 0:
            break
        k[best_i] += 1
        err, y = best_err, best_y
    p = lo + step * k
    return OptimizationResult(
        p, y, np.zeros(N, bool), params.inelastic(), oracle.queries, time.perf_counter() - t0, "greedy", rounds
    )


def gradient_optimize(
    req: OptimizationRequest,
    params: ModelParams,
    solver: SolverConfig = TRAIN_SOLVER,
    max_iters: int = 1000,
    lr: float = 0.05,
    p_init: float = 0.25,
    patience: int = 10,
    min_rel_improvement: float = 1e-6,
) -> OptimizationResult:
    """Projected Adam on the price vector, gradients through the reflection and the final stack's adjoint."""
    t0 = time.perf_counter()
    oracle = Oracle(params, req.sample, solver)
    lo, hi = req.bounds
    N = params.cfg.N
    p = np.full(N, min(max(p_init, lo), hi))
    state = AdamState.fresh(N)
    best_p, best_err, best_y = p.copy(), math.inf, None
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        err, g, y = oracle.predict_grad(p, req.y_star)
        if not (np.isfinite(err) and np.all(np.isfinite(g))):
            break
        if err < best_err:
            best_p, best_err, best_y = p.copy(), err, y
        history.append(best_err)
        if best_err == 0.0:
            break
        if len(history) > patience:
            ref = history[-1 - patience]
            if ref - best_err <= min_rel_improvement * ref:
                break
        try:
            p, state = adam_step(p, g, state, lr)
        except NumericError:
            break
        p = np.clip(p, lo, hi)
    if best_y is None:
        best_y = oracle.predict(best_p)
    return OptimizationResult(
        best_p, best_y, np.zeros(N, bool), params.inelastic(), oracle.queries, time.perf_counter() - t0, "gradient", it
    )


def grid_oracle(
    req: OptimizationRequest,
    params: ModelParams,
    solver: SolverConfig = TRAIN_SOLVER,
    grid_step: float = GREEDY_STEP,
    budget: int = 250_000,
    chunk: int = 4096,
) -> np.ndarray:
    """Exhaustive minimizer of ``||y* - y_hat||^2`` over the product price grid.

    Ties resolve to the lexicographically smallest price vector.
    """
    lo, hi = req.bounds
    axis = _grid(lo, hi, grid_step)
    N = params.cfg.N
    total = len(axis) ** N
    if total > budget:
        raise BudgetExceeded(f"{total} grid points exceed the budget of {budget}")
    oracle = Oracle(params, req.sample, solver)
    best_err, best_p = math.inf, None
    points = itertools.product(axis, repeat=N)
    while True:
        block = np.array(list(itertools.islice(points, chunk)))
        if block.size == 0:
            break
        y = oracle.predict(block)
        errs = np.sum((req.y_star - y) ** 2, axis=1)
        j = int(np.argmin(errs))
        if errs[j] < best_err:
            best_err, best_p = float(errs[j]), block[j].copy()
    return best_p


METHODS = {
    "oneshot": one_shot_optimize,
    "greedy": greedy_optimize,
    "gradient": gradient_optimize,
}


# ---------------------------------------------------------------- evaluation


@dataclass
class FailureReport:
    taus: tuple[float, ...]
    ratios: tuple[float, ...]
    mean_wall_time: float
    n_cases: int
    n_entries: int
    method: str = ""


def evaluate_failure_ratio(results: Sequence[OptimizationResult], taus: Iterable[float] = TAUS) -> FailureReport:
    """Fraction of (case, block) entries whose predicted occupancy strictly exceeds each tau."""
    if not results:
        raise ValueError("no results to evaluate")
    taus = tuple(taus)
    y = np.concatenate([r.y_pred for r in results])
    ratios = tuple(float(np.mean(y > t)) for t in taus)
    wall = float(np.mean([r.wall_time for r in results]))
    return FailureReport(taus, ratios, wall, len(results), y.size, results[0].method)


@dataclass
class CaseResult:
    case_id: int
    result: OptimizationResult
    block_ids: list[str] = field(default_factory=list)
    # price and next-hour occupancy actually observed for this sample
    p_obs: Optional[np.ndarray] = None
    y_obs: Optional[np.ndarray] = None


def run_cases(
    samples: SampleSet,
    params: ModelParams,
    method: str,
    y_star: float | np.ndarray = 0.7,
    bounds: Optional[tuple[float, float]] = None,
    solver: SolverConfig = TRAIN_SOLVER,
    inverse_solver: SolverConfig = INVERSE_SOLVER,
    gradient_lr: float = 0.05,
    max_cases: Optional[int] = None,
) -> list[CaseResult]:
    """Optimize every test sample sequentially (single worker, so wall times are comparable)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    bounds = bounds or (params.cfg.p_min, params.cfg.p_max)
    n = len(samples) if max_cases is None else min(max_cases, len(samples))
    ys = np.broadcast_to(np.asarray(y_star, float), (params.cfg.N,))
    out = []
    for i in range(n):
        req = OptimizationRequest(samples[i], ys, bounds)
        if method == "oneshot":
            r = one_shot_optimize(req, params, solver, inverse_solver)
        elif method == "gradient":
            r = gradient_optimize(req, params, solver, lr=gradient_lr)
        else:
            r = greedy_optimize(req, params, solver)
        out.append(CaseResult(i, r, list(samples.block_ids), samples.price[i].copy(), samples.target[i].copy()))
    return out


RESULT_COLUMNS = [
    "case_id",
    "block_id",
    "method",
    "p_star",
    "y_pred",
    "clamped",
    "inelastic",
    "queries",
    "p_obs",
    "y_obs",
    "wall_time_s",
]


def write_results_csv(path: Union[str, Path], cases: Iterable[CaseResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for case in cases:
            r = case.result
            ids = case.block_ids or [str(i) for i in range(len(r.p_star))]
            p_obs = case.p_obs if case.p_obs is not None else np.full(len(ids), np.nan)
            y_obs = case.y_obs if case.y_obs is not None else np.full(len(ids), np.nan)
            for i, b in enumerate(ids):
                w.writerow(
                    [
                        case.case_id,
                        b,
                        r.method,
                        repr(float(r.p_star[i])),
                        repr(float(r.y_pred[i])),
                        int(r.clamped[i]),
                        int(r.inelastic[i]),
                        r.oracle_queries,
                        repr(float(p_obs[i])),
                        repr(float(y_obs[i])),
                        f"{r.wall_time:.9f}",
                    ]
                )


def write_failure_csv(path: Union[str, Path], reports: Iterable[FailureReport]) -> None:
    reports = list(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        taus = reports[0].taus if reports else TAUS
        w.writerow(["method", *[f"fail_tau_{t:.2f}" for t in taus], "mean_wall_time_s", "n_cases", "n_entries"])
        for r in reports:
            w.writerow([r.method, *[repr(x) for x in r.ratios], f"{r.mean_wall_time:.9f}", r.n_cases, r.n_entries])
