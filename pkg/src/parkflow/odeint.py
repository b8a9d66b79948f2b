"""Fixed-step and adaptive ODE integration on t in [0, 1], forward and in reverse time,
with adjoint-sensitivity gradients.

A field is any object with ``__call__(t, z) -> dz`` and
``vjp(t, z, v) -> (dz, v^T df/dz, v^T df/dtheta, v^T df/daux | None)`` plus an
``n_params`` attribute. Fields here are autonomous; ``t`` is accepted and ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .diffcore import DimensionError, Mlp3, NumericError, mlp3_forward, mlp3_vjp

METHODS = ("euler", "rk4", "dopri5")


class DivergenceError(RuntimeError):
    """Adaptive stepping exceeded its step budget."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    fixed_steps: int = 16
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 10_000
    # dopri5 step cap; the embedded error estimate misses relu kinks crossed by long steps
    max_step: float = 0.125

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.fixed_steps < 1:
            raise ValueError("fixed_steps must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 < self.max_step <= 1.0:
            raise ValueError("max_step must lie in (0, 1]")


TRAIN_SOLVER = SolverConfig("rk4", fixed_steps=16)
# Inverting with the forward scheme run backwards cancels its discretisation error, so
# final_invert undoes the prediction map actually used. An adaptive inverse is only as
# good as the forward map's own error times the inverse's conditioning (~1e-5 here).
INVERSE_SOLVER = TRAIN_SOLVER
ADAPTIVE_SOLVER = SolverConfig("dopri5", rtol=1e-5, atol=1e-5)


@dataclass
class SolveStats:
    nfev: int = 0
    accepted: int = 0
    rejected: int = 0
    max_err_ratio: float = 0.0


# ---------------------------------------------------------------- fields


class MlpField:
    """``dz/dt = mlp([z, aux])``; ``aux`` rows are held constant (augmented NODE)."""

    def __init__(self, mlp: Mlp3, aux: Optional[np.ndarray] = None):
        self.mlp = mlp
        self.aux = aux
        self.n_params = mlp.n_params

    def _input(self, z: np.ndarray) -> np.ndarray:
        if self.aux is None:
            return z
        aux = self.aux if self.aux.shape[0] == z.shape[0] else np.broadcast_to(self.aux, (z.shape[0], self.aux.shape[1]))
        return np.concatenate([z, aux], axis=1)

    def __call__(self, t: float, z: np.ndarray) -> np.ndarray:
        return mlp3_forward(self.mlp, self._input(z))

    def vjp(self, t: float, z: np.ndarray, v: np.ndarray):
        y, gx, gtheta = mlp3_vjp(self.mlp, self._input(z), v)
        if self.aux is None:
            return y, gx, gtheta, None
        d = z.shape[1]
        return y, gx[:, :d], gtheta, gx[:, d:]


class LinearField:
    """``dz/dt = z @ A``. Closed-form flows make this the reference field for tests."""

    def __init__(self, A: np.ndarray):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.n_params = self.A.size

    def __call__(self, t: float, z: np.ndarray) -> np.ndarray:
        return z @ self.A

    def vjp(self, t: float, z: np.ndarray, v: np.ndarray):
        return z @ self.A, v @ self.A.T, (z.T @ v).ravel(), None


# ---------------------------------------------------------------- steppers

# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_DP_E = _DP_B5 - _DP_B4


def _rk4_step(fn, t, y, h):
    k1 = fn(t, y)
    k2 = fn(t + 0.5 * h, y + (0.5 * h) * k1)
    k3 = fn(t + 0.5 * h, y + (0.5 * h) * k2)
    k4 = fn(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _dopri_step(fn, t, y, h, k1):
    ks = [k1]
    for i in range(1, 7):
        dy = sum(a * k for a, k in zip(_DP_A[i], ks) if a != 0.0)
        ks.append(fn(t + _DP_C[i] * h, y + h * dy))
    y5 = y + h * sum(b * k for b, k in zip(_DP_B5, ks) if b != 0.0)
    err = h * sum(e * k for e, k in zip(_DP_E, ks))
    return y5, err, ks[6]


def _initial_step(fn, t0, y0, f0, rtol, atol, span):
    scale = atol + rtol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = fn(t0 + h0, y0 + h0 * f0)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def solve(
    fn: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    cfg: SolverConfig,
    stats: Optional[SolveStats] = None,
) -> np.ndarray:
    """Integrate ``dy/dt = fn(t, y)`` from t=0 to t=1."""
    stats = stats if stats is not None else SolveStats()
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite initial state")

    if cfg.method in ("euler", "rk4"):
        n = cfg.fixed_steps
        h = 1.0 / n
        for i in range(n):
            t = i * h
            if cfg.method == "euler":
                y = y + h * fn(t, y)
                stats.nfev += 1
            else:
                y = _rk4_step(fn, t, y, h)
                stats.nfev += 4
            stats.accepted += 1
        if not np.all(np.isfinite(y)):
            raise NumericError("state became non-finite during integration")
        return y

    t, t_end = 0.0, 1.0
    f = fn(t, y)
    stats.nfev += 1
    h = min(_initial_step(fn, t, y, f, cfg.rtol, cfg.atol, t_end), cfg.max_step)
    stats.nfev += 1
    attempts = 0
    while t < t_end:
        if attempts >= cfg.max_steps:
            raise DivergenceError(f"dopri5 exceeded max_steps={cfg.max_steps} at t={t:.6g}")
        attempts += 1
        last = t + h >= t_end - 1e-12
        if last:
            h = t_end - t
        y_new, err, f_new = _dopri_step(fn, t, y, h, f)
        stats.nfev += 6
        if not np.all(np.isfinite(y_new)):
            raise NumericError("state became non-finite during integration")
        tol = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = float(np.max(np.abs(err) / tol)) if err.size else 0.0
        if ratio <= 1.0:
            t = t_end if last else t + h
            y, f = y_new, f_new
            stats.accepted += 1
            stats.max_err_ratio = max(stats.max_err_ratio, ratio)
            factor = 5.0 if ratio == 0.0 else min(5.0, max(0.2, 0.9 * ratio ** -0.2))
        else:
            stats.rejected += 1
            factor = max(0.2, 0.9 * ratio ** -0.2)
        h = min(h * factor, cfg.max_step)
    return y


def _reversed(fn):
    # running the field backwards: s = 1 - t, dy/ds = -f(1 - s, y)
    return lambda s, y: -fn(1.0 - s, y)


def integrate_forward(f, z0: np.ndarray, cfg: SolverConfig = TRAIN_SOLVER, stats: Optional[SolveStats] = None) -> np.ndarray:
    return solve(f, z0, cfg, stats)


def integrate_reverse(f, z1: np.ndarray, cfg: SolverConfig = TRAIN_SOLVER, stats: Optional[SolveStats] = None) -> np.ndarray:
    """Recover ``z(0)`` from ``z(1)`` by integrating the same field from t=1 back to t=0."""
    return solve(_reversed(f), z1, cfg, stats)


# ---------------------------------------------------------------- gradients


@dataclass
class AdjointResult:
    dL_dz0: np.ndarray
    dL_dtheta: np.ndarray
    dL_daux: Optional[np.ndarray]
    z0: np.ndarray  # reconstructed by reverse integration


def adjoint_from_end(f, z1: np.ndarray, dL_dz1: np.ndarray, cfg: SolverConfig = TRAIN_SOLVER) -> AdjointResult:
    """Adjoint sensitivity pass given the endpoint ``z(1)``.

    Integrates ``(z, a_z, a_theta, a_aux)`` jointly backward from t=1; ``z`` is
    rebuilt by reverse integration so no trajectory is stored.
    """
    if dL_dz1.shape != z1.shape:
        raise DimensionError(f"dL_dz1 shape {dL_dz1.shape} != z shape {z1.shape}")
    aux = getattr(f, "aux", None)
    n_z = z1.size
    n_p = f.n_params
    n_aux = 0 if aux is None else np.broadcast_to(aux, (z1.shape[0], aux.shape[1])).size
    shape = z1.shape

    def aug(s, y):
        z = y[:n_z].reshape(shape)
        a = y[n_z : 2 * n_z].reshape(shape)
        dz, gz, gth, gaux = f.vjp(1.0 - s, z, a)
        parts = [-dz.ravel(), gz.ravel(), gth]
        if n_aux:
            parts.append(gaux.ravel())
        return np.concatenate(parts)

    y1 = np.concatenate([z1.ravel(), dL_dz1.ravel(), np.zeros(n_p + n_aux)])
    y0 = solve(aug, y1, cfg)
    z0 = y0[:n_z].reshape(shape)
    dz0 = y0[n_z : 2 * n_z].reshape(shape)
    dth = y0[2 * n_z : 2 * n_z + n_p]
    daux = None
    if n_aux:
        daux = y0[2 * n_z + n_p :].reshape(z1.shape[0], aux.shape[1])
    return AdjointResult(dz0, dth, daux, z0)


def adjoint_gradients(f, z0: np.ndarray, dL_dz1: np.ndarray, cfg: SolverConfig = TRAIN_SOLVER):
    """``(dL/dz0, dL/dtheta)`` for ``L`` depending on ``z(1) = integrate_forward(f, z0)``."""
    if dL_dz1.shape != z0.shape:
        raise DimensionError(f"dL_dz1 shape {dL_dz1.shape} != z0 shape {z0.shape}")
    z1 = integrate_forward(f, z0, cfg)
    res = adjoint_from_end(f, z1, dL_dz1, cfg)
    return res.dL_dz0, res.dL_dtheta


def backprop_gradients(f, z0: np.ndarray, dL_dz1: np.ndarray, cfg: SolverConfig = TRAIN_SOLVER):
    """Exact reverse-mode differentiation of the fixed-step discrete solver.

    Stores one state per step, so memory grows with the step count. Serves as the
    reference the adjoint is checked against.
    Returns ``(dL/dz0, dL/dtheta, dL/daux | None)``.
    """
    if cfg.method not in ("euler", "rk4"):
        raise ValueError("backprop_gradients needs a fixed-step method")
    n = cfg.fixed_steps
    h = 1.0 / n
    ys = [np.array(z0, dtype=float)]
    for i in range(n):
        if cfg.method == "euler":
            ys.append(ys[-1] + h * f(i * h, ys[-1]))
        else:
            ys.append(_rk4_step(f, i * h, ys[-1], h))

    g = np.array(dL_dz1, dtype=float)
    gth = np.zeros(f.n_params)
    gaux = None

    def acc(gx_aux):
        nonlocal gaux
        if gx_aux is not None:
            gaux = gx_aux if gaux is None else gaux + gx_aux

    for i in reversed(range(n)):
        y, t = ys[i], i * h
        if cfg.method == "euler":
            _, gz, gt, ga = f.vjp(t, y, h * g)
            gth += gt
            acc(ga)
            g = g + gz
            continue
        k1 = f(t, y)
        y2 = y + 0.5 * h * k1
        k2 = f(t + 0.5 * h, y2)
        y3 = y + 0.5 * h * k2
        k3 = f(t + 0.5 * h, y3)
        y4 = y + h * k3
        gk4 = (h / 6.0) * g
        gk3 = (h / 3.0) * g
        gk2 = (h / 3.0) * g
        gk1 = (h / 6.0) * g
        gy = g.copy()
        _, gz, gt, ga = f.vjp(t + h, y4, gk4)
        gy += gz
        gk3 = gk3 + h * gz
        gth += gt
        acc(ga)
        _, gz, gt, ga = f.vjp(t + 0.5 * h, y3, gk3)
        gy += gz
        gk2 = gk2 + 0.5 * h * gz
        gth += gt
        acc(ga)
        _, gz, gt, ga = f.vjp(t + 0.5 * h, y2, gk2)
        gy += gz
        gk1 = gk1 + 0.5 * h * gz
        gth += gt
        acc(ga)
        _, gz, gt, ga = f.vjp(t, y, gk1)
        gy += gz
        gth += gt
        acc(ga)
        g = gy
    return g, gth, gaux
