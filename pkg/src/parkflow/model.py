"""Occupancy prediction network: initial module, price reflection, final NODE stack.

Shapes: a single sample carries ``short`` (K, N), ``long`` (L, N), ``price`` (N,).
Internally everything is batched with one row per sample, so the short-term state
is flattened to (B, N * dim_h_short) and the fully-connected maps act on whole
matrices (every block sees every other block).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import FeatureSample, SampleSet
from .diffcore import DimensionError, Mlp3, NumericError, ParamSegmentRegistry, uniform_init
from .odeint import (
    INVERSE_SOLVER,
    TRAIN_SOLVER,
    MlpField,
    SolverConfig,
    adjoint_from_end,
    backprop_gradients,
    integrate_forward,
    integrate_reverse,
)

INELASTIC_EPS = 1e-6
CHECKPOINT_MAGIC = b"PFCKPT01"
CHECKPOINT_VERSION = 1


class PriceDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    N: int
    K: int = 1
    L: int = 12
    dim_h_short: int = 32
    M: int = 3
    c_init: float = 0.03
    p_min: float = 0.25
    p_max: float = 34.5

    def __post_init__(self) -> None:
        if self.N < 1 or self.K < 1 or self.M < 1 or self.dim_h_short < 1:
            raise ValueError("N, K, M and dim_h_short must be >= 1")
        if self.L != 12:
            raise ValueError("L must be 12")
        if not self.p_min < self.p_max:
            raise ValueError("p_min must be below p_max")
        if self.c_init <= 0:
            raise ValueError("c_init must be positive")


def build_registry(cfg: ModelConfig) -> ParamSegmentRegistry:
    N, K, L, dh = cfg.N, cfg.K, cfg.L, cfg.dim_h_short
    D = N * dh
    reg = ParamSegmentRegistry()
    reg.add("enc0.W", (K, dh))
    reg.add("enc0.b", (dh,))
    reg.add_mlp3("f", D, D, D)
    reg.add("long.W", (N * L, N * L))
    reg.add("long.b", (N * L,))
    reg.add("c0.W", (D, N))
    reg.add("c0.b", (N,))
    reg.add_mlp3("m", N * (L + 1), N, N)
    reg.add("c", (N,))
    reg.add("b", (N,))
    for i in range(1, cfg.M + 1):
        reg.add_mlp3(f"j{i}", N, N, N)
    return reg


def _fan_in(name: str, shape: tuple[int, ...], reg: ParamSegmentRegistry) -> int:
    if len(shape) == 2:
        return shape[0]
    # bias: fan-in of the matching weight
    return reg.lookup(name.replace(".b", ".W"))[0][0]


@dataclass
class ModelParams:
    cfg: ModelConfig
    flat: np.ndarray
    registry: ParamSegmentRegistry

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelParams":
        reg = build_registry(cfg)
        return cls(cfg, np.zeros(reg.size), reg)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        p = cls.zeros(cfg)
        rng = np.random.default_rng(seed)
        for name, shape, _ in p.registry.segments:
            if name in ("c", "b"):
                continue
            p.seg(name)[...] = uniform_init(shape, _fan_in(name, shape, p.registry), rng)
        p.seg("c")[:] = cfg.c_init
        return p

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.flat.copy(), self.registry)

    def seg(self, name: str) -> np.ndarray:
        return self.registry.view(self.flat, name)

    def mlp(self, prefix: str) -> Mlp3:
        sl = self.registry.prefix_slice(prefix)
        i, h = self.registry.lookup(prefix + ".W1")[0]
        o = self.registry.lookup(prefix + ".W3")[0][1]
        return Mlp3.from_flat(self.flat[sl], i, h, o)

    @property
    def c(self) -> np.ndarray:
        return self.seg("c")

    @property
    def b(self) -> np.ndarray:
        return self.seg("b")

    def project(self) -> None:
        """Keep the elasticity vector non-negative."""
        np.maximum(self.c, 0.0, out=self.c)

    def inelastic(self) -> np.ndarray:
        return self.c < INELASTIC_EPS


@dataclass
class PredictionBreakdown:
    H_short: np.ndarray  # (N, dim_h_short)
    H_long: np.ndarray  # (N, L)
    z_init: np.ndarray  # (N,)
    z_adjust: np.ndarray  # (N,)
    y_hat: np.ndarray  # (N,)


# ---------------------------------------------------------------- stages


def _batched(x: np.ndarray, ndim_single: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == ndim_single:
        return x[None], True
    return x, False


def encode_h0(short: np.ndarray, params: ModelParams) -> np.ndarray:
    """Shared per-block affine map of the K recent rates; returns (B, N*dh)."""
    cfg = params.cfg
    if short.ndim != 3 or short.shape[1:] != (cfg.K, cfg.N):
        raise DimensionError(f"short history must be (B, {cfg.K}, {cfg.N}), got {short.shape}")
    H0 = np.einsum("bkn,kd->bnd", short, params.seg("enc0.W")) + params.seg("enc0.b")
    return H0.reshape(short.shape[0], -1)


def encode_short(short: np.ndarray, params: ModelParams, solver: SolverConfig = TRAIN_SOLVER) -> np.ndarray:
    """H_short = H(0) + integral of f; input (K, N) or (B, K, N)."""
    s, single = _batched(short, 2)
    H = integrate_forward(MlpField(params.mlp("f")), encode_h0(s, params), solver)
    H = H.reshape(s.shape[0], params.cfg.N, params.cfg.dim_h_short)
    return H[0] if single else H


def _long_input(long: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if long.ndim != 3 or long.shape[1:] != (cfg.L, cfg.N):
        raise DimensionError(f"long history must be (B, {cfg.L}, {cfg.N}), got {long.shape}")
    # horizontal concatenation of l_i^T -> (N, L), flattened row-major
    return np.transpose(long, (0, 2, 1)).reshape(long.shape[0], -1)


def encode_long(long: np.ndarray, params: ModelParams) -> np.ndarray:
    x, single = _batched(long, 2)
    cfg = params.cfg
    H = _long_input(x, cfg) @ params.seg("long.W") + params.seg("long.b")
    H = H.reshape(x.shape[0], cfg.N, cfg.L)
    return H[0] if single else H


def initial_predict(
    H_short: np.ndarray, H_long: np.ndarray, params: ModelParams, solver: SolverConfig = TRAIN_SOLVER
) -> np.ndarray:
    """c(0) = FC(H_short), then evolve c under m(c, H_long) with H_long frozen."""
    Hs, single = _batched(H_short, 2)
    Hl, _ = _batched(H_long, 2)
    cfg = params.cfg
    if Hs.shape[1:] != (cfg.N, cfg.dim_h_short) or Hl.shape[1:] != (cfg.N, cfg.L):
        raise DimensionError("H_short/H_long shape mismatch")
    B = Hs.shape[0]
    c0 = Hs.reshape(B, -1) @ params.seg("c0.W") + params.seg("c0.b")
    z = integrate_forward(MlpField(params.mlp("m"), aux=Hl.reshape(B, -1)), c0, solver)
    return z[0] if single else z


def check_price(p: np.ndarray, cfg: ModelConfig, tol: float = 1e-9) -> None:
    if np.any(p < cfg.p_min - tol) or np.any(p > cfg.p_max + tol):
        raise PriceDomainError(f"price outside [{cfg.p_min}, {cfg.p_max}]")


def reflect_price(z_init: np.ndarray, p: np.ndarray, params: ModelParams, check: bool = True) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if check:
        check_price(p, params.cfg)
    return z_init - (params.c * p + params.b)


def final_predict(z_adjust: np.ndarray, params: ModelParams, solver: SolverConfig = TRAIN_SOLVER) -> np.ndarray:
    y, single = _batched(z_adjust, 1)
    for i in range(1, params.cfg.M + 1):
        y = integrate_forward(MlpField(params.mlp(f"j{i}")), y, solver)
    return y[0] if single else y


def final_invert_layer(y: np.ndarray, params: ModelParams, layer: int, solver: SolverConfig = INVERSE_SOLVER) -> np.ndarray:
    return integrate_reverse(MlpField(params.mlp(f"j{layer}")), y, solver)


def final_invert(y_star: np.ndarray, params: ModelParams, solver: SolverConfig = INVERSE_SOLVER) -> np.ndarray:
    """Undo the final stack: reverse integrals from j_M down to j_1."""
    y, single = _batched(y_star, 1)
    for i in range(params.cfg.M, 0, -1):
        y = final_invert_layer(y, params, i, solver)
    return y[0] if single else y


def _as_set(sample: Union[FeatureSample, SampleSet]) -> tuple[SampleSet, bool]:
    if isinstance(sample, FeatureSample):
        return SampleSet.stack([sample]), True
    return sample, False


def forward_full(sample: Union[FeatureSample, SampleSet], params: ModelParams, solver: SolverConfig = TRAIN_SOLVER):
    s, single = _as_set(sample)
    Hs = encode_short(s.short, params, solver)
    Hl = encode_long(s.long, params)
    z_init = initial_predict(Hs, Hl, params, solver)
    z_adj = reflect_price(z_init, s.price, params)
    y = final_predict(z_adj, params, solver)
    out = PredictionBreakdown(Hs, Hl, z_init, z_adj, y)
    if single:
        out = PredictionBreakdown(*(a[0] for a in (Hs, Hl, z_init, z_adj, y)))
    return out


def predict(samples: SampleSet, params: ModelParams, solver: SolverConfig = TRAIN_SOLVER, chunk: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(samples), chunk):
        out.append(forward_full(samples[lo : lo + chunk], params, solver).y_hat)
    if not out:
        return np.zeros((0, params.cfg.N))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- gradients


def forward_backward(
    sample: Union[FeatureSample, SampleSet],
    params: ModelParams,
    solver: SolverConfig = TRAIN_SOLVER,
    target: Optional[np.ndarray] = None,
    grad_mode: str = "adjoint",
) -> tuple[float, np.ndarray]:
    """Sum over samples of ||y - y_hat||^2 and its gradient w.r.t. every parameter segment."""
    if grad_mode not in ("adjoint", "backprop"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    s, _ = _as_set(sample)
    cfg, reg = params.cfg, params.registry
    y_true = np.asarray(s.target if target is None else target, dtype=float).reshape(len(s), cfg.N)
    B = len(s)

    def back(field, z_in, z_out, g):
        if grad_mode == "adjoint":
            r = adjoint_from_end(field, z_out, g, solver)
            return r.dL_dz0, r.dL_dtheta, r.dL_daux
        return backprop_gradients(field, z_in, g, solver)

    # forward, keeping only layer boundaries
    H0 = encode_h0(s.short, params)
    f_field = MlpField(params.mlp("f"))
    Hs = integrate_forward(f_field, H0, solver)
    xl = _long_input(s.long, cfg)
    Hl = xl @ params.seg("long.W") + params.seg("long.b")
    c0 = Hs @ params.seg("c0.W") + params.seg("c0.b")
    m_field = MlpField(params.mlp("m"), aux=Hl)
    z_init = integrate_forward(m_field, c0, solver)
    check_price(s.price, cfg)
    z_adj = z_init - (params.c * s.price + params.b)
    ys = [z_adj]
    j_fields = [MlpField(params.mlp(f"j{i}")) for i in range(1, cfg.M + 1)]
    for fld in j_fields:
        ys.append(integrate_forward(fld, ys[-1], solver))
    y_hat = ys[-1]
    if not np.all(np.isfinite(y_hat)):
        raise NumericError("non-finite prediction")

    resid = y_hat - y_true
    loss = float(np.sum(resid * resid))
    grad = np.zeros(reg.size)
    g = 2.0 * resid
    for i in range(cfg.M, 0, -1):
        g, gth, _ = back(j_fields[i - 1], ys[i - 1], ys[i], g)
        grad[reg.prefix_slice(f"j{i}")] = gth
    grad[reg.slice("c")] = -np.sum(g * s.price, axis=0)
    grad[reg.slice("b")] = -np.sum(g, axis=0)
    g, gth, g_hl = back(m_field, c0, z_init, g)
    grad[reg.prefix_slice("m")] = gth
    grad[reg.slice("c0.W")] = (Hs.T @ g).ravel()
    grad[reg.slice("c0.b")] = g.sum(axis=0)
    g_hs = g @ params.seg("c0.W").T
    grad[reg.slice("long.W")] = (xl.T @ g_hl).ravel()
    grad[reg.slice("long.b")] = g_hl.sum(axis=0)
    g_h0, gth, _ = back(f_field, H0, Hs, g_hs)
    grad[reg.prefix_slice("f")] = gth
    g_h0 = g_h0.reshape(B, cfg.N, cfg.dim_h_short)
    grad[reg.slice("enc0.W")] = np.einsum("bkn,bnd->kd", s.short, g_h0).ravel()
    grad[reg.slice("enc0.b")] = g_h0.sum(axis=(0, 1))
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return loss, grad


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: Union[str, Path], params: ModelParams, extra: Optional[dict] = None) -> None:
    """Header (JSON) + raw little-endian float64 parameter vector."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.cfg),
        "segments": [{"name": n, "shape": list(s), "offset": o} for n, s, o in params.registry.segments],
        "size": params.registry.size,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parkflow checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    cfg = ModelConfig(**header["config"])
    reg = build_registry(cfg)
    expected = [{"name": a, "shape": list(b), "offset": c} for a, b, c in reg.segments]
    if header["segments"] != expected:
        raise ValueError("checkpoint segment layout does not match its config")
    flat = np.frombuffer(raw[16 + n :], dtype="<f8").astype(float)
    if flat.size != reg.size:
        raise ValueError("checkpoint payload size mismatch")
    return ModelParams(cfg, flat, reg), header.get("extra", {})
