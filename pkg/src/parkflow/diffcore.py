"""Dense linear algebra helpers, the 3-layer MLP block and its manual backward pass.

Every ODE function in the model is an ``Mlp3``: ``tanh(FC(relu(FC(relu(FC(x))))))``.
Arrays are plain ``float64`` numpy arrays; a batch of inputs is a 2-D array with
one row per instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

MLP3_SEGMENTS = ("W1", "b1", "W2", "b2", "W3", "b3")


class DimensionError(ValueError):
    """Raised when array shapes do not chain."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


@dataclass
class Mlp3:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def __post_init__(self) -> None:
        i, h = self.W1.shape
        if self.W2.shape != (h, h) or self.W3.shape[0] != h:
            raise DimensionError("inconsistent Mlp3 shape chain")
        if self.b1.shape != (h,) or self.b2.shape != (h,) or self.b3.shape != (self.W3.shape[1],):
            raise DimensionError("bias shapes do not match weights")

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hid_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W3.shape[1]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def arrays(self) -> Iterator[np.ndarray]:
        return (getattr(self, k) for k in MLP3_SEGMENTS)

    @staticmethod
    def shapes(in_dim: int, hid_dim: int, out_dim: int) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("W1", (in_dim, hid_dim)),
            ("b1", (hid_dim,)),
            ("W2", (hid_dim, hid_dim)),
            ("b2", (hid_dim,)),
            ("W3", (hid_dim, out_dim)),
            ("b3", (out_dim,)),
        ]

    @classmethod
    def zeros(cls, in_dim: int, hid_dim: int, out_dim: int) -> "Mlp3":
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(in_dim, hid_dim, out_dim)})

    @classmethod
    def init(cls, in_dim: int, hid_dim: int, out_dim: int, rng: np.random.Generator) -> "Mlp3":
        arrs = {}
        for name, shape in cls.shapes(in_dim, hid_dim, out_dim):
            fan_in = in_dim if name in ("W1", "b1") else hid_dim
            arrs[name] = uniform_init(shape, fan_in, rng)
        return cls(**arrs)

    @classmethod
    def from_flat(cls, flat: np.ndarray, in_dim: int, hid_dim: int, out_dim: int) -> "Mlp3":
        """Build an Mlp3 whose arrays are views into ``flat`` (segment order W1,b1,...,b3)."""
        arrs, off = {}, 0
        for name, shape in cls.shapes(in_dim, hid_dim, out_dim):
            n = int(np.prod(shape))
            arrs[name] = flat[off : off + n].reshape(shape)
            off += n
        if off != flat.size:
            raise DimensionError(f"flat vector has {flat.size} entries, Mlp3 needs {off}")
        return cls(**arrs)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def uniform_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _as_batch(m: Mlp3, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != m.in_dim:
        raise DimensionError(f"expected (*, {m.in_dim}) input, got {x.shape}")
    return x


def mlp3_forward(m: Mlp3, x: np.ndarray) -> np.ndarray:
    x = _as_batch(m, x)
    e0 = np.maximum(x @ m.W1 + m.b1, 0.0)
    e1 = np.maximum(e0 @ m.W2 + m.b2, 0.0)
    return np.tanh(e1 @ m.W3 + m.b3)


def mlp3_vjp(m: Mlp3, x: np.ndarray, grad_out: np.ndarray):
    """Forward pass plus vector-Jacobian products.

    Returns ``(y, grad_x, grad_flat)`` where ``grad_flat`` is the parameter
    gradient summed over the batch, laid out like ``Mlp3.flat``.
    """
    x = _as_batch(m, x)
    a0 = x @ m.W1 + m.b1
    e0 = np.maximum(a0, 0.0)
    a1 = e0 @ m.W2 + m.b2
    e1 = np.maximum(a1, 0.0)
    y = np.tanh(e1 @ m.W3 + m.b3)
    if grad_out.shape != y.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != output shape {y.shape}")

    g2 = grad_out * (1.0 - y * y)
    gW3 = e1.T @ g2
    gb3 = g2.sum(axis=0)
    g1 = (g2 @ m.W3.T) * (a1 > 0)
    gW2 = e0.T @ g1
    gb2 = g1.sum(axis=0)
    g0 = (g1 @ m.W2.T) * (a0 > 0)
    gW1 = x.T @ g0
    gb1 = g0.sum(axis=0)
    gx = g0 @ m.W1.T
    flat = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gW3.ravel(), gb3])
    return y, gx, flat


def mlp3_backward(m: Mlp3, x: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, Mlp3]:
    """Gradients of ``sum(grad_out * mlp3_forward(m, x))`` w.r.t. ``x`` and the weights."""
    _, gx, flat = mlp3_vjp(m, x, np.asarray(grad_out, dtype=float))
    return gx, Mlp3.from_flat(flat, m.in_dim, m.hid_dim, m.out_dim)


def fd_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, same shape as ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        fp = fn(x)
        flat_x[i] = orig - eps
        fm = fn(x)
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        flat_g[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference scaled by the larger of the two max-norms."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


@dataclass
class ParamSegmentRegistry:
    """Named, disjoint segments laid out contiguously over one flat vector."""

    segments: list[tuple[str, tuple[int, ...], int]] = field(default_factory=list)
    size: int = 0

    def add(self, name: str, shape: tuple[int, ...]) -> None:
        if any(s[0] == name for s in self.segments):
            raise ValueError(f"duplicate segment {name!r}")
        shape = tuple(int(d) for d in shape)
        self.segments.append((name, shape, self.size))
        self.size += int(np.prod(shape))

    def add_mlp3(self, prefix: str, in_dim: int, hid_dim: int, out_dim: int) -> None:
        for name, shape in Mlp3.shapes(in_dim, hid_dim, out_dim):
            self.add(f"{prefix}.{name}", shape)

    def names(self) -> list[str]:
        return [s[0] for s in self.segments]

    def lookup(self, name: str) -> tuple[tuple[int, ...], int]:
        for n, shape, off in self.segments:
            if n == name:
                return shape, off
        raise KeyError(name)

    def slice(self, name: str) -> slice:
        shape, off = self.lookup(name)
        return slice(off, off + int(np.prod(shape)))

    def prefix_slice(self, prefix: str) -> slice:
        """Contiguous span covering every segment named ``prefix.*``."""
        hits = [(off, int(np.prod(shape))) for n, shape, off in self.segments if n.startswith(prefix + ".")]
        if not hits:
            raise KeyError(prefix)
        start = min(o for o, _ in hits)
        stop = max(o + n for o, n in hits)
        if stop - start != sum(n for _, n in hits):
            raise ValueError(f"segments under {prefix!r} are not contiguous")
        return slice(start, stop)

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        shape, _ = self.lookup(name)
        return flat[self.slice(name)].reshape(shape)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Pure: returns new arrays and a new state."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionError("params, grads and Adam state must share a shape")
    if lr <= 0:
        raise ValueError("lr must be positive")
    check_finite(grads, "gradient")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, step)
