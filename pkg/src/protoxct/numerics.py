"""Dense float64 primitives shared by the rest of the toolkit.

Everything here works on plain ``numpy.ndarray`` objects with dtype float64.
Randomness goes through :func:`make_rng`, which wraps numpy's PCG64 bit
generator so that a given integer seed reproduces the same stream on every
platform numpy supports.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "as_vec",
    "as_mat",
    "make_rng",
    "derive_rng",
    "log_sum_exp",
    "softmax",
    "l2_normalize",
    "cosine_sim",
    "global_norm",
    "clip_global_norm",
    "finite_diff_grad",
    "sigmoid",
]


def as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def as_mat(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent child stream for ``(seed, *keys)``.

    Used wherever work may be fanned out (per-record augmentation, per-stage
    seeds of a pipeline run); the child only depends on the key tuple, never
    on how many draws other children made.
    """
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.PCG64(ss))


def log_sum_exp(xs, axis: int | None = None):
    """Stable ``log(sum(exp(xs)))`` by shifting with the maximum.

    With ``axis=None`` the input must be a non-empty vector and a float is
    returned; otherwise the reduction runs along ``axis`` of an array.
    """
    a = np.asarray(xs, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty reduction")
    if axis is None:
        a = a.ravel()
        m = a.max()
        return float(m + math.log(np.exp(a - m).sum()))
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(xs, axis: int = -1) -> np.ndarray:
    a = np.asarray(xs, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty reduction")
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0.0:
        raise ValueError("degenerate direction")
    return v / n


def cosine_sim(a, b) -> float:
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    c = float(l2_normalize(a) @ l2_normalize(b))
    return min(1.0, max(-1.0, c))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float):
    """Scale a set of gradient arrays so their joint l2 norm is <= max_norm.

    Returns ``(clipped, factor)``. Arrays are copied, never modified in place.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return [np.array(g, dtype=np.float64, copy=True) for g in grads], 1.0
    factor = max_norm / norm
    return [np.asarray(g, dtype=np.float64) * factor for g in grads], factor


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    ``x`` may have any shape; the result has the same shape. Each coordinate
    costs two evaluations of ``f``.
    """
    x0 = np.array(x, dtype=np.float64, copy=True)
    flat = x0.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x0)
        flat[i] = orig - h
        fm = f(x0)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x0.shape)
