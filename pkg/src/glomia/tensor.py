"""Dense float64 matrix helpers, seeded randomness, Adam and a gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape and finiteness checks the rest of the package relies on.

Randomness
----------
Every random stream is a Philox4x64-10 counter-based generator keyed by a
64-bit seed (``numpy.random.Philox(key=seed)``), with the counter starting at
zero. Child seeds are derived with :func:`derive_seed`, which hashes the parent
seed, a purpose tag and any integer indices with BLAKE2b. Because Philox is
counter-based, a stream can also be split into fixed-size blocks that are
reproducible in isolation (see :func:`raw_blocks`).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError, RangeError, ShapeError

SEED_MASK = (1 << 64) - 1


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite values."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D, got shape {m.shape}")
    check_finite(m, name)
    return m


def check_finite(a: np.ndarray, name: str = "matrix") -> None:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name}: contains NaN or Inf")


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def add(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _same_shape(a, b, "add")
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _same_shape(a, b, "sub")
    return a - b


def hadamard(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _same_shape(a, b, "hadamard")
    return a * b


def scale(a, c: float) -> np.ndarray:
    return as_matrix(a, "a") * float(c)


def transpose(a) -> np.ndarray:
    return as_matrix(a, "a").T.copy()


def row_softmax(a) -> np.ndarray:
    """Softmax along the last axis with max-subtraction.

    Accepts any array with at least one dimension; each slice along the last
    axis sums to one.
    """
    a = np.asarray(a, dtype=np.float64)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# randomness


def derive_seed(parent: int, tag: str, *index: int) -> int:
    """Child seed = BLAKE2b-64(parent, tag, indices), little-endian."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(parent & SEED_MASK).to_bytes(8, "little"))
    h.update(tag.encode("utf-8"))
    for i in index:
        h.update(b"\x00")
        h.update(int(i & SEED_MASK).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    """Generator over Philox4x64-10 keyed by ``seed`` (counter at 0)."""
    return np.random.Generator(np.random.Philox(key=int(seed) & SEED_MASK))


def raw_blocks(seed: int, start: int, count: int, words: int) -> np.ndarray:
    """Raw uint64 words for blocks ``start .. start+count-1`` of a keyed stream.

    Block ``k`` occupies the stream positions ``[k*words, (k+1)*words)``;
    ``words`` must be a multiple of 4 (one Philox counter step). The result has
    shape ``(count, words)`` and block ``k`` is identical no matter which range
    it was requested in.
    """
    if words % 4:
        raise ValueError("words must be a multiple of 4")
    bitgen = np.random.Philox(key=int(seed) & SEED_MASK)
    if start:
        bitgen.advance(start * (words // 4))
    return bitgen.random_raw(count * words).reshape(count, words)


def unit_interval(raw: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles in [0, 1) using the top 53 bits."""
    return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def uniform(rng: np.random.Generator, lo: float, hi: float, rows: int, cols: int) -> np.ndarray:
    """i.i.d. draws from [lo, hi)."""
    if not lo < hi:
        raise RangeError(f"uniform: need lo < hi, got [{lo}, {hi})")
    out = lo + (hi - lo) * rng.random((rows, cols))
    # lo + (hi-lo)*u can round up to hi
    return np.where(out < hi, out, np.nextafter(hi, lo))


def bernoulli_int(rng: np.random.Generator, size=None):
    """Fair 0/1 integer draw(s)."""
    return rng.integers(0, 2, size=size)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update, applied in place. Returns ``params``."""
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ShapeError(f"adam_step: {k} param {params[k].shape} vs grad {g.shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k in sorted(grads):
        g = grads[k]
        m = state.first_moment.setdefault(k, np.zeros_like(params[k]))
        v = state.second_moment.setdefault(k, np.zeros_like(params[k]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


# ---------------------------------------------------------------------------
# verification


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"grad_check: f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(f: Callable[[np.ndarray], float], analytic_grad, x, h: float = 1e-5) -> float:
    """Max elementwise relative error between ``analytic_grad`` and central differences."""
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if analytic_grad.shape != x.shape:
        raise ShapeError(f"grad_check: grad {analytic_grad.shape} vs x {x.shape}")
    if not np.isfinite(f(x)):
        raise NumericalError("grad_check: f(x) is not finite")
    num = numeric_grad(f, x, h)
    if num.size == 0:
        return 0.0
    return float(relative_error(analytic_grad, num).max())
