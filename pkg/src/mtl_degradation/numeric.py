"""Dense float64 primitives: LSTM cell, Adam, L1/L2 penalty, finite differences.

Everything here operates on plain numpy arrays. ``Matrix2D`` in the data model
is simply a 2-D ``float64`` array in C order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

GATES = ("input", "forget", "candidate", "output")


class NumericError(ValueError):
    """Raised on malformed operands or non-finite values."""


class DimensionError(NumericError):
    def __init__(self, operand: str, expected, got):
        super().__init__(f"dimension mismatch for {operand!r}: expected {expected}, got {got}")
        self.operand = operand
        self.expected = expected
        self.got = got


class StaleCacheError(NumericError):
    pass


# ---------------------------------------------------------------------------
# RNG

def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """PCG64 generator; ``stream`` derives an independent child for a subsystem.

    Child seeds are keyed by the CRC32 of the stream name so the mapping is
    stable across platforms and Python hash randomisation.
    """
    if seed < 0:
        raise NumericError("seed must be non-negative")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    if stream is not None:
        entropy.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# activations

def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free for any finite input
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# LSTM cell

@dataclass
class LstmCellParams:
    """Weights of one LSTM cell, gates stacked in (input, forget, candidate, output) order."""

    wx: np.ndarray  # (4h, d)
    wh: np.ndarray  # (4h, h)
    b: np.ndarray  # (4h,)

    def __post_init__(self):
        self.wx = np.asarray(self.wx, dtype=np.float64)
        self.wh = np.asarray(self.wh, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        h = self.hidden_size
        if self.wh.shape != (4 * h, h):
            raise DimensionError("wh", (4 * h, h), self.wh.shape)
        if self.wx.ndim != 2 or self.wx.shape[0] != 4 * h:
            raise DimensionError("wx", (4 * h, "d"), self.wx.shape)
        if self.b.shape != (4 * h,):
            raise DimensionError("b", (4 * h,), self.b.shape)

    @property
    def hidden_size(self) -> int:
        return self.wh.shape[1]

    @property
    def input_size(self) -> int:
        return self.wx.shape[1]

    @classmethod
    def initialize(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "LstmCellParams":
        h, d = hidden_size, input_size
        wx = glorot_uniform(rng, (4 * h, d), d, 4 * h)
        wh = glorot_uniform(rng, (4 * h, h), h, 4 * h)
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        return cls(wx, wh, b)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmCellParams":
        h = hidden_size
        return cls(np.zeros((4 * h, input_size)), np.zeros((4 * h, h)), np.zeros(4 * h))

    def fingerprint(self) -> int:
        crc = 0
        for a in (self.wx, self.wh, self.b):
            crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
        return crc


@dataclass
class LstmCellGrads:
    wx: np.ndarray
    wh: np.ndarray
    b: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.wx.ravel(), self.wh.ravel(), self.b.ravel()])


@dataclass
class LstmCellCache:
    params: LstmCellParams
    fingerprint: int
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def _check_vec(name: str, v, size: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (size,):
        raise DimensionError(name, size, v.shape)
    return v


def lstm_cell_forward(x_t, h_prev, c_prev, params: LstmCellParams):
    """One LSTM step. Accepts vectors or row-batches ``(B, d)``.

    Returns ``(h_t, c_t, cache)``.
    """
    h = params.hidden_size
    x_t = _check_vec("x_t", x_t, params.input_size)
    h_prev = _check_vec("h_prev", h_prev, h)
    c_prev = _check_vec("c_prev", c_prev, h)
    z = x_t @ params.wx.T + h_prev @ params.wh.T + params.b
    i = sigmoid(z[..., :h])
    f = sigmoid(z[..., h:2 * h])
    g = np.tanh(z[..., 2 * h:3 * h])
    o = sigmoid(z[..., 3 * h:])
    c_t = f * c_prev + i * g
    tanh_c = np.tanh(c_t)
    h_t = o * tanh_c
    cache = LstmCellCache(params, params.fingerprint(), x_t, h_prev, c_prev, i, f, g, o, tanh_c)
    return h_t, c_t, cache


def lstm_cell_backward(cache: LstmCellCache, grad_h, grad_c):
    """Exact gradients of one step given upstream ``dL/dh_t`` and ``dL/dc_t``.

    Returns ``(grad_x, grad_h_prev, grad_c_prev, LstmCellGrads)``; batched
    caches sum parameter gradients over rows.
    """
    if not isinstance(cache, LstmCellCache):
        raise StaleCacheError(f"not an LSTM cell cache: {type(cache).__name__}")
    if cache.params.fingerprint() != cache.fingerprint:
        raise StaleCacheError("parameters changed since the forward pass")
    p = cache.params
    h = p.hidden_size
    grad_h = _check_vec("grad_h", grad_h, h)
    grad_c = _check_vec("grad_c", grad_c, h)
    i, f, g, o, tanh_c = cache.i, cache.f, cache.g, cache.o, cache.tanh_c
    dc = grad_c + grad_h * o * (1.0 - tanh_c ** 2)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * cache.c_prev * f * (1.0 - f),
        dc * i * (1.0 - g ** 2),
        grad_h * tanh_c * o * (1.0 - o),
    ], axis=-1)
    dz2 = np.atleast_2d(dz)
    grads = LstmCellGrads(
        wx=dz2.T @ np.atleast_2d(cache.x),
        wh=dz2.T @ np.atleast_2d(cache.h_prev),
        b=dz2.sum(axis=0),
    )
    return dz @ p.wx, dz @ p.wh, dc * f, grads


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0, lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update. Returns new arrays; inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise DimensionError("grads", params.shape, grads.shape)
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise DimensionError("state", params.shape, state.m.shape)
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# L1/L2 penalty

@dataclass(frozen=True)
class RegularizationSpec:
    lambda1: float = 1e-5
    lambda2: float = 1e-4

    def __post_init__(self):
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise NumericError("regularization weights must be >= 0")


def regularization(params: np.ndarray, spec: RegularizationSpec) -> tuple[float, np.ndarray]:
    """``lambda1*sum|w| + lambda2*sum w^2`` and its (sub)gradient, sign(0) = 0."""
    w = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite parameters")
    penalty = spec.lambda1 * float(np.abs(w).sum()) + spec.lambda2 * float((w * w).sum())
    grad = spec.lambda1 * np.sign(w) + 2.0 * spec.lambda2 * w
    return penalty, grad


# ---------------------------------------------------------------------------
# finite differences

def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                               step: float = 1e-6, indices=None) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``indices`` restricts probing to a subset; other coordinates are left zero.
    """
    if not step > 0:
        raise NumericError("step must be positive")
    p = np.array(params, dtype=np.float64)
    out = np.zeros_like(p)
    flat = p.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for k in idx:
        orig = flat[k]
        flat[k] = orig + step
        up = float(loss_fn(p))
        flat[k] = orig - step
        down = float(loss_fn(p))
        flat[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss when probing coordinate {k}")
        out.reshape(-1)[k] = (up - down) / (2.0 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
