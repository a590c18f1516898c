"""Activation / regularizer pairs, stable reductions, RNG streams and the
small dense kernels shared by the inference loops."""

from __future__ import annotations

import enum
import struct

import numba
import numpy as np
from scipy.special import expit, logit, xlogy


class ActivationKind(enum.IntEnum):
    SIGMOID = 0
    RELU = 1

    @classmethod
    def parse(cls, value) -> "ActivationKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown activation kind {value!r}; use sigmoid or relu") from None

    @property
    def domain_min(self) -> float:
        return 0.0


class DomainError(ValueError):
    def __init__(self, index, value, kind):
        self.index = index
        super().__init__(f"eta: value {value!r} at index {index} outside {kind.name.lower()} domain")


def sigma(z, kind=ActivationKind.SIGMOID):
    kind = ActivationKind.parse(kind)
    z = np.asarray(z)
    if kind is ActivationKind.SIGMOID:
        return expit(z)
    return np.maximum(z, 0)


def sigma_inv(h, kind=ActivationKind.SIGMOID):
    """Inverse of ``sigma`` on its invertible region (h > 0 for relu)."""
    kind = ActivationKind.parse(kind)
    h = np.asarray(h)
    if kind is ActivationKind.SIGMOID:
        return logit(h)
    return h.copy()


def sigma_grad_from_output(h, kind=ActivationKind.SIGMOID):
    """d sigma / dz written in terms of the output h = sigma(z)."""
    kind = ActivationKind.parse(kind)
    h = np.asarray(h)
    if kind is ActivationKind.SIGMOID:
        return h * (1 - h)
    return (h > 0).astype(h.dtype)


def eta(h, kind=ActivationKind.SIGMOID):
    """State regularizer whose derivative is ``sigma_inv`` (integration constant 0).

    sigmoid: h ln h + (1-h) ln(1-h) on [0, 1]; relu: h^2 / 2 on [0, inf).
    """
    kind = ActivationKind.parse(kind)
    h = np.asarray(h, dtype=np.float64)
    flat = h.ravel()
    if kind is ActivationKind.SIGMOID:
        bad = ~((flat >= 0) & (flat <= 1))
    else:
        bad = ~(flat >= 0)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(np.unravel_index(i, h.shape) if h.ndim > 1 else i, flat[i], kind)
    if kind is ActivationKind.SIGMOID:
        return xlogy(h, h) + xlogy(1 - h, 1 - h)
    return 0.5 * h * h


def logsumexp(v, axis=None):
    v = np.asarray(v)
    if v.dtype.kind != "f":
        v = v.astype(np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if axis is None:
        return out.reshape(()).item()
    return np.squeeze(out, axis=axis)


# --- RNG ------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class RngStream:
    """Counter-based (Philox 4x64) stream keyed by a 64-bit seed.

    ``split(i)`` returns an independent child stream with key ``(seed, i+1)``;
    the parent keeps key ``(seed, 0)``.
    """

    STATE_BYTES = 8 + 8 + 32 + 32 + 4 + 1 + 4

    def __init__(self, seed: int, lane: int = 0):
        self.seed = int(seed) & _MASK64
        self.lane = int(lane) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.lane], dtype=np.uint64))
        self.gen = np.random.Generator(self._bitgen)

    def split(self, index: int) -> "RngStream":
        return RngStream(self.seed, index + 1)

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def get_state(self) -> bytes:
        st = self._bitgen.state
        return struct.pack(
            "<QQ4Q4QIBI",
            self.seed,
            self.lane,
            *[int(c) for c in st["state"]["counter"]],
            *[int(b) for b in st["buffer"]],
            int(st["buffer_pos"]),
            int(st["has_uint32"]),
            int(st["uinteger"]),
        )

    @classmethod
    def from_state(cls, blob: bytes) -> "RngStream":
        vals = struct.unpack("<QQ4Q4QIBI", blob)
        seed, lane = vals[0], vals[1]
        rng = cls(seed, lane)
        st = rng._bitgen.state
        st["state"]["counter"] = np.array(vals[2:6], dtype=np.uint64)
        st["buffer"] = np.array(vals[6:10], dtype=np.uint64)
        st["buffer_pos"] = vals[10]
        st["has_uint32"] = vals[11]
        st["uinteger"] = vals[12]
        rng._bitgen.state = st
        return rng


# --- dense primitives --------------------------------------------------------
# Explicit loops so the accumulation order is fixed regardless of BLAS.


@numba.njit(cache=True, nogil=True)
def _matvec(A, x, out):
    m, n = A.shape
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += A[i, j] * x[j]
        out[i] = acc
    return out


@numba.njit(cache=True, nogil=True)
def _vecmat(x, A, out):
    m, n = A.shape
    for j in range(n):
        out[j] = 0.0
    for i in range(m):
        xi = x[i]
        for j in range(n):
            out[j] += xi * A[i, j]
    return out


@numba.njit(cache=True, nogil=True)
def _outer_acc(out, a, b):
    for i in range(a.shape[0]):
        ai = a[i]
        for j in range(b.shape[0]):
            out[i, j] += ai * b[j]


def matvec(A, x):
    A = np.ascontiguousarray(A)
    x = np.ascontiguousarray(x, dtype=A.dtype)
    if A.ndim != 2 or x.ndim != 1 or A.shape[1] != x.shape[0]:
        raise ValueError(f"matvec shape mismatch: {A.shape} x {x.shape}")
    return _matvec(A, x, np.empty(A.shape[0], dtype=A.dtype))


def outer(a, b):
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b, dtype=a.dtype)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("outer expects two vectors")
    out = np.zeros((a.shape[0], b.shape[0]), dtype=a.dtype)
    _outer_acc(out, a, b)
    return out


def axpy(alpha, x, y):
    """Return alpha * x + y."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y
