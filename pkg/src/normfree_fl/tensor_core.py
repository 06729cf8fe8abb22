"""Dense float64 tensors, splittable random streams and checked primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order. The
functions here add the explicit shape checks the kernels rely on: no implicit
broadcasting beyond a scalar operand, and non-finite results raise instead of
propagating.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidAxis, NonFiniteError, ShapeMismatch

DTYPE = np.float64

_ELEMENTWISE = ("add", "sub", "mul", "scale", "relu", "relu_grad")
_REDUCE = ("sum", "mean", "var_pop", "max")


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``op`` elementwise.

    ``relu`` and ``relu_grad`` are unary; ``scale`` needs a scalar ``b``. The
    binary ops accept equal shapes or one scalar operand.
    """
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    a = as_tensor(a)
    if op == "relu":
        return np.maximum(a, 0.0)
    if op == "relu_grad":
        return (a > 0).astype(DTYPE)
    if b is None:
        raise ShapeMismatch(f"{op} needs a second operand")
    b = as_tensor(b)
    if op == "scale" and b.ndim != 0:
        raise ShapeMismatch("scale expects a scalar factor")
    if a.ndim and b.ndim and a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not match")
    if op == "add":
        out = a + b
    elif op == "sub":
        out = a - b
    else:
        out = a * b
    return check_finite(out, op)


def _normalize_axes(axes: Iterable[int], ndim: int) -> tuple[int, ...]:
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise InvalidAxis(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op: str, a, axes: Iterable[int]) -> np.ndarray:
    """Reduce over ``axes``; reduced axes are removed.

    ``var_pop`` is the population variance (divisor = element count).
    """
    if op not in _REDUCE:
        raise ValueError(f"unknown reduce op {op!r}")
    a = as_tensor(a)
    ax = _normalize_axes(axes, a.ndim)
    if op == "sum":
        out = a.sum(axis=ax)
    elif op == "mean":
        out = a.mean(axis=ax)
    elif op == "max":
        out = a.max(axis=ax)
    else:
        mu = a.mean(axis=ax, keepdims=True)
        out = np.mean((a - mu) ** 2, axis=ax)
    return check_finite(np.asarray(out, dtype=DTYPE), op)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def _stream_key(seed: int, path: Sequence[str]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for label in path:
        h.update(b"\x00")
        h.update(label.encode())
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Counter-based random stream addressed by ``(seed, path)``.

    Child streams come from :meth:`split`, which is a pure function of the
    parent address and the label. Draws are taken from a Philox generator
    keyed by a hash of the address, so two streams with the same address
    yield the same sequence in any process.

    Normals use the Box-Muller transform on 53-bit uniforms built from raw
    64-bit outputs, so they do not depend on numpy's sampler internals.
    """

    __slots__ = ("seed", "path", "_bitgen", "_gen")

    def __init__(self, seed: int, path: Sequence[str] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        self._bitgen = None
        self._gen = None

    def split(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(str(lbl) for lbl in labels))

    @property
    def stream_id(self) -> int:
        return _stream_key(self.seed, self.path) & (2**64 - 1)

    def lineage(self) -> dict:
        return {"seed": self.seed, "path": list(self.path)}

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path) or '.'})"

    def _raw(self, n: int) -> np.ndarray:
        if self._bitgen is None:
            self._bitgen = np.random.Philox(key=_stream_key(self.seed, self.path))
        return self._bitgen.random_raw(n)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws on [0, 1) with 53 random bits each."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self._raw(n) >> np.uint64(11)).astype(DTYPE) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((2, m))
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0]))
        angle = 2.0 * math.pi * u[1]
        z = np.empty(2 * m, dtype=DTYPE)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by scaling uniforms (bias below 2**-40 for small ranges)."""
        span = high - low
        return (low + np.floor(self.uniform(shape) * span)).astype(np.int64)

    def gamma(self, shape_param: np.ndarray) -> np.ndarray:
        # numpy's sampler on this stream's bit generator; used for Dirichlet draws
        if self._gen is None:
            self._raw(0)
            self._gen = np.random.Generator(self._bitgen)
        return self._gen.standard_gamma(shape_param)


def rng_normal(stream: RngStream, shape) -> np.ndarray:
    return stream.normal(shape)


def rng_uniform(stream: RngStream, shape) -> np.ndarray:
    return stream.uniform(shape)


def rng_permutation(stream: RngStream, n: int) -> np.ndarray:
    return stream.permutation(n)
