"""Flat float64 parameter vectors and the elementwise kernels built on them.

Every model, client update, and server-optimizer state in the simulator
is a :class:`ParamVector`: an immutable, finite, one-dimensional float64
array.  Keeping a single flat representation makes the update rules
(momentum, preconditioning, control variates) pure array arithmetic and
makes bit-for-bit reproducibility checks trivial.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when a vector operation would produce or store NaN/Inf."""


class ParamVector:
    """Immutable flat vector of float64 values.

    The wrapped array is validated as finite at construction and marked
    read-only, so any ParamVector in circulation is safe to share across
    threads and reuse without defensive copies.
    """

    __slots__ = ("values",)

    def __init__(self, values: Iterable[float] | np.ndarray) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"expected a flat vector, got array of shape {arr.shape}")
        arr = arr.copy()
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("vector contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, length: int) -> "ParamVector":
        if length < 1:
            raise ValueError(f"vector length must be >= 1, got {length}")
        return cls(np.zeros(length, dtype=np.float64))

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ParamVector(len={len(self)})"

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    def allclose(self, other: "ParamVector", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return bool(np.allclose(self.values, other.values, atol=atol, rtol=rtol))

    def same_bits(self, other: "ParamVector") -> bool:
        """True when both vectors are byte-identical (the strictest equality)."""
        return self.values.tobytes() == other.values.tobytes()


def _check_same_length(a: ParamVector, b: ParamVector) -> None:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")


def add_scaled(a: ParamVector, b: ParamVector, s: float) -> ParamVector:
    """Return ``a + s * b`` elementwise."""
    _check_same_length(a, b)
    s = float(s)
    if not np.isfinite(s):
        raise ValueError(f"scale must be finite, got {s}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.values + s * b.values
    return ParamVector(out)


_UNARY_OPS = ("sqrt_a", "sign_a")
_BINARY_OPS = ("mul", "div_eps")


def elementwise(
    a: ParamVector,
    b: ParamVector | None = None,
    *,
    op: str,
    eps: float | None = None,
) -> ParamVector:
    """Apply an elementwise kernel.

    op:
      - ``mul``:     a * b
      - ``div_eps``: a / (sqrt(b) + eps), the adaptive-preconditioner quotient
      - ``sqrt_a``:  sqrt(a)            (b ignored)
      - ``sign_a``:  sign(a), sign(0)=0 (b ignored)
    """
    if op in _BINARY_OPS:
        if b is None:
            raise ValueError(f"op {op!r} needs two vectors")
        _check_same_length(a, b)
    elif op not in _UNARY_OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {_BINARY_OPS + _UNARY_OPS}")

    # Inputs are finite by construction; NaN/Inf can only appear here via
    # sqrt of a negative or overflow, and the ParamVector constructor turns
    # that into NonFiniteError, so suppress the redundant numpy warnings.
    with np.errstate(invalid="ignore", over="ignore"):
        if op == "mul":
            out = a.values * b.values
        elif op == "div_eps":
            if eps is None or not (eps > 0):
                raise ValueError(f"op 'div_eps' needs eps > 0, got {eps!r}")
            out = a.values / (np.sqrt(b.values) + eps)
        elif op == "sqrt_a":
            out = np.sqrt(a.values)
        else:  # sign_a
            out = np.sign(a.values)
    return ParamVector(out)


def l2_norm_sq(a: ParamVector) -> float:
    """Squared Euclidean norm, accumulated in float64."""
    out = float(np.dot(a.values, a.values))
    if not np.isfinite(out):
        raise NonFiniteError("squared norm overflowed to non-finite")
    return out
