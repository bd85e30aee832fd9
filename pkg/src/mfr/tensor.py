"""Dense float64 tensors and the numeric primitives the engine builds on.

A tensor is a read-only, C-contiguous ``numpy.ndarray`` of dtype float64.
Every public function here validates its inputs and refuses to produce
non-finite values.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

EPS_NORM = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateEmbeddingError(ArithmeticError):
    """A row vector is too short to be normalized."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def tensor(data, shape=None) -> Tensor:
    """Build an immutable float64 tensor, checking that it is finite."""
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    check_finite(arr, "tensor")
    arr.flags.writeable = False
    return arr


def freeze(arr: np.ndarray) -> Tensor:
    arr = np.array(arr, dtype=np.float64, order="C", copy=None)
    arr.flags.writeable = False
    return arr


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced a non-finite value")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = a @ b
    check_finite(out, "matmul")
    return freeze(out)


def row_norms(x: Tensor) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=1))


def l2_normalize_rows(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {x.shape}")
    norms = row_norms(x)
    bad = np.flatnonzero(norms < eps)
    if bad.size:
        raise DegenerateEmbeddingError(
            f"row {int(bad[0])} has norm {norms[bad[0]]:.3e} < {eps:g}"
        )
    return freeze(x / norms[:, None])


def softmax_cross_entropy(logits: Tensor, label: int) -> float:
    """Return ``-log softmax(logits)[label]`` using max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise DimensionError(f"expected a vector of logits, got shape {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    check_finite(logits, "softmax_cross_entropy input")
    shifted = logits - logits.max()
    lse = np.log(np.sum(np.exp(shifted)))
    return float(lse - shifted[label])
