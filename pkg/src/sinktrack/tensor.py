"""Dense float32 tensor math used by the runtime.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in C order.
Matrix products go through a compiled kernel that accumulates strictly
left to right over the inner dimension, so results are bit-reproducible
and agree exactly with a naive triple loop.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import DimensionError, EmptyInputError, NonFiniteError

DTYPE = np.float32

_GELU_C = np.float32(math.sqrt(2.0 / math.pi))
_GELU_K = np.float32(0.044715)


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    check_finite(arr, name)
    return arr


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


@numba.njit(cache=True)
def _bmm_kernel(a, b):
    batch, m, k = a.shape
    n = b.shape[2]
    out = np.zeros((batch, m, n), dtype=np.float32)
    for z in range(batch):
        for i in range(m):
            # i-p-j order: each out[z, i, j] still sums p = 0..k-1 in order.
            for p in range(k):
                x = a[z, i, p]
                for j in range(n):
                    out[z, i, j] += x * b[z, p, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` for 2-D operands or stacks of them (3-D).

    Accumulation over the shared dimension is sequential, so every output
    element is the float32 sum ``((a0*b0 + a1*b1) + a2*b2) + ...``.
    """
    a = np.ascontiguousarray(a, dtype=DTYPE)
    b = np.ascontiguousarray(b, dtype=DTYPE)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul needs two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 2:
        out = _bmm_kernel(a[None], b[None])[0]
    else:
        out = _bmm_kernel(a, b)
    return check_finite(out, "matmul result")


def softmax(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis with max-subtraction.

    ``mask`` marks allowed entries; masked entries come out exactly 0.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] == 0:
        raise EmptyInputError("softmax over an empty axis")
    if mask is not None:
        x = np.where(mask, x, DTYPE(-np.inf))
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_row(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 1:
        raise DimensionError(f"softmax_row expects a vector, got shape {x.shape}")
    if x.size == 0:
        raise EmptyInputError("softmax_row of an empty vector")
    check_finite(x, "softmax input")
    return softmax(x)


def layernorm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """LayerNorm over the last axis, population variance."""
    x = np.asarray(x, dtype=DTYPE)
    gain = np.asarray(gain, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layernorm length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    if not eps > 0:
        raise ValueError("eps must be positive")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    out = centered / np.sqrt(var + DTYPE(eps)) * gain + bias
    return check_finite(out, "layernorm result")


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    x = np.asarray(x, dtype=DTYPE)
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(_GELU_C * (x + _GELU_K * x * x * x)))


def mean_pool_rows(x) -> np.ndarray:
    """Column-wise mean of an ``m x d`` matrix (float64 accumulation)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise DimensionError(f"mean_pool_rows expects a matrix, got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInputError("cannot pool an empty set of rows")
    out = (x.astype(np.float64).sum(axis=0) / x.shape[0]).astype(DTYPE)
    return check_finite(out, "pooled vector")


def l1_norm(x) -> float:
    """Sum of absolute values, correctly rounded to float64."""
    x = np.asarray(x, dtype=DTYPE)
    return math.fsum(np.abs(x.astype(np.float64)).ravel().tolist())
