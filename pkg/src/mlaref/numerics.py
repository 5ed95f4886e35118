"""Dense numeric kernels shared by every attention formulation.

All functions are pure, operate on numpy arrays, and preserve the input
dtype (float32 for engine runs, float64 for oracle-grade checks). Reductions
use numpy's fixed evaluation order, so results are reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ROPE_BASE = 10000.0


@dataclass(frozen=True)
class SoftmaxRow:
    """One softmax-normalised score row plus its log-sum-exp.

    Attributes:
        probs: probabilities, same shape and dtype as the input scores.
        lse: log(sum(exp(scores))) as a Python float. Carrying the lse next
            to the probabilities is what lets partial attention results over
            disjoint key ranges be merged exactly later.
    """

    probs: np.ndarray
    lse: float


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-d arrays with an explicit shape check.

    Raises:
        ValueError: if either operand is not 2-d or the inner dims disagree.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    return a @ b


def softmax_lse(scores: np.ndarray) -> SoftmaxRow:
    """Max-stabilised softmax of a 1-d score vector.

    Entries may be -inf (masked out); at least one entry must be finite.
    Masked entries receive exactly zero probability because
    exp(-inf - lse) == 0 in IEEE arithmetic.

    Raises:
        ValueError: on an empty vector, a vector with no finite entry, or
            any nan/+inf entry.
    """
    s = np.asarray(scores)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("softmax_lse expects a non-empty 1-d score vector")
    if np.any(np.isnan(s)) or np.any(np.isposinf(s)):
        raise ValueError("softmax_lse scores must not contain nan or +inf")
    m = float(np.max(s))
    if m == -np.inf:
        raise ValueError("softmax_lse needs at least one finite score")
    total = float(np.sum(np.exp(s - s.dtype.type(m))))
    lse = m + float(np.log(s.dtype.type(total)))
    probs = np.exp(s - s.dtype.type(lse))
    return SoftmaxRow(probs=probs, lse=lse)


def softmax_lse_rows(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax_lse for a [rows, cols] score matrix.

    Rows may contain -inf entries but each row needs one finite score.
    Returns (probs [rows, cols], lse [rows]).
    """
    s = np.asarray(scores)
    if s.ndim != 2 or s.shape[1] == 0:
        raise ValueError("softmax_lse_rows expects a non-empty 2-d score matrix")
    m = np.max(s, axis=1, keepdims=True)
    if np.any(m == -np.inf):
        raise ValueError("softmax_lse_rows: a row has no finite score")
    total = np.sum(np.exp(s - m), axis=1, keepdims=True)
    lse = m + np.log(total)
    probs = np.exp(s - lse)
    return probs, lse.reshape(-1)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Root-mean-square normalisation along the last axis.

    y = x * gain / sqrt(mean(x**2) + eps). No mean subtraction.
    """
    x = np.asarray(x)
    gain = np.asarray(gain)
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ValueError(f"rmsnorm gain shape {gain.shape} does not match input {x.shape}")
    if eps < 0:
        raise ValueError("rmsnorm eps must be >= 0")
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x * gain / np.sqrt(ms + eps)


def rope(x: np.ndarray, position: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Rotary position embedding along the last axis.

    Consecutive pairs (x[2j], x[2j+1]) are rotated by position * base**(-2j/d)
    where d is the last-axis length. Applying it to both queries and keys makes
    their dot product depend only on the position difference.

    Raises:
        ValueError: if the last axis is odd or base is not positive.
    """
    x = np.asarray(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"rope needs an even last axis, got {d}")
    if base <= 0:
        raise ValueError("rope base must be positive")
    j = np.arange(d // 2, dtype=np.float64)
    angles = float(position) * base ** (-2.0 * j / d)
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out
