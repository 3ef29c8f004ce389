"""Small dense-matrix helpers shared by the attention kernels and the simulator.

Matrices are plain C-contiguous numpy arrays of shape (rows, cols).  Two
precisions are supported: float64 is the oracle precision used by every
reference path, float32 is the production-path precision used to surface
numerical-stability issues (softmax without max subtraction, large score
offsets, and so on).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ZERO_NORM_EPS",
    "ShapeError",
    "as_matrix",
    "matmul",
    "softmax_rows",
    "cosine_similarity",
]

# Vector norms below this are treated as zero when normalizing; cosine
# similarity against such a vector is defined as 0.
ZERO_NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


def as_matrix(data, dtype=np.float64) -> np.ndarray:
    """Validate ``data`` as a 2-D matrix and return it C-contiguous in ``dtype``."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with explicit shape checking."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner dimensions differ: ({a.shape[0]}x{a.shape[1]}) @ "
            f"({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Subtracting the row maximum before exponentiating keeps every exponent
    non-positive, so the result is shift-invariant and never overflows even
    for scores far outside the exp() range.
    """
    if scores.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D matrix")
    if scores.shape[1] == 0:
        raise ShapeError("softmax_rows needs at least one column")
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors, 0.0 if either is near zero."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError("cosine_similarity expects 1-D vectors")
    if u.shape[0] != v.shape[0]:
        raise ShapeError(f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < ZERO_NORM_EPS or nv < ZERO_NORM_EPS:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))
