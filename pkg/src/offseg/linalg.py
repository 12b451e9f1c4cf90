"""Dense real linear algebra and the normalizations the head is built from.

Matrices are plain 2-D ``numpy.ndarray`` values in row-major order. Two
precisions are used throughout the package: ``WIDE`` (float64) for analysis
paths such as prototype mining and gradient checks, and ``NARROW`` (float32)
for training. All operations here are pure functions over their inputs and
never return NaN or Inf: non-finite results raise instead of propagating.
"""

from __future__ import annotations

import numpy as np

WIDE = np.float64
NARROW = np.float32


class NonFiniteError(FloatingPointError):
    """A public operation produced or received a NaN/Inf entry."""


def require_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate that `a` is a finite 2-D float array and return it."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.floating):
        raise ValueError(f"{name} must be a float array, got dtype {a.dtype}")
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite entries")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product A@B with explicit shape checking.

    Raises ValueError reporting both shapes on an inner-dimension mismatch.
    The result dtype follows numpy promotion of the operands.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _check_finite(a @ b, "matmul")


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Each output row sums to 1 (within 1e-12 at float64); entries lie in
    (0, 1]. Invariant under adding a per-row constant to the input.
    """
    a = require_matrix(a, "softmax input")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return _check_finite(out, "softmax_rows")


def softmax_cols(a: np.ndarray) -> np.ndarray:
    """Column-wise softmax, defined as transpose . softmax_rows . transpose."""
    return softmax_rows(np.ascontiguousarray(a.T)).T


def pinv(a: np.ndarray, rtol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values sigma_i <= rtol * sigma_max are treated as zero. The
    default rtol is max(m, n) * eps for the input dtype, the standard SVD
    cutoff. SVD non-convergence surfaces as numpy.linalg.LinAlgError rather
    than silently returning garbage.
    """
    a = require_matrix(a, "pinv input")
    m, n = a.shape
    if rtol is None:
        rtol = max(m, n) * float(np.finfo(a.dtype).eps)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size and s[0] > 0:
        keep = s > rtol * s[0]
    else:
        keep = np.zeros_like(s, dtype=bool)
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return _check_finite((vt.T * inv_s) @ u.T, "pinv")


def cosine_similarity_matrix(v: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of the rows of `v`.

    S[i][j] = <v_i, v_j> / (|v_i| |v_j|). Symmetric, unit diagonal (within
    roundoff), entries in [-1, 1] up to 1e-12. Zero-norm rows are rejected
    with the offending row index in the message.
    """
    v = require_matrix(v, "similarity input")
    norms = np.linalg.norm(v, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm row(s) at indices {zero.tolist()}")
    unit = v / norms[:, None]
    return _check_finite(unit @ unit.T, "cosine_similarity_matrix")
