"""Dense float64 kernels shared by every other module.

All functions are pure and rely on numpy's deterministic reductions, so
repeated calls on identical inputs are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, DomainError, EmptyInput, NearZeroNorm

# Norms at or below this are treated as zero and rejected.
NORM_FLOOR = 1e-12


def _as_f64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInput(f"{name} is empty")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Return v / ||v||_2 for a 1-D vector."""
    arr = _as_f64(v, "vector")
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    norm = float(np.sqrt(np.dot(arr, arr)))
    if norm <= NORM_FLOOR:
        raise NearZeroNorm(f"vector norm {norm:.3e} is below {NORM_FLOOR:.0e}")
    return arr / norm


def normalize_rows(m, name: str = "matrix") -> np.ndarray:
    """Return a copy of a 2-D matrix with each row scaled to unit L2 norm."""
    arr = _as_f64(m, name)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name}: expected 2-D, got shape {arr.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", arr, arr))
    bad = np.where(norms <= NORM_FLOOR)[0]
    if bad.size:
        raise NearZeroNorm(f"{name}: row {int(bad[0])} has norm {norms[bad[0]]:.3e}")
    return arr / norms[:, None]


def cosine_sim_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between rows of a and rows of b."""
    a_arr = _as_f64(a, "first matrix")
    b_arr = _as_f64(b, "second matrix")
    if a_arr.ndim != 2 or b_arr.ndim != 2:
        raise DimensionMismatch(
            f"expected 2-D matrices, got shapes {a_arr.shape} and {b_arr.shape}"
        )
    if a_arr.shape[1] != b_arr.shape[1]:
        raise DimensionMismatch(
            f"feature dims differ: {a_arr.shape[1]} vs {b_arr.shape[1]}"
        )
    return normalize_rows(a_arr, "first matrix") @ normalize_rows(b_arr, "second matrix").T


def row_softmax(m) -> np.ndarray:
    """Softmax of each row, shifted by the row max for stability."""
    arr = _as_f64(m, "matrix")
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("row_softmax requires finite entries")
    shifted = arr - arr.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def logsumexp(xs) -> float:
    """log(sum(exp(xs))) of a 1-D vector, shifted by the max for stability."""
    arr = _as_f64(xs, "input")
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("logsumexp requires finite entries")
    m = float(arr.max())
    return m + float(np.log(np.sum(np.exp(arr - m))))


def generalized_kl(u, v) -> float:
    """Generalized KL divergence sum(u*log(u/v) - u + v) for nonnegative u, positive v.

    Terms with u_i = 0 contribute v_i (the u*log(u) limit is 0).
    """
    u_arr = _as_f64(u, "u")
    v_arr = _as_f64(v, "v")
    if u_arr.shape != v_arr.shape or u_arr.ndim != 1:
        raise DimensionMismatch(f"shapes differ: {u_arr.shape} vs {v_arr.shape}")
    if np.any(u_arr < 0):
        raise DomainError("u must be nonnegative")
    if np.any(v_arr <= 0):
        raise DomainError("v must be strictly positive")
    total = float(np.sum(v_arr - u_arr))
    mask = u_arr > 0
    if np.any(mask):
        um = u_arr[mask]
        total += float(np.sum(um * np.log(um / v_arr[mask])))
    return total
