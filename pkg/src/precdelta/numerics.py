"""Small dense kernels shared by the recurrence code.

Arrays follow the row-stacking convention: a sequence of vectors x_t is a
matrix whose rows are x_t. Every routine accepts optional leading batch axes.
"""
import numpy as np

DTYPE = np.float64


_FLOATS = (np.float32, np.float64, np.longdouble)


def as_real(a):
    """Float array keeping float32 / float64 / long double; anything else -> float64."""
    a = np.asarray(a)
    return a if a.dtype.type in _FLOATS else a.astype(DTYPE)


def work_dtype(*arrays):
    """Common float dtype of the arrays; bare Python numbers do not promote."""
    arrs = [as_real(a) for a in arrays if a is not None and not isinstance(a, (int, float))]
    return np.result_type(*arrs) if arrs else np.dtype(DTYPE)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def solve_unit_lower_triangular(L, B):
    """Solve L X = B by forward substitution, L unit lower triangular.

    Only the strict lower triangle of L is read; the diagonal is taken as 1.
    Works on stacks: L (..., C, C), B (..., C, m).
    """
    L = np.asarray(L, dtype=DTYPE)
    B = np.asarray(B, dtype=DTYPE)
    if L.ndim < 2 or L.shape[-1] != L.shape[-2]:
        raise ValueError(f"L must be square, got {L.shape}")
    if B.ndim < 2 or B.shape[-2] != L.shape[-1]:
        raise ValueError(f"shape mismatch: L {L.shape}, B {B.shape}")
    _check_finite(L, B)
    C = L.shape[-1]
    X = np.array(np.broadcast_to(B, np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:]))
    for i in range(1, C):
        X[..., i, :] -= np.einsum("...j,...jm->...m", L[..., i, :i], X[..., :i, :])
    return X


def prefix_products(values, mode="inclusive", axis=0):
    """Cumulative products along `axis`; exclusive mode starts from 1."""
    v = np.asarray(values, dtype=DTYPE)
    if np.any(v <= 0):
        raise ValueError("prefix_products needs strictly positive entries")
    inc = np.cumprod(v, axis=axis)
    if mode == "inclusive":
        return inc
    if mode != "exclusive":
        raise ValueError(f"unknown mode {mode!r}")
    ones = np.ones_like(np.take(v, [0], axis=axis))
    return np.concatenate([ones, np.delete(inc, -1, axis=axis)], axis=axis) if v.shape[axis] else inc


def log_cumsum(values, axis=0):
    """Inclusive cumulative sum of logs; the log-space twin of prefix_products."""
    v = np.asarray(values, dtype=DTYPE)
    if np.any(v <= 0):
        raise ValueError("log_cumsum needs strictly positive entries")
    return np.cumsum(np.log(v), axis=axis)


def causal_mask(C, strict=False):
    return np.tril(np.ones((C, C), dtype=DTYPE), -1 if strict else 0)


def decay_ratio(g, strict=False, per_channel=False):
    """Lower-triangular decay ratios built from cumulative logs.

    Entry (a, b) is exp(g[a] - g[b]) when a >= b (a > b if strict), else 0.
    With per_channel, g is (..., C, d) and the ratios are (..., C, C, d).
    """
    g = np.asarray(g, dtype=DTYPE)
    if per_channel:
        C = g.shape[-2]
        diff = g[..., :, None, :] - g[..., None, :, :]
        mask = causal_mask(C, strict)[..., None].astype(bool)
    else:
        C = g.shape[-1]
        diff = g[..., :, None] - g[..., None, :]
        mask = causal_mask(C, strict).astype(bool)
    # zero the upper part before exp so positive differences never overflow
    return np.where(mask, np.exp(np.where(mask, diff, 0.0)), 0.0)


def l2_normalize(X, eps=0.0):
    n = np.linalg.norm(X, axis=-1, keepdims=True)
    return X / np.maximum(n, eps) if eps else X / n
