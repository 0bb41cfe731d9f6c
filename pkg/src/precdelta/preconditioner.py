"""Preconditioner state machines.

Exact inverse Gram via Sherman-Morrison, the diagonal Gram accumulator, the
bounded squash map, and the chunk-level scan of the diagonal accumulator.
Vectors may carry leading batch axes; gates broadcast against them.
"""
import math
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, as_real, decay_ratio

LOG_FLOOR = 1e-12
DEFAULT_X = 1.5
DEFAULT_RIDGE = 1e-4


@dataclass(frozen=True)
class ExactGramState:
    P: np.ndarray

    @classmethod
    def initial(cls, d, lam, batch=(), dtype=DTYPE):
        if lam <= 0:
            raise ValueError("exact preconditioning needs lambda > 0")
        P = np.broadcast_to(np.eye(d, dtype=dtype) / lam, tuple(batch) + (d, d)).copy()
        return cls(P)


@dataclass(frozen=True)
class DiagGramState:
    A: np.ndarray

    @classmethod
    def initial(cls, d, batch=(), dtype=DTYPE):
        return cls(np.zeros(tuple(batch) + (d,), dtype=dtype))


@dataclass(frozen=True)
class SquashParams:
    mu: float = 1.0
    x: float = DEFAULT_X

    def __post_init__(self):
        if self.x < 1:
            raise ValueError(f"squash bound x must be >= 1, got {self.x}")
        if np.any(np.asarray(self.mu) <= 0):
            raise ValueError("mu must be positive")


def _mv(M, v):
    return np.matmul(M, v[..., None])[..., 0]


def exact_update_and_write_key(state, k):
    """One Sherman-Morrison step.

    The write key uses the pre-update inverse, k_w = P k / (1 + k'P k); the
    returned state holds the post-update inverse (use exact_query for P_t q).
    """
    P = state.P
    Pk = _mv(P, k)
    denom = 1.0 + np.sum(k * Pk, axis=-1)
    k_write = Pk / denom[..., None]
    P_new = P - k_write[..., :, None] * Pk[..., None, :]
    if not np.all(np.isfinite(P_new)):
        raise FloatingPointError("non-finite inverse Gram; lambda too small?")
    return ExactGramState(P_new), k_write


def exact_query(state, q):
    return _mv(state.P, q)


def diag_update(state, k, alpha_p=1.0, beta_p=1.0):
    A = np.asarray(state.A)
    if A.shape[-1] != np.shape(k)[-1]:
        raise ValueError(f"dimension mismatch: A {A.shape}, k {np.shape(k)}")
    a = as_real(alpha_p)[..., None]
    b = as_real(beta_p)[..., None]
    return DiagGramState(a * A + b * k * k)


def squash_parts(A, mu, x):
    """Return (r, s, B) for the bounded map B = x ** (-r / (1 + |r|))."""
    mu = as_real(mu)[..., None]
    r = np.log(np.maximum(A, LOG_FLOOR)) - mu
    s = r / (1.0 + np.abs(r))
    B = np.exp(-math.log(x) * s)
    return r, s, B


def squash(A, params):
    A = np.asarray(A, dtype=DTYPE)
    if np.any(A <= 0):
        raise ValueError("squash needs strictly positive A")
    return squash_parts(A, params.mu, params.x)[2]


def raw_write_key(A_prev, k, ridge):
    """Diagonal analogue of the normalized write key, built on A_{t-1}."""
    inv = 1.0 / (A_prev + ridge)
    num = inv * k
    return num / (1.0 + np.sum(num * k, axis=-1))[..., None]


def raw_query(A, q, ridge):
    return q / (A + ridge)


def within_chunk_moments(keys, boundary, alpha_p, beta_p):
    """Inclusive accumulator rows A_r for a chunk, plus the end-of-chunk state.

    Uses the decayed causal mask: A_r = c_r A_0 + sum_{t<=r} (c_r/c_t) bP_t k_t^2
    with c the cumulative product of alpha_p computed in log space.
    """
    keys = np.asarray(keys, dtype=DTYPE)
    C = keys.shape[-2]
    alpha_p = np.broadcast_to(np.asarray(alpha_p, dtype=DTYPE), keys.shape[:-1])
    beta_p = np.broadcast_to(np.asarray(beta_p, dtype=DTYPE), keys.shape[:-1])
    g = np.cumsum(np.log(alpha_p), axis=-1)
    M = decay_ratio(g)
    A_rows = np.exp(g)[..., None] * boundary[..., None, :] + M @ (beta_p[..., None] * keys * keys)
    end = A_rows[..., C - 1, :] if C else boundary
    return A_rows, end


def chunk_precond_scan(keys, boundary, alpha_p=1.0, beta_p=1.0, mode="atk_stable",
                       params=SquashParams(), lam=DEFAULT_RIDGE, targets=None):
    """Transform a chunk of rows with the diagonal preconditioner.

    atq          rows / (A_r + lam)                 (inclusive moments)
    atk_unstable normalized write keys on A_{r-1}   (strictly causal moments)
    atk_stable   B(A_r) * rows                      (inclusive moments, no ridge)

    `targets` defaults to `keys`; pass queries for the query-side transforms.
    Returns (transformed, DiagGramState at chunk end).
    """
    keys = np.asarray(keys, dtype=DTYPE)
    A0 = np.asarray(boundary.A if isinstance(boundary, DiagGramState) else boundary, dtype=DTYPE)
    if np.ndim(alpha_p) and np.shape(alpha_p)[-1] < keys.shape[-2]:
        raise ValueError("chunk longer than provided gates")
    rows = keys if targets is None else np.asarray(targets, dtype=DTYPE)
    A_rows, end = within_chunk_moments(keys, A0, alpha_p, beta_p)
    if mode == "atq":
        out = raw_query(A_rows, rows, lam)
    elif mode == "atk_unstable":
        A_prev = np.concatenate([A0[..., None, :], A_rows[..., :-1, :]], axis=-2)
        out = raw_write_key(A_prev, rows, lam)
    elif mode == "atk_stable":
        mu = np.asarray(params.mu, dtype=DTYPE)[..., None]
        out = squash_parts(A_rows, mu, params.x)[2] * rows
    else:
        raise ValueError(f"unknown scan mode {mode!r}")
    return out, DiagGramState(end)
