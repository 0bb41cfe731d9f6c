"""Chunkwise parallel forms of the reference recurrences.

A sequence is cut into chunks of C tokens (the last one may be shorter).
Work splits into three stages: per-chunk factors with no cross-chunk
dependence, a short sequential pass carrying boundary states, and per-chunk
outputs. The first and last stages are vectorized over all chunks at once.

Decay inside a chunk is handled by de-decaying the state. With b_r the
cumulative decay from the chunk start to row r, X_r = S_r diag(1/b_r)
follows an undecayed delta rule whose read key is b_r * k_r and whose write
key is kw_r / b_r. Only ratios b_r / b_t with t <= r are ever formed, and
those are taken as exp of log-cumsum differences so long chunks of small
gates cannot overflow.
"""
from dataclasses import dataclass

import numpy as np

from . import preconditioner as pc
from .numerics import DTYPE, causal_mask, decay_ratio, l2_normalize, solve_unit_lower_triangular
from .recurrence import DECAYS, SOLVES, RecurrenceConfig, random_sequence, run_sequential


@dataclass(frozen=True)
class ChunkPlan:
    T: int
    C: int

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("chunk size must be >= 1")

    @property
    def num_chunks(self):
        return -(-self.T // self.C)

    @property
    def num_full(self):
        return self.T // self.C

    @property
    def remainder(self):
        return self.T - self.num_full * self.C

    @property
    def mask(self):
        return causal_mask(self.C)

    @property
    def strict_mask(self):
        return causal_mask(self.C, strict=True)

    def segments(self):
        """(start, n_chunks, length) groups: the full chunks, then the ragged tail."""
        out = []
        if self.num_full:
            out.append((0, self.num_full, self.C))
        if self.remainder:
            out.append((self.num_full * self.C, 1, self.remainder))
        return out


@dataclass(frozen=True)
class DecayPlan:
    """Cumulative log decay g within a chunk; shape (..., C) or (..., C, d)."""
    g: np.ndarray
    per_channel: bool

    @classmethod
    def from_gates(cls, alpha, per_channel=False):
        alpha = np.asarray(alpha, dtype=DTYPE)
        if np.any(alpha <= 0) or np.any(alpha > 1):
            raise ValueError("decay gates must lie in (0, 1]")
        return cls(np.cumsum(np.log(alpha), axis=-2 if per_channel else -1), per_channel)

    @property
    def gamma(self):
        """Decay from the chunk start to each row (inclusive)."""
        return np.exp(self.g)

    @property
    def gamma_last(self):
        return np.exp(self.g[..., -1, :] if self.per_channel else self.g[..., -1])

    @property
    def to_last(self):
        """Decay from each row to the end of the chunk."""
        if self.per_channel:
            return np.exp(self.g[..., -1:, :] - self.g)
        return np.exp(self.g[..., -1:] - self.g)

    def ratios(self, strict=False):
        return decay_ratio(self.g, strict=strict, per_channel=self.per_channel)


@dataclass
class UTFactors:
    T: np.ndarray
    W: np.ndarray
    U: np.ndarray


def _rows_scale(X, d):
    """Scale rows of X by a per-row scalar (..., C) or per-entry (..., C, d)."""
    return X * d if d.ndim == X.ndim else X * d[..., None]


def _pair(X, Y, decay, strict):
    """Masked interaction X_r . Y_t with decay ratios for t <= r (t < r if strict)."""
    C = X.shape[-2]
    if decay is None:
        return (X @ np.swapaxes(Y, -1, -2)) * causal_mask(C, strict)
    R = decay.ratios(strict)
    if decay.per_channel:
        return np.einsum("...rd,...td,...rtd->...rt", X, Y, R)
    return (X @ np.swapaxes(Y, -1, -2)) * R


def ut_factors(K, K_write, V, beta, decay=None):
    """UT transform of a chunk: T = (I + tril(diag(b) K Kw', -1))^-1 diag(b).

    With decay the read keys become b_r k_r and the interactions carry the
    ratio b_r / b_t; W = T (gamma * K), U = T V.
    """
    K = np.asarray(K, dtype=DTYPE)
    K_write = np.asarray(K_write, dtype=DTYPE)
    V = np.asarray(V, dtype=DTYPE)
    beta = np.asarray(beta, dtype=DTYPE)
    if K.shape != K_write.shape or K.shape[:-1] != V.shape[:-1] or beta.shape != K.shape[:-1]:
        raise ValueError("ut_factors: rows are not aligned")
    L = beta[..., None] * _pair(K, K_write, decay, strict=True)
    T = solve_unit_lower_triangular(L, beta[..., None] * np.eye(K.shape[-2]))
    K_read = K if decay is None else _rows_scale(K, decay.gamma)
    return UTFactors(T, T @ K_read, T @ V)


@dataclass
class _Factors:
    W: np.ndarray        # None for the offline solve
    U: np.ndarray
    K_end: np.ndarray    # write keys decayed to the chunk end
    end_decay: np.ndarray
    Q_in: np.ndarray     # queries decayed from the chunk start
    A_qk: np.ndarray     # masked intra-chunk query/key interactions


def _prepare(Q, K, K_write, V, beta, decay, online):
    if online:
        f = ut_factors(K, K_write, V, beta, decay)
        W, U = f.W, f.U
    else:
        W, U = None, beta[..., None] * V
    if decay is None:
        K_end, end_decay, Q_in = K_write, None, Q
    else:
        K_end = _rows_scale(K_write, decay.to_last)
        end_decay = decay.gamma_last
        Q_in = _rows_scale(Q, decay.gamma)
    return _Factors(W, U, K_end, end_decay, Q_in, _pair(Q, K_write, decay, strict=False))


def _carry(S, f, per_channel):
    """Delta = U - W S' and the state at the chunk end."""
    delta = f.U if f.W is None else f.U - f.W @ np.swapaxes(S, -1, -2)
    if f.end_decay is None:
        S_dec = S
    elif per_channel:
        S_dec = S * f.end_decay[..., None, :]
    else:
        S_dec = S * f.end_decay[..., None, None]
    return delta, S_dec + np.swapaxes(delta, -1, -2) @ f.K_end


def _emit(S, delta, f):
    return f.Q_in @ np.swapaxes(S, -1, -2) + f.A_qk @ delta


def chunk_forward_offline(Q, K, V, beta, decay, boundary):
    """One chunk of the offline solve. Q may already be preconditioned."""
    Q, K, V, beta = (np.asarray(a, dtype=DTYPE) for a in (Q, K, V, beta))
    f = _prepare(Q, K, K, V, beta, decay, online=False)
    delta, S = _carry(np.asarray(boundary, dtype=DTYPE), f, decay is not None and decay.per_channel)
    return _emit(boundary, delta, f), S


def chunk_forward_online(Q, K, K_write, V, beta, decay, boundary):
    """One chunk of the online solve with separate read and write keys."""
    Q, K, K_write, V, beta = (np.asarray(a, dtype=DTYPE) for a in (Q, K, K_write, V, beta))
    f = _prepare(Q, K, K_write, V, beta, decay, online=True)
    delta, S = _carry(np.asarray(boundary, dtype=DTYPE), f, decay is not None and decay.per_channel)
    return _emit(boundary, delta, f), S


def _stack(X, start, n, length, tail=1):
    """View rows [start, start + n*length) as (..., n, length, ...)."""
    lead = X.shape[:X.ndim - 1 - tail]
    seg = X[(Ellipsis, slice(start, start + n * length)) + (slice(None),) * tail]
    return seg.reshape(lead + (n, length) + X.shape[X.ndim - tail:])


def _unstack(X, tail=1):
    lead = X.shape[:X.ndim - 2 - tail]
    return X.reshape(lead + (X.shape[-2 - tail] * X.shape[-1 - tail],) + X.shape[X.ndim - tail:])


def _precond_rows(cfg, s, K, rows, plan):
    """Chunked diagonal preconditioner: transformed rows for the whole sequence."""
    mode = {("online", "diag_raw"): "atk_unstable", ("offline", "diag_raw"): "atq",
            ("online", "diag_stable"): "atk_stable", ("offline", "diag_stable"): "atk_stable"}
    mode = mode[(cfg.solve, cfg.precond)]
    batch = K.shape[:-2]
    A = np.zeros(batch + (cfg.d_k,), dtype=DTYPE)
    mu = np.asarray(s.mu, dtype=DTYPE)
    out = []
    for start, n, length in plan.segments():
        Kc = _stack(K, start, n, length)
        ap = _stack(s.alpha_p, start, n, length, tail=0)
        bp = _stack(s.beta_p, start, n, length, tail=0)
        # phase 1: boundary accumulators from zero-started local scans
        local, local_end = pc.within_chunk_moments(Kc, np.zeros_like(Kc[..., 0, :]), ap, bp)
        carry = np.exp(np.sum(np.log(ap), axis=-1))
        bounds = []
        for i in range(n):
            bounds.append(A)
            A = carry[..., i, None] * A + local_end[..., i, :]
        bounds = np.stack(bounds, axis=-2)
        # phase 2: per-chunk transforms
        params = pc.SquashParams(mu[..., None] if mu.ndim else mu, cfg.x)
        tr, _ = pc.chunk_precond_scan(Kc, bounds, ap, bp, mode, params, cfg.lam,
                                      targets=_stack(rows, start, n, length))
        out.append(_unstack(tr))
    return np.concatenate(out, axis=-2) if out else rows.copy()


def full_chunkwise_run(cfg, seq, C=16):
    """Chunkwise evaluation of run_sequential's outputs (exact precond excluded)."""
    if cfg.precond == "exact":
        raise NotImplementedError("exact preconditioning has no chunkwise form; use run_sequential")
    s = seq.resolved(cfg)
    Q, K = s.Q, s.K
    if cfg.normalize_qk:
        Q, K = l2_normalize(Q), l2_normalize(K)
    T = Q.shape[-2]
    batch = np.broadcast_shapes(Q.shape[:-2], K.shape[:-2], s.V.shape[:-2], s.S0.shape[:-2])
    Q, K, V = (np.broadcast_to(a, batch + a.shape[-2:]) for a in (Q, K, s.V))
    plan = ChunkPlan(T, C)
    online = cfg.solve == "online"
    per_channel = cfg.decay == "diagonal"

    K_write = K
    if cfg.precond != "none":
        if online:
            K_write = _precond_rows(cfg, s, K, K, plan)
        else:
            Q = _precond_rows(cfg, s, K, Q, plan)

    S = np.broadcast_to(s.S0, batch + s.S0.shape[-2:]).copy()
    beta = np.broadcast_to(s.beta, batch + (T,))
    outs = []
    for start, n, length in plan.segments():
        decay = None
        if cfg.decay != "none":
            alpha = s.alpha
            tail = 1 if per_channel else 0
            alpha = np.broadcast_to(alpha, batch + alpha.shape[alpha.ndim - 1 - tail:])
            decay = DecayPlan.from_gates(_stack(alpha, start, n, length, tail), per_channel)
        f = _prepare(_stack(Q, start, n, length), _stack(K, start, n, length),
                     _stack(K_write, start, n, length), _stack(V, start, n, length),
                     _stack(beta, start, n, length, tail=0), decay, online)
        # sequential pass over boundaries
        bounds, deltas = [], []
        for i in range(n):
            if f.end_decay is None:
                end = None
            else:
                end = f.end_decay[..., i, :] if per_channel else f.end_decay[..., i]
            fi = _Factors(None if f.W is None else f.W[..., i, :, :], f.U[..., i, :, :],
                          f.K_end[..., i, :, :], end, None, None)
            bounds.append(S)
            delta, S = _carry(S, fi, per_channel)
            deltas.append(delta)
        bounds = np.stack(bounds, axis=-3)
        deltas = np.stack(deltas, axis=-3)
        outs.append(_unstack(_emit(bounds, deltas, f)))
    O = np.concatenate(outs, axis=-2) if outs else np.zeros(batch + (0, cfg.d_v), dtype=DTYPE)
    return O, S


def check_equivalence(instances=200, seed=0, chunk_sizes=(1, 2, 7, 16, None), max_T=128,
                      dims=(4, 8, 16), variants=None):
    """Max |chunkwise - sequential| over outputs and final states.

    Sweeps every (solve, decay, precond) with precond in {none, diag_raw,
    diag_stable}; `None` in chunk_sizes means C = T. Returns a dict keyed
    by (solve, decay, precond).
    """
    rng = np.random.default_rng(seed)
    if variants is None:
        variants = [(a, b, c) for a in SOLVES for b in DECAYS for c in ("none", "diag_raw", "diag_stable")]
    worst = {}
    for solve, decay, precond in variants:
        dev = 0.0
        for _ in range(instances):
            T = int(rng.integers(1, max_T + 1))
            d, dv = int(rng.choice(dims)), int(rng.choice(dims))
            cfg = RecurrenceConfig(d, dv, solve, decay, precond, normalize_qk=True)
            seq = random_sequence(cfg, T, rng, beta_low=0.0, alpha_low=0.3)
            O, S, _ = run_sequential(cfg, seq, record=False)
            for C in chunk_sizes:
                Oc, Sc = full_chunkwise_run(cfg, seq, T if C is None else C)
                dev = max(dev, float(np.abs(O - Oc).max()), float(np.abs(S - Sc).max()))
        worst[(solve, decay, precond)] = dev
    return worst
