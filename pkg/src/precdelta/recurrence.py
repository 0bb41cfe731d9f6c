"""Token-by-token reference recurrences.

Offline solve:  S_t = a_t S_{t-1} + b_t v_t k_t'
Online solve:   S_t = a_t S_{t-1} + b_t (v_t - a_t S_{t-1} k_t) kw_t'
Readout:        o_t = S_t q_t   (q replaced by the transformed query on the
                query-side path)

Decay a_t is absent, a scalar, or a per-key-channel vector acting on the
columns of S. All arrays may carry leading batch axes in front of the time
axis, which is how the finite-difference checks and the training loop run
many sequences in one sweep.
"""
from dataclasses import dataclass, field

import numpy as np

from . import preconditioner as pc
from .numerics import DTYPE, as_real, l2_normalize, work_dtype

SOLVES = ("online", "offline")
DECAYS = ("none", "scalar", "diagonal")
PRECONDS = ("none", "exact", "diag_raw", "diag_stable")


@dataclass(frozen=True)
class RecurrenceConfig:
    d_k: int
    d_v: int
    solve: str = "online"
    decay: str = "none"
    precond: str = "none"
    lam: float = pc.DEFAULT_RIDGE
    x: float = pc.DEFAULT_X
    normalize_qk: bool = False

    def __post_init__(self):
        if self.solve not in SOLVES:
            raise ValueError(f"solve must be one of {SOLVES}")
        if self.decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}")
        if self.precond not in PRECONDS:
            raise ValueError(f"precond must be one of {PRECONDS}")
        if self.d_k < 1 or self.d_v < 1:
            raise ValueError("dimensions must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.precond == "exact" and self.lam <= 0:
            raise ValueError("exact preconditioning needs lambda > 0")
        if self.precond == "diag_raw" and self.lam <= 0:
            raise ValueError("the raw diagonal inverse needs a positive ridge")
        if self.precond == "diag_stable" and not 1 <= self.x <= 2:
            raise ValueError(f"x must lie in [1, 2] for the stable squash, got {self.x}")


@dataclass
class SequenceBatch:
    """Per-token rows and gate values. Missing gates default to 1, S0 to zero."""
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    beta: np.ndarray = None
    alpha: np.ndarray = None
    beta_p: np.ndarray = None
    alpha_p: np.ndarray = None
    mu: float = 1.0
    S0: np.ndarray = None

    @property
    def T(self):
        return np.shape(self.Q)[-2]

    def resolved(self, cfg):
        """Return a copy with every gate filled in and shapes checked."""
        dt = work_dtype(self.Q, self.K, self.V, self.S0, self.beta, self.alpha,
                        self.beta_p, self.alpha_p, self.mu)
        Q, K, V = (np.asarray(a, dtype=dt) for a in (self.Q, self.K, self.V))
        if Q.shape[-1] != cfg.d_k or K.shape[-1] != cfg.d_k or V.shape[-1] != cfg.d_v:
            raise ValueError(f"row dims {Q.shape[-1]}, {K.shape[-1]}, {V.shape[-1]} "
                             f"do not match d_k={cfg.d_k}, d_v={cfg.d_v}")
        T = Q.shape[-2]
        if K.shape[-2] != T or V.shape[-2] != T:
            raise ValueError("Q, K, V lengths differ")
        batch = np.broadcast_shapes(Q.shape[:-2], K.shape[:-2], V.shape[:-2])

        def gate(g, shape):
            if g is None:
                return np.ones(batch + shape, dtype=dt)
            g = np.asarray(g, dtype=dt)
            if g.shape[len(g.shape) - len(shape):] != shape:
                raise ValueError(f"gate shape {g.shape} does not end with {shape}")
            return g

        alpha_shape = (T, cfg.d_k) if cfg.decay == "diagonal" else (T,)
        S0 = (np.zeros(batch + (cfg.d_v, cfg.d_k), dtype=dt) if self.S0 is None
              else np.asarray(self.S0, dtype=dt))
        if S0.shape[-2:] != (cfg.d_v, cfg.d_k):
            raise ValueError(f"S0 shape {S0.shape} does not match ({cfg.d_v}, {cfg.d_k})")
        return SequenceBatch(Q, K, V, gate(self.beta, (T,)), gate(self.alpha, alpha_shape),
                             gate(self.beta_p, (T,)), gate(self.alpha_p, (T,)),
                             np.asarray(self.mu, dtype=dt), S0)


@dataclass
class DPLRStep:
    D: np.ndarray
    a: np.ndarray
    b: np.ndarray
    k: np.ndarray
    v: np.ndarray


@dataclass
class Trace:
    """Per-token intermediates; doubles as the tape for the backward sweep.

    Time-indexed entries are stacked on axis -2 (vectors) or -3 (matrices).
    S holds S_0..S_T, A holds A_0..A_T.
    """
    cfg: RecurrenceConfig
    seq: SequenceBatch
    Qn: np.ndarray = None
    Kn: np.ndarray = None
    S: np.ndarray = None
    A: np.ndarray = None
    B: np.ndarray = None
    r: np.ndarray = None
    P: np.ndarray = None
    k_write: np.ndarray = None
    q_read: np.ndarray = None
    err: np.ndarray = None
    extra: dict = field(default_factory=dict)


def _mv(S, k):
    return np.matmul(S, k[..., None])[..., 0]


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def apply_decay(S, alpha=None, diagonal=False):
    if alpha is None:
        return S
    alpha = as_real(alpha)
    return S * alpha[..., None, :] if diagonal else S * alpha[..., None, None]


def step_offline(S, k, v, beta=1.0, alpha=None, diagonal=False):
    S = as_real(S)
    if S.shape[-1] != np.shape(k)[-1] or S.shape[-2] != np.shape(v)[-1]:
        raise ValueError(f"dimension mismatch: S {S.shape}, k {np.shape(k)}, v {np.shape(v)}")
    beta = as_real(beta)[..., None, None]
    return apply_decay(S, alpha, diagonal) + beta * _outer(v, k)


def step_online(S, k_read, k_write, v, beta=1.0, alpha=None, diagonal=False):
    S = as_real(S)
    if (S.shape[-1] != np.shape(k_read)[-1] or S.shape[-1] != np.shape(k_write)[-1]
            or S.shape[-2] != np.shape(v)[-1]):
        raise ValueError("dimension mismatch in online step")
    Sd = apply_decay(S, alpha, diagonal)
    err = v - _mv(Sd, k_read)
    beta = as_real(beta)[..., None, None]
    return Sd + beta * _outer(err, k_write)


def step_dplr(S, step):
    """S (diag(D) - a b') + v k'."""
    S = as_real(S)
    if not (S.shape[-1] == len(step.D) == len(step.a) == len(step.b) == len(step.k)
            and S.shape[-2] == len(step.v)):
        raise ValueError("dimension mismatch in DPLR step")
    return S * step.D[None, :] - _outer(_mv(S, step.a), step.b) + _outer(step.v, step.k)


def online_as_dplr(k_read, k_write, v, beta=1.0, alpha=1.0):
    """Tie an online step into DPLR form.

    In the right-multiplying convention the low-rank factor's right vector
    and the additive key are both the write key; the left vector carries the
    read key: a S(I - b k kw') + b v kw' = S(a I - (a b k) kw') + (b v) kw'.
    Diagonal alpha works the same way with a -> diag(alpha) applied first.
    """
    alpha = np.broadcast_to(np.asarray(alpha, dtype=DTYPE), np.shape(k_read))
    return DPLRStep(D=alpha.copy(), a=alpha * beta * k_read, b=np.asarray(k_write),
                    k=np.asarray(k_write), v=beta * np.asarray(v))


# CLI-level variant names: (solve, decay); the "p" prefix adds a preconditioner
VARIANTS = {
    "la": ("offline", "none"), "mamba2": ("offline", "scalar"), "gla": ("offline", "diagonal"),
    "dn": ("online", "none"), "gdn": ("online", "scalar"), "kda": ("online", "diagonal"),
}
VARIANTS.update({"p" + name: v for name, v in list(VARIANTS.items())})


def variant_config(name, d_k, d_v=None, precond=None, **kw):
    """RecurrenceConfig for a named variant.

    Unprefixed names default to no preconditioner. Prefixed names default to
    the stable squash on the key side (online) and the raw diagonal inverse
    on the query side (offline); `precond` overrides either default.
    """
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    solve, decay = VARIANTS[name]
    if precond is None:
        if not name.startswith("p"):
            precond = "none"
        else:
            precond = "diag_stable" if solve == "online" else "diag_raw"
    precond = precond.replace("-", "_")
    return RecurrenceConfig(d_k, d_k if d_v is None else d_v, solve, decay, precond, **kw)


def random_sequence(cfg, T, rng, beta_low=0.1, alpha_low=0.5, init_state=False):
    """Gaussian rows and uniform gates for a test instance of `cfg`."""
    d, dv = cfg.d_k, cfg.d_v
    alpha = rng.uniform(alpha_low, 1, size=(T, d) if cfg.decay == "diagonal" else T)
    Q, K, V = rng.normal(size=(T, d)), rng.normal(size=(T, d)), rng.normal(size=(T, dv))
    beta = rng.uniform(beta_low, 1, size=T)
    beta_p = rng.uniform(beta_low, 1, size=T)
    alpha_p = rng.uniform(alpha_low, 1, size=T)
    mu = rng.uniform(0.3, 2)
    S0 = rng.normal(size=(dv, d)) if init_state else None
    return SequenceBatch(Q, K, V, beta, alpha, beta_p, alpha_p, mu, S0)


def run_sequential(cfg, seq, record=True):
    """Run the recurrence token by token.

    Returns (outputs (..., T, d_v), final state (..., d_v, d_k), Trace).
    Per token the order is: preconditioner update, write-key or query
    transform, main state update, readout.
    """
    s = seq.resolved(cfg)
    Q, K = s.Q, s.K
    if cfg.normalize_qk:
        Q, K = l2_normalize(Q), l2_normalize(K)
    T = Q.shape[-2]
    batch = np.broadcast_shapes(Q.shape[:-2], K.shape[:-2], s.V.shape[:-2], s.S0.shape[:-2])
    diagonal = cfg.decay == "diagonal"
    online = cfg.solve == "online"
    S = np.broadcast_to(s.S0, batch + s.S0.shape[-2:]).copy()
    dt = s.Q.dtype
    O = np.zeros(batch + (T, cfg.d_v), dtype=dt)

    tr = Trace(cfg, s, Q, K)
    rec = {n: [] for n in ("A", "B", "r", "P", "k_write", "q_read", "err")} if record else None
    # states are written straight into the tape to avoid a final stack copy
    tape = np.empty(batch + (T + 1, cfg.d_v, cfg.d_k), dtype=dt) if record else None
    if record:
        tape[..., 0, :, :] = S

    exact = pc.ExactGramState.initial(cfg.d_k, cfg.lam, batch, dt) if cfg.precond == "exact" else None
    diag = pc.DiagGramState.initial(cfg.d_k, batch, dt) if cfg.precond.startswith("diag") else None
    if record and diag is not None:
        rec["A"].append(diag.A)

    for t in range(T):
        q, k, v = Q[..., t, :], K[..., t, :], s.V[..., t, :]
        kw, qr = k, q
        if exact is not None:
            exact, kw_exact = pc.exact_update_and_write_key(exact, k)
            if online:
                kw = kw_exact
            else:
                qr = pc.exact_query(exact, q)
            if record:
                rec["P"].append(exact.P)
        elif diag is not None:
            A_prev = diag.A
            diag = pc.diag_update(diag, k, s.alpha_p[..., t], s.beta_p[..., t])
            if cfg.precond == "diag_raw":
                if online:
                    kw = pc.raw_write_key(A_prev, k, cfg.lam)
                else:
                    qr = pc.raw_query(diag.A, q, cfg.lam)
            else:
                r, _, B = pc.squash_parts(diag.A, s.mu, cfg.x)
                if online:
                    kw = B * k
                else:
                    qr = B * q
                if record:
                    rec["B"].append(B)
                    rec["r"].append(r)
            if record:
                rec["A"].append(diag.A)

        alpha = None if cfg.decay == "none" else s.alpha[..., t, :] if diagonal else s.alpha[..., t]
        beta = s.beta[..., t][..., None]
        if online:
            # (S diag(a)) k == S (a * k); scalar a factors out of the product
            if alpha is None:
                Sk = _mv(S, k)
            elif diagonal:
                Sk = _mv(S, alpha * k)
            else:
                Sk = alpha[..., None] * _mv(S, k)
            err = v - Sk
            left, right = beta * err, kw
            if record:
                rec["err"].append(err)
        else:
            left, right = beta * v, k
        nxt = tape[..., t + 1, :, :] if record else np.empty_like(S)
        np.multiply(left[..., :, None], right[..., None, :], out=nxt)
        if alpha is None:
            nxt += S
        elif diagonal:
            nxt += S * alpha[..., None, :]
        else:
            nxt += S * alpha[..., None, None]
        S = nxt
        O[..., t, :] = _mv(S, qr)
        if record:
            rec["k_write"].append(kw)
            rec["q_read"].append(qr)

    if record:
        tr.S = tape
        axes = {"P": -3}
        for name, items in rec.items():
            if items:
                setattr(tr, name, np.stack(items, axis=axes.get(name, -2)))
    return O, S, tr
