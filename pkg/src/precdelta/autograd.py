"""Reverse-mode gradients through the sequential recurrences.

The backward sweep replays the Trace recorded by run_sequential and returns
gradients of sum_t <g_t, o_t> with respect to every input: rows, gates, the
squash centre (through mu = exp(raw)) and the initial state. Gates are taken
as values; chaining to raw parameters happens in the model code.

Squash derivative: s = r / (1 + |r|) has ds/dr = 1 / (1 + |r|)^2.
"""
import math
from dataclasses import dataclass, fields

import numpy as np

from . import preconditioner as pc
from .numerics import DTYPE
from .recurrence import DECAYS, SOLVES, RecurrenceConfig, SequenceBatch, random_sequence, run_sequential


@dataclass
class GradientBundle:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    dbeta: np.ndarray
    dalpha: np.ndarray
    dbetaP: np.ndarray
    dalphaP: np.ndarray
    dmu_raw: np.ndarray
    dS0: np.ndarray

    def scaled_sum(self, other, a=1.0, b=1.0):
        return GradientBundle(*(a * getattr(self, f.name) + b * getattr(other, f.name)
                                for f in fields(self)))


def _mv(S, k):
    return np.matmul(S, k[..., None])[..., 0]


def _mtv(S, v):
    return np.matmul(v[..., None, :], S)[..., 0, :]


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def l2_normalize_backward(x, dy):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    y = x / n
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / n


def backward_sequential(cfg, seq, tape, grad_outputs, grad_state=None):
    """Gradients of sum_t <grad_outputs_t, o_t> (+ <grad_state, S_T>)."""
    if tape.cfg != cfg:
        raise ValueError("tape was recorded under a different config")
    if cfg.precond == "exact":
        raise NotImplementedError("no gradients through the exact Sherman-Morrison path")
    if tape.S is None:
        raise ValueError("tape has no recorded states; run_sequential(record=True)")
    s = tape.seq
    Q, K, V = tape.Qn, tape.Kn, s.V
    T = Q.shape[-2]
    go = np.asarray(grad_outputs, dtype=tape.S.dtype)
    if go.shape[-2:] != (T, cfg.d_v):
        raise ValueError(f"grad_outputs shape {go.shape} does not match (T, d_v) = ({T}, {cfg.d_v})")

    online = cfg.solve == "online"
    diagonal = cfg.decay == "diagonal"
    batch = tape.S.shape[:-3]
    dt = tape.S.dtype
    dQ = np.zeros(batch + Q.shape[-2:], dtype=dt)
    dK = np.zeros(batch + K.shape[-2:], dtype=dt)
    dV = np.zeros(batch + V.shape[-2:], dtype=dt)
    dbeta = np.zeros(batch + (T,), dtype=dt)
    dalpha = np.zeros(batch + s.alpha.shape[-(2 if diagonal else 1):], dtype=dt)
    dbetaP = np.zeros(batch + (T,), dtype=dt)
    dalphaP = np.zeros(batch + (T,), dtype=dt)
    dmu = np.zeros(batch, dtype=dt)
    dS = np.zeros(batch + (cfg.d_v, cfg.d_k), dtype=dt)
    if grad_state is not None:
        dS += grad_state
    has_diag = cfg.precond.startswith("diag")
    dA_next = np.zeros(batch + (cfg.d_k,), dtype=dt) if has_diag else None
    log_x = math.log(cfg.x)

    # dS is updated in place. With G = dS + g qr' (readout folded in), the
    # pre-decay cotangent is G - de k' (online) or G (offline); products with
    # G are formed from dS plus the rank-one term instead of materializing G.
    for t in range(T - 1, -1, -1):
        q, k, v = Q[..., t, :], K[..., t, :], V[..., t, :]
        S_prev, S_t = tape.S[..., t, :, :], tape.S[..., t + 1, :, :]
        qr, kw = tape.q_read[..., t, :], tape.k_write[..., t, :]
        beta = s.beta[..., t]
        g = go[..., t, :]
        d_read_q = _mtv(S_t, g)

        if cfg.decay == "none":
            alpha = None
        else:
            alpha = s.alpha[..., t, :] if diagonal else s.alpha[..., t]

        if online:
            e = tape.err[..., t, :]
            Gkw = _mv(dS, kw) + g * np.sum(qr * kw, axis=-1)[..., None]
            dbeta[..., t] = np.sum(e * Gkw, axis=-1)
            de = beta[..., None] * Gkw
            d_kw = beta[..., None] * (_mtv(dS, e) + qr * np.sum(g * e, axis=-1)[..., None])
            dV[..., t, :] += de
            SdT_de = _mtv(S_prev, de)
            if alpha is None:
                dK[..., t, :] -= SdT_de
            elif diagonal:
                dK[..., t, :] -= alpha * SdT_de
            else:
                dK[..., t, :] -= alpha[..., None] * SdT_de
            dQ[..., t, :] += d_read_q
            left = np.stack([g, -de], axis=-1)
            right = np.stack([qr, k], axis=-2)
            dS += np.matmul(left, right)
        else:
            Gk = _mv(dS, k) + g * np.sum(qr * k, axis=-1)[..., None]
            dbeta[..., t] = np.sum(v * Gk, axis=-1)
            dV[..., t, :] += beta[..., None] * Gk
            dK[..., t, :] += beta[..., None] * (_mtv(dS, v) + qr * np.sum(g * v, axis=-1)[..., None])
            dS += _outer(g, qr)
            d_kw = None

        # dS now holds the cotangent of the decayed state
        if alpha is not None:
            if diagonal:
                dalpha[..., t, :] = np.einsum("...ij,...ij->...j", dS, S_prev)
                dS *= alpha[..., None, :]
            else:
                dalpha[..., t] = np.einsum("...ij,...ij->...", dS, S_prev)
                dS *= alpha[..., None, None]

        # transform of the write key (online) or the query (offline)
        row = k if online else q
        d_out = d_kw if online else d_read_q
        d_row = np.zeros_like(row)
        if not has_diag:
            d_row = d_out
        else:
            A_prev, A_t = tape.A[..., t, :], tape.A[..., t + 1, :]
            dA_local = np.zeros_like(A_t)
            dA_prev_local = np.zeros_like(A_t)
            if cfg.precond == "diag_stable":
                B, r = tape.B[..., t, :], tape.r[..., t, :]
                d_row = B * d_out
                dr = (row * d_out) * B * (-log_x) / (1.0 + np.abs(r)) ** 2
                dmu -= np.sum(dr, axis=-1)
                dA_local = np.where(A_t > pc.LOG_FLOOR, dr / np.maximum(A_t, pc.LOG_FLOOR), 0.0)
            elif online:
                inv = 1.0 / (A_prev + cfg.lam)
                num = inv * k
                den = 1.0 + np.sum(num * k, axis=-1)
                dnum = d_out / den[..., None]
                dden = -np.sum(d_out * num, axis=-1) / den ** 2
                dinv = dden[..., None] * k * k + dnum * k
                d_row = dnum * inv + 2.0 * dden[..., None] * inv * k
                dA_prev_local = -dinv * inv * inv
            else:
                inv = 1.0 / (A_t + cfg.lam)
                d_row = d_out * inv
                dA_local = -d_out * q * inv * inv
            dA = dA_next + dA_local
            dalphaP[..., t] = np.sum(dA * A_prev, axis=-1)
            dbetaP[..., t] = np.sum(dA * k * k, axis=-1)
            dK[..., t, :] += 2.0 * s.beta_p[..., t, None] * k * dA
            dA_next = s.alpha_p[..., t, None] * dA + dA_prev_local
        if online:
            dK[..., t, :] += d_row
        else:
            dQ[..., t, :] += d_row

    if cfg.normalize_qk:
        dQ = l2_normalize_backward(s.Q, dQ)
        dK = l2_normalize_backward(s.K, dK)
    dmu_raw = dmu * s.mu
    return GradientBundle(dQ, dK, dV, dbeta, dalpha, dbetaP, dalphaP, dmu_raw, dS)


def _inputs(cfg, s):
    """Differentiable inputs as (name, array) in bundle order."""
    items = [("dQ", s.Q), ("dK", s.K), ("dV", s.V), ("dbeta", s.beta)]
    if cfg.decay != "none":
        items.append(("dalpha", s.alpha))
    if cfg.precond.startswith("diag"):
        items += [("dbetaP", s.beta_p), ("dalphaP", s.alpha_p)]
    if cfg.precond == "diag_stable":
        items.append(("dmu_raw", np.log(s.mu)))
    items.append(("dS0", s.S0))
    return items


def finite_diff_check(cfg, seq, seed=0, h=1e-5, return_details=False):
    """Central differences on every scalar input vs backward_sequential.

    All +-h perturbations are evaluated in a single batched forward pass.
    Relative error per coordinate is |a - b| / max(|a|, |b|, 1e-8); the
    maximum over coordinates is returned.
    """
    s = seq.resolved(cfg)
    if s.Q.ndim != 2:
        raise ValueError("finite_diff_check expects a single unbatched sequence")
    S0 = s.S0
    s = SequenceBatch(s.Q, s.K, s.V, s.beta, s.alpha, s.beta_p, s.alpha_p, s.mu, S0)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((s.T, cfg.d_v))
    _, _, tape = run_sequential(cfg, s)
    grads = backward_sequential(cfg, s, tape, g)
    # the perturbed forwards run in extended precision so that roundoff in
    # the loss stays far below the h^2 truncation term
    wide = np.longdouble

    items = _inputs(cfg, s)
    sizes = [np.size(a) for _, a in items]
    n = sum(sizes)
    if n == 0:
        return (0.0, {}) if return_details else 0.0
    # 2n perturbed copies of every input
    batched = {}
    offset = 0
    for (name, a), size in zip(items, sizes):
        base = np.broadcast_to(np.asarray(a, dtype=wide), (2 * n,) + np.shape(a)).copy()
        flat = base.reshape(2 * n, -1)
        idx = np.arange(size)
        flat[offset + idx, idx] += h
        flat[n + offset + idx, idx] -= h
        batched[name] = base
        offset += size
    mu = np.exp(batched["dmu_raw"]) if "dmu_raw" in batched else s.mu
    pseq = SequenceBatch(batched["dQ"], batched["dK"], batched["dV"], batched["dbeta"],
                         batched.get("dalpha", s.alpha), batched.get("dbetaP", s.beta_p),
                         batched.get("dalphaP", s.alpha_p), mu, batched["dS0"])
    O, _, _ = run_sequential(cfg, pseq, record=False)
    L = np.sum(O * g.astype(wide), axis=(-1, -2))
    fd = ((L[:n] - L[n:]) / (2 * h)).astype(DTYPE)
    an = np.concatenate([np.ravel(getattr(grads, name)) for name, _ in items])
    rel = np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-8)
    worst = float(rel.max())
    if not return_details:
        return worst
    details, offset = {}, 0
    for (name, _), size in zip(items, sizes):
        details[name] = float(rel[offset:offset + size].max())
        offset += size
    return worst, details


GRID_T = tuple(range(1, 17))
GRID_D = (2, 4, 8)
GRID_PRECONDS = ("none", "diag_raw", "diag_stable")


def gradient_grid(seed=0, Ts=GRID_T, dims=GRID_D, preconds=GRID_PRECONDS, tol=1e-5):
    """finite_diff_check over solve x decay x precond x T x d.

    Returns one record per instance with its max relative error and pass
    flag. Instances carry a random initial state so dS0 is exercised too.
    """
    rng = np.random.default_rng(seed)
    records = []
    for solve in SOLVES:
        for decay in DECAYS:
            for precond in preconds:
                for T in Ts:
                    for d in dims:
                        cfg = RecurrenceConfig(d, d, solve, decay, precond, normalize_qk=True)
                        seq = random_sequence(cfg, T, rng, init_state=True)
                        err, det = finite_diff_check(cfg, seq, seed=T, return_details=True)
                        records.append({"solve": solve, "decay": decay, "precond": precond,
                                        "T": T, "d": d, "max_rel_err": err,
                                        "worst_input": max(det, key=det.get) if det else None,
                                        "pass": bool(err < tol)})
    return records
