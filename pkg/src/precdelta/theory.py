"""Numerical verifiers for the least-squares view of the recurrences.

Each check returns a TheoremReport whose pass flag is max_deviation < tol.
"""
from dataclasses import dataclass, field

import numpy as np

from . import preconditioner as pc
from .numerics import DTYPE, l2_normalize
from .recurrence import RecurrenceConfig, SequenceBatch, run_sequential, step_online


@dataclass
class TheoremReport:
    name: str
    max_deviation: float
    samples: int
    tol: float
    details: list = field(default_factory=list)

    @property
    def passed(self):
        return bool(self.max_deviation < self.tol)

    def as_dict(self):
        return {"name": self.name, "max_deviation": float(self.max_deviation),
                "samples": int(self.samples), "tol": self.tol, "pass": self.passed,
                "details": self.details}


@dataclass
class LeastSquaresOracle:
    K_hist: np.ndarray
    V_hist: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        if np.shape(self.K_hist)[-2] != np.shape(self.V_hist)[-2]:
            raise ValueError("key and value histories differ in length")


def least_squares_map(oracle):
    """S* = V'K (K'K + lam I)^-1 via a dense symmetric solve."""
    K = np.asarray(oracle.K_hist, dtype=DTYPE)
    V = np.asarray(oracle.V_hist, dtype=DTYPE)
    d = K.shape[-1]
    G = np.swapaxes(K, -1, -2) @ K + oracle.lam * np.eye(d)
    Cmat = np.swapaxes(V, -1, -2) @ K
    if oracle.lam == 0 and np.linalg.matrix_rank(G) < d:
        raise np.linalg.LinAlgError("singular Gram: need lambda > 0 or full-rank keys")
    # S G = C  <=>  G S' = C' (G symmetric)
    return np.swapaxes(np.linalg.solve(G, np.swapaxes(Cmat, -1, -2)), -1, -2)


def check_theorem1(seq, lam, tol=1e-8):
    """Exact query-side and key-side preconditioning agree with least squares.

    At every t: S_t(online, exact) == C_t G_t^-1, and the online output
    equals the offline output C_t (P_t q_t).
    """
    K = np.asarray(seq.K, dtype=DTYPE)
    V = np.asarray(seq.V, dtype=DTYPE)
    T, d = K.shape
    if T == 0:
        return TheoremReport("theorem1", 0.0, 0, tol)
    dv = V.shape[1]
    plain = SequenceBatch(seq.Q, K, V)
    O_dn, _, tr = run_sequential(RecurrenceConfig(d, dv, "online", "none", "exact", lam), plain)
    O_la, _, _ = run_sequential(RecurrenceConfig(d, dv, "offline", "none", "exact", lam), plain)
    Q = np.asarray(seq.Q, dtype=DTYPE)
    # dense oracle for every prefix at once
    KK = np.cumsum(K[:, :, None] * K[:, None, :], axis=0) + lam * np.eye(d)
    VK = np.cumsum(V[:, :, None] * K[:, None, :], axis=0)
    S_ls = np.swapaxes(np.linalg.solve(KK, np.swapaxes(VK, -1, -2)), -1, -2)
    o_ls = np.einsum("tij,tj->ti", S_ls, Q)
    dev_state = np.abs(tr.S[1:] - S_ls).max()
    dev_out = np.abs(O_dn - O_la).max()
    dev_ls = max(np.abs(O_dn - o_ls).max(), np.abs(O_la - o_ls).max())
    dev = max(dev_state, dev_out, dev_ls)
    return TheoremReport("theorem1", dev, T, tol, [{
        "T": T, "d_k": d, "d_v": dv, "lambda": lam, "state": float(dev_state),
        "outputs": float(dev_out), "vs_least_squares": float(dev_ls)}])


def counterexample_d2():
    """Diagonal preconditioning breaks the query/key equivalence after one token.

    lam = 1, k = v = [1, 1]. Query side: S = v k' diag(1 + k^2)^-1 = 11'/2.
    Key side: kw = diag(1)^-1 k / (1 + k'k) = 1/3, S = v kw' = 11'/3.
    """
    lam = 1.0
    k = np.array([1.0, 1.0])
    v = np.array([1.0, 1.0])
    G_diag = lam * np.ones(2) + k * k
    S_apla = np.outer(v, k) / G_diag[None, :]
    S0 = np.zeros((2, 2))
    kw = pc.raw_write_key(np.zeros(2), k, lam)
    S_apdn = step_online(S0, k, kw, v)
    return S_apla, S_apdn, bool(not np.array_equal(S_apla, S_apdn))


def counterexample_exact():
    """The same construction with the full Gram: both sides coincide."""
    k = np.array([1.0, 1.0])
    v = np.array([1.0, 1.0])
    P = np.linalg.inv(np.eye(2) + np.outer(k, k))
    S_pla = np.outer(v, k) @ P
    _, kw = pc.exact_update_and_write_key(pc.ExactGramState(np.eye(2)), k)
    return S_pla, step_online(np.zeros((2, 2)), k, kw, v)


def la_error_closed_form(S_true, d, t):
    return np.sum(S_true ** 2) / d * (1 - t / d + t * (t - 1) / d ** 2)


def theorem2_montecarlo(d, t_max, trials, seed=0, beta=1.0, dv=None):
    """Monte-Carlo errors of linear attention and the delta rule vs least squares.

    Noiseless data v = S k with keys and queries uniform on the sphere and no
    ridge. Least squares is only defined once t >= d, so records start there.
    The exact recurrence is seeded at t = d with the least-squares solution
    and inverse Gram, then advanced by Sherman-Morrison.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if t_max < d:
        raise ValueError("t_max must be >= d")
    dv = d if dv is None else dv
    rng = np.random.default_rng(seed)
    S_true = rng.standard_normal((dv, d))
    K = l2_normalize(rng.standard_normal((trials, t_max, d)))
    Qs = l2_normalize(rng.standard_normal((trials, t_max, d)))
    V = K @ S_true.T

    S_la = np.zeros((trials, dv, d))
    S_dn = np.zeros((trials, dv, d))
    P = None
    S_ex = None
    records = []
    for t in range(1, t_max + 1):
        k, v = K[:, t - 1], V[:, t - 1]
        S_la = S_la + v[:, :, None] * k[:, None, :]
        S_dn = step_online(S_dn, k, k, v, beta)
        if t < d:
            continue
        # least squares through QR of the key history: error scales with
        # cond(K) rather than cond(K'K)
        Qf, R = np.linalg.qr(K[:, :t])
        S_star = np.swapaxes(np.linalg.solve(R, np.swapaxes(Qf, -1, -2) @ V[:, :t]), -1, -2)
        if t == d:
            Rinv = np.linalg.solve(R, np.broadcast_to(np.eye(d), R.shape))
            P = Rinv @ np.swapaxes(Rinv, -1, -2)
            S_ex = S_star
        else:
            state, kw = pc.exact_update_and_write_key(pc.ExactGramState(P), k)
            P = state.P
            S_ex = step_online(S_ex, k, kw, v)
        q = Qs[:, t - 1]
        o_star = np.einsum("bij,bj->bi", S_star, q)
        e_la = np.sum((np.einsum("bij,bj->bi", S_la, q) - o_star) ** 2, axis=-1)
        e_dn = np.sum((np.einsum("bij,bj->bi", S_dn, q) - o_star) ** 2, axis=-1)
        e_ex = np.sum((np.einsum("bij,bj->bi", S_ex, q) - o_star) ** 2, axis=-1)
        records.append({
            "t": t,
            "E_LA": float(e_la.mean()), "se_LA": float(e_la.std(ddof=1) / np.sqrt(trials)),
            "E_DN": float(e_dn.mean()), "se_DN": float(e_dn.std(ddof=1) / np.sqrt(trials)),
            "closed_form_LA": float(la_error_closed_form(S_true, d, t)),
            "E_exact": float(e_ex.mean()),
        })
    return records


def transition_eigs(alpha, beta, k, k_write, tol=1e-10):
    """Analytic spectrum of M = alpha (I - beta k kw') and residuals vs M.

    Returns (lambda_bulk, lambda_write, residuals) where residuals are the
    trace and determinant mismatches against the explicit matrix.
    """
    k = np.asarray(k, dtype=DTYPE)
    k_write = np.asarray(k_write, dtype=DTYPE)
    if abs(np.linalg.norm(k) - 1) > 1e-8:
        raise ValueError("k must have unit norm")
    d = k.shape[-1]
    M = alpha * (np.eye(d) - beta * np.outer(k, k_write))
    lam_write = alpha * (1 - beta * k_write @ k)
    trace_res = abs(np.trace(M) - ((d - 1) * alpha + lam_write))
    det_res = abs(_lu_det(M) - alpha ** (d - 1) * lam_write)
    return alpha, lam_write, {"trace": float(trace_res), "det": float(det_res)}


def _lu_det(M):
    """Determinant from an LU factorization with partial pivoting."""
    A = np.array(M, dtype=DTYPE)
    n = A.shape[0]
    det = 1.0
    for j in range(n):
        p = j + int(np.argmax(np.abs(A[j:, j])))
        if A[p, j] == 0:
            return 0.0
        if p != j:
            A[[j, p]] = A[[p, j]]
            det = -det
        det *= A[j, j]
        A[j + 1:, j:] -= np.outer(A[j + 1:, j] / A[j, j], A[j, j:])
    return det


def check_eigs(trials=1000, seed=0, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 17))
        k = l2_normalize(rng.standard_normal(d))
        kw = rng.uniform(1 / 2, 2, d) * k
        _, _, res = transition_eigs(rng.uniform(0, 1), rng.uniform(0, 1), k, kw)
        worst = max(worst, res["trace"], res["det"])
    return TheoremReport("transition_eigs", worst, trials, tol)


def check_unit_disk(beta=None, x=2.0, trials=10000, seed=0, d=None):
    """Spectral radius of alpha (I - beta k (B k)') with B in [1/x, x] and beta x <= 2.

    beta=None draws beta uniformly from [0, min(1, 2/x)] per trial. The
    deviation reported is max(|lambda| - 1, 0) over all draws.
    """
    rng = np.random.default_rng(seed)
    dims = rng.integers(1, 9, trials) if d is None else np.full(trials, d)
    worst = 0.0
    radius = 0.0
    for dd in np.unique(dims):
        n = int(np.sum(dims == dd))
        k = l2_normalize(rng.standard_normal((n, dd)))
        B = rng.uniform(1 / x, x, (n, dd))
        # include exact interval endpoints
        B[: n // 4] = np.where(rng.random((n // 4, dd)) < 0.5, 1 / x, x)
        b = rng.uniform(0, min(1.0, 2.0 / x), n) if beta is None else np.full(n, beta)
        if np.any(b * x > 2 + 1e-15):
            raise ValueError("unit-disk check requires beta * x <= 2")
        alpha = rng.uniform(0, 1, n)
        alpha[: n // 8] = 1.0
        M = alpha[:, None, None] * (np.eye(dd) - b[:, None, None] * k[:, :, None] * (B * k)[:, None, :])
        mod = np.abs(np.linalg.eigvals(M)).max()
        radius = max(radius, mod)
        worst = max(worst, mod - 1.0)
    return TheoremReport("unit_disk", max(worst, 0.0), trials, 1e-12,
                         [{"x": x, "max_modulus": float(radius)}])


def unit_disk_violation(x=3.0, beta=1.0, alpha=1.0, d=4, seed=0):
    """B = x I with beta x > 1 gives a negative write eigenvalue alpha (1 - beta x)."""
    rng = np.random.default_rng(seed)
    k = l2_normalize(rng.standard_normal(d))
    _, lam_write, res = transition_eigs(alpha, beta, k, x * k)
    M = alpha * (np.eye(d) - beta * np.outer(k, x * k))
    return {"lambda_write": float(lam_write), "max_modulus": float(np.abs(np.linalg.eigvals(M)).max()),
            "negative": bool(lam_write < 0), "outside_unit_disk": bool(abs(lam_write) > 1),
            "residuals": res}


def write_key_bound(trials=10000, seed=0):
    """k' kw for the Sherman-Morrison write key over random SPD histories.

    Returns (min, max) of the inner product across draws.
    """
    rng = np.random.default_rng(seed)
    d = rng.integers(1, 17, trials)
    lo, hi = np.inf, -np.inf
    for dd in np.unique(d):
        n = int(np.sum(d == dd))
        lam = 10.0 ** rng.uniform(-3, 2, n)
        hist = rng.standard_normal((n, int(rng.integers(0, 3 * dd + 1)), dd))
        G = np.swapaxes(hist, -1, -2) @ hist + lam[:, None, None] * np.eye(dd)
        P = np.linalg.inv(G)
        P = 0.5 * (P + np.swapaxes(P, -1, -2))
        k = rng.standard_normal((n, dd)) * 10.0 ** rng.uniform(-2, 2, (n, 1))
        _, kw = pc.exact_update_and_write_key(pc.ExactGramState(P), k)
        ip = np.sum(k * kw, axis=-1)
        lo, hi = min(lo, ip.min()), max(hi, ip.max())
    return float(lo), float(hi)


# Preconditioned online convex programs. Each objective is minimized by the
# matching closed-form update; we check stationarity by central differences.

def _weighted_sq(X, Pinv):
    return float(np.trace(X @ Pinv @ X.T))


def pocp_objective(variant, S, S_prev, k, v, alpha, beta, P):
    Pinv = np.linalg.inv(P)
    if variant == "pgdn":
        return _weighted_sq(S - alpha * S_prev, Pinv) - 2 * (S @ k) @ (beta * (v - alpha * S_prev @ k))
    if variant == "p_longhorn":
        r = S @ k - v
        return _weighted_sq(S - S_prev, Pinv) + beta * r @ r
    if variant == "key_precond_mamba2":
        return _weighted_sq(S - alpha * S_prev, Pinv) - 2 * (S @ k) @ v
    raise ValueError(f"unknown variant {variant!r}")


def pocp_solution(variant, S_prev, k, v, alpha, beta, P):
    Pk = P @ k
    if variant == "pgdn":
        return alpha * S_prev + beta * np.outer(v - alpha * S_prev @ k, Pk)
    if variant == "p_longhorn":
        eps = beta / (1 + beta * k @ Pk)
        return S_prev + eps * np.outer(v - S_prev @ k, Pk)
    if variant == "key_precond_mamba2":
        return alpha * S_prev + np.outer(v, Pk)
    raise ValueError(f"unknown variant {variant!r}")


def _is_spd(P):
    return np.allclose(P, P.T) and np.all(np.linalg.eigvalsh(0.5 * (P + P.T)) > 0)


def pocp_verify(variant, S_prev, k, v, alpha=1.0, beta=1.0, P=None, h=1e-5, tol=1e-7,
                n_perturb=20, seed=0):
    S_prev = np.asarray(S_prev, dtype=DTYPE)
    d = S_prev.shape[1]
    P = np.eye(d) if P is None else np.asarray(P, dtype=DTYPE)
    if not _is_spd(P):
        raise ValueError("P must be symmetric positive definite")
    S_star = pocp_solution(variant, S_prev, k, v, alpha, beta, P)
    f = lambda S: pocp_objective(variant, S, S_prev, k, v, alpha, beta, P)
    grad = np.zeros_like(S_star)
    for idx in np.ndindex(*S_star.shape):
        E = np.zeros_like(S_star)
        E[idx] = h
        grad[idx] = (f(S_star + E) - f(S_star - E)) / (2 * h)
    gnorm = float(np.linalg.norm(grad))
    rng = np.random.default_rng(seed)
    f0 = f(S_star)
    increases = all(f(S_star + 1e-3 * rng.standard_normal(S_star.shape)) > f0 for _ in range(n_perturb))
    return TheoremReport(f"pocp_{variant}", gnorm if increases else np.inf, 1, tol,
                         [{"grad_norm": gnorm, "perturbations_increase": increases}])


def pocp_reductions(trials=1000, seed=0, tol=1e-12):
    """POCP closed forms at P = I against the base recurrences.

    pgdn -> gated delta rule, p_longhorn -> delta rule with gain
    beta / (1 + beta k'k), key_precond_mamba2 -> decayed linear attention.
    Also checks that P-Longhorn with P = G_{t-1}^-1 and PGDN with
    P = G_t^-1 (alpha = beta = 1) give the same update.
    """
    rng = np.random.default_rng(seed)
    dev = {"pgdn": 0.0, "p_longhorn": 0.0, "key_precond_mamba2": 0.0, "longhorn_vs_pgdn": 0.0}
    for _ in range(trials):
        d, dv = (int(n) for n in rng.integers(1, 9, 2))
        S_prev = rng.standard_normal((dv, d))
        k, v = rng.standard_normal(d), rng.standard_normal(dv)
        alpha, beta = rng.uniform(0, 1, 2)
        eye = np.eye(d)
        got = pocp_solution("pgdn", S_prev, k, v, alpha, beta, eye)
        dev["pgdn"] = max(dev["pgdn"], np.abs(got - step_online(S_prev, k, k, v, beta, alpha)).max())
        eps = beta / (1 + beta * k @ k)
        got = pocp_solution("p_longhorn", S_prev, k, v, 1.0, beta, eye)
        dev["p_longhorn"] = max(dev["p_longhorn"], np.abs(got - step_online(S_prev, k, k, v, eps)).max())
        got = pocp_solution("key_precond_mamba2", S_prev, k, v, alpha, 1.0, eye)
        want = alpha * S_prev + np.outer(v, k)
        dev["key_precond_mamba2"] = max(dev["key_precond_mamba2"], np.abs(got - want).max())
        H = rng.standard_normal((int(rng.integers(0, 2 * d + 1)), d))
        G_prev = H.T @ H + rng.uniform(0.1, 2) * eye
        a = pocp_solution("p_longhorn", S_prev, k, v, 1.0, 1.0, np.linalg.inv(G_prev))
        b = pocp_solution("pgdn", S_prev, k, v, 1.0, 1.0, np.linalg.inv(G_prev + np.outer(k, k)))
        dev["longhorn_vs_pgdn"] = max(dev["longhorn_vs_pgdn"], np.abs(a - b).max() / (1 + np.abs(a).max()))
    return TheoremReport("pocp_reductions", max(dev.values()), trials, tol,
                         [{k: float(v) for k, v in dev.items()}])


def theorem1_sweep(configs=50, seed=0, tol=1e-8, max_d=32, max_T=256, lams=(0.1, 1.0, 10.0)):
    """check_theorem1 over random (d_k, d_v, T, lambda) draws."""
    rng = np.random.default_rng(seed)
    worst, details = 0.0, []
    for _ in range(configs):
        d = int(rng.integers(1, max_d + 1))
        dv = int(rng.integers(1, max_d + 1))
        T = int(rng.integers(1, max_T + 1))
        lam = float(rng.choice(lams))
        seq = SequenceBatch(rng.standard_normal((T, d)), rng.standard_normal((T, d)),
                            rng.standard_normal((T, dv)))
        rep = check_theorem1(seq, lam, tol)
        worst = max(worst, rep.max_deviation)
        details.extend(rep.details)
    return TheoremReport("theorem1", worst, configs, tol, details)
