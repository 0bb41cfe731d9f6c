import numpy as np
import pytest

from precdelta.recurrence import (DECAYS, PRECONDS, SOLVES, VARIANTS, RecurrenceConfig,
                                  SequenceBatch, online_as_dplr, random_sequence, run_sequential,
                                  step_dplr, step_offline, step_online, variant_config)


def test_single_step_values():
    S = np.zeros((2, 2))
    k = np.array([1.0, 0.0])
    v = np.array([2.0, 3.0])
    np.testing.assert_array_equal(step_offline(S, k, v, beta=0.5), [[1.0, 0.0], [1.5, 0.0]])
    # after writing v at k, the delta rule leaves v in place for the same key
    S1 = step_online(S, k, k, v, beta=1.0)
    np.testing.assert_array_equal(S1 @ k, v)
    S2 = step_online(S1, k, k, v, beta=1.0)
    np.testing.assert_array_equal(S2, S1)


def test_linear_attention_is_a_weighted_sum():
    rng = np.random.default_rng(0)
    T, d = 12, 3
    Q, K, V = rng.normal(size=(3, T, d))
    beta, alpha = rng.uniform(0.1, 1, T), rng.uniform(0.5, 1, T)
    cfg = RecurrenceConfig(d, d, "offline", "scalar", "none")
    O, _, _ = run_sequential(cfg, SequenceBatch(Q, K, V, beta, alpha))
    for t in range(T):
        S = sum(np.prod(alpha[s + 1:t + 1]) * beta[s] * np.outer(V[s], K[s]) for s in range(t + 1))
        np.testing.assert_allclose(O[t], S @ Q[t], rtol=1e-12)


def test_diagonal_decay_acts_on_key_columns():
    rng = np.random.default_rng(1)
    S = rng.normal(size=(2, 3))
    a = np.array([0.5, 1.0, 0.25])
    out = step_offline(S, np.zeros(3), np.zeros(2), alpha=a, diagonal=True)
    np.testing.assert_allclose(out, S @ np.diag(a))


def test_dplr_tying_reproduces_online_step():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        d, dv = rng.integers(1, 9, 2)
        S = rng.normal(size=(dv, d))
        k, kw = rng.normal(size=d), rng.normal(size=d)
        v = rng.normal(size=dv)
        beta, alpha = rng.uniform(0, 1), rng.uniform(0, 1)
        want = step_online(S, k, kw, v, beta, alpha)
        worst = max(worst, np.abs(step_dplr(S, online_as_dplr(k, kw, v, beta, alpha)) - want).max())
    assert worst < 1e-12


def test_dplr_swapped_tying_fails_for_generic_write_key():
    rng = np.random.default_rng(3)
    S = rng.normal(size=(3, 3))
    k, kw, v = rng.normal(size=(3, 3))
    step = online_as_dplr(k, kw, v, 0.7)
    swapped = type(step)(D=step.D, a=0.7 * kw, b=k, k=k, v=step.v)
    assert np.abs(step_dplr(S, swapped) - step_online(S, k, kw, v, 0.7)).max() > 1e-3


@pytest.mark.parametrize("solve", SOLVES)
@pytest.mark.parametrize("decay", DECAYS)
@pytest.mark.parametrize("precond", PRECONDS)
def test_batch_axes_match_per_sequence_runs(solve, decay, precond):
    rng = np.random.default_rng(4)
    cfg = RecurrenceConfig(3, 2, solve, decay, precond, normalize_qk=True)
    seqs = [random_sequence(cfg, 6, rng, init_state=True) for _ in range(3)]
    stacked = SequenceBatch(*(np.stack([getattr(s, f) for s in seqs])
                              for f in ("Q", "K", "V", "beta", "alpha", "beta_p", "alpha_p")),
                            mu=np.array([s.mu for s in seqs]), S0=np.stack([s.S0 for s in seqs]))
    O, S, _ = run_sequential(cfg, stacked)
    for i, s in enumerate(seqs):
        Oi, Si, _ = run_sequential(cfg, s)
        np.testing.assert_allclose(O[i], Oi, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(S[i], Si, rtol=1e-12, atol=1e-13)


def test_trace_records_every_step():
    rng = np.random.default_rng(5)
    cfg = RecurrenceConfig(4, 3, "online", "scalar", "diag_stable")
    O, S, tr = run_sequential(cfg, random_sequence(cfg, 7, rng))
    assert tr.S.shape == (8, 3, 4) and tr.A.shape == (8, 4) and tr.B.shape == (7, 4)
    np.testing.assert_array_equal(tr.S[-1], S)
    np.testing.assert_allclose(O, np.einsum("tij,tj->ti", tr.S[1:], tr.q_read))
    _, _, bare = run_sequential(cfg, random_sequence(cfg, 7, rng), record=False)
    assert bare.S is None


def test_float32_inputs_stay_float32():
    rng = np.random.default_rng(6)
    cfg = RecurrenceConfig(4, 4, "online", "none", "diag_stable")
    s = random_sequence(cfg, 5, rng)
    s32 = SequenceBatch(*(np.asarray(getattr(s, f), np.float32)
                          for f in ("Q", "K", "V", "beta", "alpha", "beta_p", "alpha_p")), mu=1.0)
    O, S, _ = run_sequential(cfg, s32)
    assert O.dtype == np.float32 and S.dtype == np.float32


@pytest.mark.parametrize("kwargs", [
    dict(d_k=0, d_v=2, solve="online", decay="none", precond="none"),
    dict(d_k=2, d_v=2, solve="sideways", decay="none", precond="none"),
    dict(d_k=2, d_v=2, solve="online", decay="none", precond="exact", lam=0.0),
    dict(d_k=2, d_v=2, solve="online", decay="none", precond="diag_stable", x=3.0),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        RecurrenceConfig(**kwargs)


def test_shape_errors():
    cfg = RecurrenceConfig(3, 2, "online", "scalar", "none")
    with pytest.raises(ValueError):
        run_sequential(cfg, SequenceBatch(np.ones((4, 3)), np.ones((4, 3)), np.ones((4, 3))))
    with pytest.raises(ValueError):
        run_sequential(cfg, SequenceBatch(np.ones((4, 3)), np.ones((4, 3)), np.ones((4, 2)),
                                          alpha=np.ones((4, 3))))


def test_variant_names():
    assert variant_config("pdn", 4).precond == "diag_stable"
    assert variant_config("pla", 4).precond == "diag_raw"
    assert variant_config("gdn", 4).precond == "none"
    assert variant_config("pgla", 4, precond="diag-stable").precond == "diag_stable"
    assert {VARIANTS[n] for n in ("kda", "pkda")} == {("online", "diagonal")}
    with pytest.raises(ValueError):
        variant_config("rwkv", 4)
