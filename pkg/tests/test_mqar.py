import math

import numpy as np
import pytest

from precdelta import mqar


def test_single_pair_layout():
    cfg = mqar.MqarConfig(vocab_size=16, num_kv_pairs=1, seq_len=4, num_examples=5, seed=0)
    data = mqar.generate_mqar(cfg)
    for toks, labs in zip(data.tokens, data.labels):
        k, v = toks[0], toks[1]
        assert list(toks) == [k, v, k, mqar.PAD]
        assert list(labs) == [mqar.IGNORE, mqar.IGNORE, v, mqar.IGNORE]


def test_key_and_value_vocabularies_are_disjoint():
    keys, values = mqar.vocab_split(64)
    assert not set(keys) & set(values)
    assert mqar.PAD not in set(keys) | set(values)
    data = mqar.generate_mqar(mqar.MqarConfig(64, 8, 32, 200, seed=1))
    N = 8
    assert np.isin(data.tokens[:, 0:2 * N:2], keys).all()
    assert np.isin(data.tokens[:, 1:2 * N:2], values).all()
    assert np.all(np.sort(data.tokens[:, 0:2 * N:2], axis=1)[:, 1:] != np.sort(data.tokens[:, 0:2 * N:2], axis=1)[:, :-1])


def test_generator_scan_ten_thousand_examples():
    data = mqar.generate_mqar(mqar.MqarConfig(64, 6, 24, 10_000, seed=2))
    assert mqar.check_dataset(data, 64)
    assert np.sum(data.labels != mqar.IGNORE) == 10_000 * 6


def test_scan_catches_a_query_before_its_pair():
    data = mqar.generate_mqar(mqar.MqarConfig(16, 1, 4, 1, seed=0))
    bad = mqar.MqarDataset(data.tokens.copy(), data.labels.copy())
    bad.tokens[0, 0] = bad.tokens[0, 2] % 7 + 1 if bad.tokens[0, 2] != 1 else 2
    assert not mqar.check_dataset(bad, 16)


def test_generation_is_deterministic():
    cfg = mqar.MqarConfig(64, 4, 64, 50, seed=9)
    a, b = mqar.generate_mqar(cfg), mqar.generate_mqar(cfg)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.labels, b.labels)
    c = mqar.generate_mqar(mqar.MqarConfig(64, 4, 64, 50, seed=10))
    assert not np.array_equal(a.tokens, c.tokens)


@pytest.mark.parametrize("kwargs", [
    dict(vocab_size=8, num_kv_pairs=4, seq_len=64),
    dict(vocab_size=64, num_kv_pairs=4, seq_len=11),
    dict(vocab_size=64, num_kv_pairs=0, seq_len=8),
    dict(vocab_size=64, num_kv_pairs=2, seq_len=8, num_queries=3),
])
def test_config_errors(kwargs):
    with pytest.raises(ValueError):
        mqar.MqarConfig(**kwargs)


def test_jsonl_roundtrip(tmp_path):
    data = mqar.generate_mqar(mqar.MqarConfig(32, 3, 12, 20, seed=3))
    path = tmp_path / "d.jsonl"
    mqar.save_jsonl(data, path)
    back = mqar.load_jsonl(path)
    assert np.array_equal(back.tokens, data.tokens) and np.array_equal(back.labels, data.labels)
    (tmp_path / "bad.jsonl").write_text('{"tokens": [1, 2], "labels": [1]}\n')
    with pytest.raises(ValueError):
        mqar.load_jsonl(tmp_path / "bad.jsonl")


def test_trim_keeps_labeled_prefix():
    data = mqar.generate_mqar(mqar.MqarConfig(64, 4, 64, 8, seed=4))
    t = mqar.trim(data)
    assert t.tokens.shape == (8, 12)
    assert np.sum(t.labels != mqar.IGNORE) == np.sum(data.labels != mqar.IGNORE)


def _small(variant, **kw):
    return mqar.TinyModel(mqar.ModelConfig(vocab_size=16, d_model=6, d_hidden=8, variant=variant, **kw),
                          seed=1)


@pytest.mark.parametrize("variant", ["dn", "pdn", "gdn", "pgdn", "kda", "pkda", "la", "pla", "pgla"])
def test_model_gradients_against_finite_differences(variant):
    model = _small(variant)
    data = mqar.generate_mqar(mqar.MqarConfig(16, 2, 6, 3, seed=0))
    _, _, grads = model.loss_and_grads(data.tokens, data.labels)
    assert set(grads) == set(model.params)
    rng = np.random.default_rng(0)
    h = 1e-6
    for name, p in model.params.items():
        for _ in range(2):
            i = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p[i]
            p[i] = old + h
            up = model.loss_and_grads(data.tokens, data.labels)[0]
            p[i] = old - h
            down = model.loss_and_grads(data.tokens, data.labels)[0]
            p[i] = old
            fd = (up - down) / (2 * h)
            an = grads[name][i]
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-5), (name, i, fd, an)


def test_gates_stay_in_range():
    model = _small("pgdn")
    x = np.random.default_rng(0).normal(size=(2, 5, 6)) * 3
    _, (_, _, _, _, _, _, gates) = model._mixer(0, x, "sequential", 16, True)
    for name in ("beta", "alpha", "betaP", "alphaP"):
        assert np.all((gates[name] > 0) & (gates[name] < 1)), name


def test_small_step_lowers_loss():
    model = _small("pdn")
    data = mqar.generate_mqar(mqar.MqarConfig(16, 2, 6, 16, seed=5))
    loss0, _, grads = model.loss_and_grads(data.tokens, data.labels)
    for name, g in grads.items():
        model.params[name] -= 1e-3 * g
    assert model.loss_and_grads(data.tokens, data.labels)[0] < loss0


def test_sequential_and_chunkwise_eval_agree():
    model = mqar.TinyModel(mqar.ModelConfig(vocab_size=32, d_model=8, d_hidden=8, variant="pgdn"), seed=2)
    data = mqar.generate_mqar(mqar.MqarConfig(32, 4, 16, 40, seed=6))
    seq_logits, _ = model.forward(data.tokens, record=False)
    accs = {mqar.evaluate(model, data, path="sequential")}
    for C in (1, 3, 16):
        chunk_logits, _ = model.forward(data.tokens, path="chunkwise", C=C, record=False)
        np.testing.assert_allclose(chunk_logits, seq_logits, atol=1e-9)
        accs.add(mqar.evaluate(model, data, path="chunkwise", C=C))
    assert len(accs) == 1


def test_fresh_model_is_near_chance():
    model = mqar.TinyModel(mqar.ModelConfig(vocab_size=64, d_model=16, d_hidden=16), seed=3)
    data = mqar.generate_mqar(mqar.MqarConfig(64, 4, 12, 500, seed=7))
    acc = mqar.evaluate(model, data)
    chance = 1 / 32
    se = math.sqrt(chance * (1 - chance) / 2000)
    assert acc < chance + 6 * se + 0.02


class _LookupModel:
    """Answers every query by scanning the prefix for its pair."""

    def forward(self, tokens, path="sequential", C=16, record=False):
        logits = np.zeros(tokens.shape + (16,))
        for b, row in enumerate(tokens):
            for t in range(2, len(row)):
                logits[b, t, row[1]] = 1.0 if row[t] == row[0] else 0.0
        return logits, None


def test_perfect_model_scores_one():
    data = mqar.generate_mqar(mqar.MqarConfig(16, 1, 4, 30, seed=8))
    assert mqar.evaluate(_LookupModel(), data) == 1.0


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 3, 5))
    labels = np.array([[1, -100, 4], [-100, -100, 0]])
    loss, acc, d = mqar.cross_entropy(logits, labels)
    h = 1e-6
    E = np.zeros_like(logits)
    E[0, 2, 3] = h
    fd = (mqar.cross_entropy(logits + E, labels)[0] - mqar.cross_entropy(logits - E, labels)[0]) / (2 * h)
    assert d[0, 2, 3] == pytest.approx(fd, rel=1e-6)
    assert np.all(d[0, 1] == 0)


def test_adamw_and_schedule():
    assert mqar.cosine_lr(0, 100, 1.0) == 1.0
    assert mqar.cosine_lr(100, 100, 1.0) == pytest.approx(0.0)
    assert mqar.cosine_lr(4, 100, 1.0, warmup=10) == pytest.approx(0.5)
    opt = mqar.AdamW(lr=0.1, weight_decay=0.0)
    p = {"w": np.array([[1.0]])}
    opt.step(p, {"w": np.array([[2.0]])}, 0.1)
    # first Adam step moves by lr in the sign direction
    assert p["w"][0, 0] == pytest.approx(0.9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_is_a_failure_record():
    model = _small("dn")
    model.params["out.b"][:] = np.nan
    data = mqar.generate_mqar(mqar.MqarConfig(16, 2, 6, 8, seed=10))
    res = mqar.train(model, data, mqar.TrainConfig(steps=5, batch_size=4))
    assert res.diverged and res.failure["step"] == 1


def test_short_training_run_improves_loss():
    model = _small("pdn")
    data = mqar.generate_mqar(mqar.MqarConfig(16, 1, 4, 256, seed=11))
    res = mqar.train(model, data, mqar.TrainConfig(steps=60, lr=1e-2, batch_size=16, eval_every=30))
    assert res.curve[-1]["loss"] < res.curve[1]["loss"]
    assert [c["step"] for c in res.curve] == [0, 30, 60]


def test_checkpoint_roundtrip(tmp_path):
    model = _small("pgdn")
    path = tmp_path / "m.ckpt"
    mqar.save_checkpoint(model, path, {"note": 1})
    back, header = mqar.load_checkpoint(path)
    assert back.cfg == model.cfg and header["extra"] == {"note": 1}
    for name, p in model.params.items():
        assert np.array_equal(back.params[name], p)
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        mqar.load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"nope" + raw[4:])
    with pytest.raises(ValueError):
        mqar.load_checkpoint(tmp_path / "junk.ckpt")


def test_exact_preconditioner_is_rejected():
    with pytest.raises(ValueError):
        mqar.TinyModel(mqar.ModelConfig(variant="pdn", precond="exact"))
