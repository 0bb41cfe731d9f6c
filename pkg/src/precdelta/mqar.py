"""Multi-query associative recall at desk scale.

Data layout per example: N (key, value) pairs as alternating tokens, then
queries (each key once, shuffled) whose labels are the paired values, then
padding. Token 0 is padding; keys and values use disjoint id ranges.

The model is embedding -> [mixer, gated MLP] x 2 -> readout, with residual
connections and no normalization layers. Mixers run the recurrences from
`recurrence`/`chunkwise`; gradients come from `autograd` plus the dense-layer
backward written out here.
"""
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import backward_sequential
from .chunkwise import full_chunkwise_run
from .recurrence import SequenceBatch, run_sequential, variant_config

IGNORE = -100
PAD = 0
CKPT_MAGIC = b"PDCK"


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class MqarConfig:
    vocab_size: int = 64
    num_kv_pairs: int = 4
    seq_len: int = 64
    num_examples: int = 1000
    seed: int = 0
    num_queries: int = None  # defaults to num_kv_pairs

    def __post_init__(self):
        if self.num_kv_pairs < 1 or self.num_examples < 0:
            raise ValueError("need at least one pair and a non-negative example count")
        nq = self.queries
        if not 1 <= nq <= self.num_kv_pairs:
            raise ValueError(f"num_queries must be in [1, {self.num_kv_pairs}], got {nq}")
        if self.seq_len < 2 * self.num_kv_pairs + nq:
            raise ValueError(f"seq_len {self.seq_len} < 2*pairs + queries = "
                             f"{2 * self.num_kv_pairs + nq}")
        keys, values = vocab_split(self.vocab_size)
        if len(keys) < self.num_kv_pairs or len(values) < 1:
            raise ValueError(f"vocab {self.vocab_size} too small for {self.num_kv_pairs} distinct keys")

    @property
    def queries(self):
        return self.num_kv_pairs if self.num_queries is None else self.num_queries


def vocab_split(vocab_size):
    """Key ids and value ids: [1, 1 + n_keys) and [1 + n_keys, vocab_size)."""
    n_keys = (vocab_size - 1) // 2
    return np.arange(1, 1 + n_keys), np.arange(1 + n_keys, vocab_size)


@dataclass
class MqarDataset:
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, idx):
        return MqarDataset(self.tokens[idx], self.labels[idx])


def generate_mqar(cfg):
    rng = np.random.default_rng(cfg.seed)
    keys, values = vocab_split(cfg.vocab_size)
    n, N, nq = cfg.num_examples, cfg.num_kv_pairs, cfg.queries
    tokens = np.full((n, cfg.seq_len), PAD, dtype=np.int64)
    labels = np.full((n, cfg.seq_len), IGNORE, dtype=np.int64)
    # distinct keys per example via argsort of uniforms; values may repeat
    k = keys[np.argsort(rng.random((n, len(keys))), axis=1)[:, :N]]
    v = rng.choice(values, size=(n, N))
    tokens[:, 0:2 * N:2] = k
    tokens[:, 1:2 * N:2] = v
    order = np.argsort(rng.random((n, N)), axis=1)[:, :nq]
    rows = np.arange(n)[:, None]
    tokens[:, 2 * N:2 * N + nq] = k[rows, order]
    labels[:, 2 * N:2 * N + nq] = v[rows, order]
    return MqarDataset(tokens, labels)


def check_dataset(data, vocab_size):
    """Scan every example: each labeled position holds a key seen exactly once
    before it, and the label is the token that followed that key."""
    keys, _ = vocab_split(vocab_size)
    key_set = set(keys.tolist())
    for toks, labs in zip(data.tokens.tolist(), data.labels.tolist()):
        for pos, lab in enumerate(labs):
            if lab == IGNORE:
                continue
            q = toks[pos]
            if q not in key_set:
                return False
            seen = [i for i in range(pos) if toks[i] == q and labs[i] == IGNORE]
            if len(seen) != 1 or toks[seen[0] + 1] != lab:
                return False
    return True


def save_jsonl(data, path):
    with open(path, "w") as fh:
        for toks, labs in zip(data.tokens.tolist(), data.labels.tolist()):
            fh.write(json.dumps({"tokens": toks, "labels": labs}) + "\n")


def load_jsonl(path):
    toks, labs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if set(rec) != {"tokens", "labels"} or len(rec["tokens"]) != len(rec["labels"]):
                raise ValueError(f"{path}:{lineno}: malformed record")
            toks.append(rec["tokens"])
            labs.append(rec["labels"])
    if len({len(t) for t in toks}) > 1:
        raise ValueError(f"{path}: records have different lengths")
    return MqarDataset(np.array(toks, dtype=np.int64), np.array(labs, dtype=np.int64))


def trim(data):
    """Drop trailing columns after the last labeled position.

    The model is causal, so logits at labeled positions do not depend on
    later tokens and the trimmed batch gives identical loss and gradients.
    """
    cols = np.nonzero(np.any(data.labels != IGNORE, axis=0))[0]
    end = int(cols[-1]) + 1 if len(cols) else 1
    return MqarDataset(data.tokens[:, :end], data.labels[:, :end])


# ---------------------------------------------------------------- model

def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z):
    return np.logaddexp(0.0, z)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    d_hidden: int = 128
    variant: str = "dn"
    precond: str = None
    x: float = 1.5
    lam: float = 1e-4
    n_layers: int = 2
    alpha_bias: float = 4.0  # initial decay gates exp(-softplus(-4)) ~ 0.98

    def recurrence(self):
        return variant_config(self.variant, self.d_model, precond=self.precond,
                              x=self.x, lam=self.lam, normalize_qk=True)


def init_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    D, H, V = cfg.d_model, cfg.d_hidden, cfg.vocab_size
    rc = cfg.recurrence()

    def dense(fan_in, fan_out, scale=1.0):
        return rng.standard_normal((fan_in, fan_out)) * scale / math.sqrt(fan_in)

    p = {"embed": rng.standard_normal((V, D))}
    for l in range(cfg.n_layers):
        m = f"mix{l}."
        for name in ("Wq", "Wk", "Wv"):
            p[m + name] = dense(D, D)
        p[m + "Wo"] = dense(D, D, 0.5)
        p[m + "beta.w"] = dense(D, 1)[:, 0]
        p[m + "beta.b"] = np.zeros(())
        if rc.decay == "scalar":
            p[m + "alpha.w"] = dense(D, 1)[:, 0]
            p[m + "alpha.b"] = np.full((), -cfg.alpha_bias)
        elif rc.decay == "diagonal":
            p[m + "alpha.w"] = dense(D, D)
            p[m + "alpha.b"] = np.full((D,), -cfg.alpha_bias)
        if rc.precond.startswith("diag"):
            p[m + "betaP.w"] = dense(D, 1)[:, 0]
            p[m + "betaP.b"] = np.zeros(())
            p[m + "alphaP.w"] = dense(D, 1)[:, 0]
            p[m + "alphaP.b"] = np.full((), -cfg.alpha_bias)
        if rc.precond == "diag_stable":
            p[m + "mu_raw"] = np.zeros(())
        f = f"mlp{l}."
        p[f + "W1"] = dense(D, H)
        p[f + "W2"] = dense(D, H)
        p[f + "W3"] = dense(H, D, 0.5)
    p["out.W"] = dense(D, V)
    p["out.b"] = np.zeros(V)
    return p


def _bt(a, b):
    """Sum over batch and time of a[..., i] b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


class TinyModel:
    def __init__(self, cfg, seed=0, params=None, dtype=np.float64):
        self.cfg = cfg
        self.rcfg = cfg.recurrence()
        if self.rcfg.precond == "exact":
            raise ValueError("the exact preconditioner has no gradient path; pick none/diag-raw/diag-stable")
        self.seed = seed
        self.params = init_params(cfg, seed) if params is None else params
        self.dtype = np.dtype(dtype)

    def num_params(self):
        return sum(a.size for a in self.params.values())

    # -- forward

    def _mixer(self, l, x, path, C, record):
        p = {k[len(f"mix{l}."):]: v.astype(self.dtype, copy=False)
             for k, v in self.params.items() if k.startswith(f"mix{l}.")}
        rc = self.rcfg
        z = {"beta": x @ p["beta.w"] + p["beta.b"]}
        gates = {"beta": sigmoid(z["beta"])}
        if rc.decay != "none":
            z["alpha"] = x @ p["alpha.w"] + p["alpha.b"]
            gates["alpha"] = np.exp(-softplus(z["alpha"]))
        if rc.precond.startswith("diag"):
            z["betaP"] = x @ p["betaP.w"] + p["betaP.b"]
            gates["betaP"] = sigmoid(z["betaP"])
            z["alphaP"] = x @ p["alphaP.w"] + p["alphaP.b"]
            gates["alphaP"] = np.exp(-softplus(z["alphaP"]))
        mu = np.exp(p["mu_raw"]) if "mu_raw" in p else 1.0
        seq = SequenceBatch(x @ p["Wq"], x @ p["Wk"], x @ p["Wv"], gates["beta"],
                            gates.get("alpha"), gates.get("betaP"), gates.get("alphaP"), mu)
        tape = None
        if path == "sequential":
            O, _, tape = run_sequential(rc, seq, record=record)
        elif path == "chunkwise":
            O, _ = full_chunkwise_run(rc, seq, C)
        else:
            raise ValueError(f"unknown path {path!r}")
        return O @ p["Wo"], (x, p, seq, tape, O, z, gates)

    def _mlp(self, l, x):
        W1, W2, W3 = (self.params[f"mlp{l}.{n}"].astype(self.dtype, copy=False)
                      for n in ("W1", "W2", "W3"))
        a, b = x @ W1, x @ W2
        sa = sigmoid(a)
        h = a * sa * b
        return h @ W3, (x, a, b, sa, h, W1, W2, W3)

    def forward(self, tokens, path="sequential", C=16, record=True):
        """Logits (B, T, vocab) and a cache for backward."""
        x = self.params["embed"][tokens].astype(self.dtype)
        caches = []
        for l in range(self.cfg.n_layers):
            y, c = self._mixer(l, x, path, C, record)
            x = x + y
            caches.append(c)
            y, c = self._mlp(l, x)
            x = x + y
            caches.append(c)
        W = self.params["out.W"].astype(self.dtype, copy=False)
        logits = x @ W + self.params["out.b"].astype(self.dtype, copy=False)
        return logits, (tokens, x, caches)

    # -- backward

    def _mixer_back(self, l, dy, cache, grads):
        x, p, seq, tape, O, z, gates = cache
        rc, m = self.rcfg, f"mix{l}."
        grads[m + "Wo"] = _bt(O, dy)
        dO = dy @ p["Wo"].T
        g = backward_sequential(rc, seq, tape, dO)
        dx = g.dQ @ p["Wq"].T + g.dK @ p["Wk"].T + g.dV @ p["Wv"].T
        grads[m + "Wq"], grads[m + "Wk"], grads[m + "Wv"] = _bt(x, g.dQ), _bt(x, g.dK), _bt(x, g.dV)

        def gate_back(name, dgate, kind):
            if kind == "sigmoid":
                dz = dgate * gates[name] * (1.0 - gates[name])
            else:  # exp(-softplus(z))
                dz = -dgate * gates[name] * sigmoid(z[name])
            w = p[name + ".w"]
            if w.ndim == 1:
                grads[m + name + ".w"] = dz.reshape(-1) @ x.reshape(-1, x.shape[-1])
                grads[m + name + ".b"] = np.sum(dz)
                return dz[..., None] * w
            grads[m + name + ".w"] = _bt(x, dz)
            grads[m + name + ".b"] = np.sum(dz, axis=(0, 1))
            return dz @ w.T

        dx = dx + gate_back("beta", g.dbeta, "sigmoid")
        if rc.decay != "none":
            dx = dx + gate_back("alpha", g.dalpha, "decay")
        if rc.precond.startswith("diag"):
            dx = dx + gate_back("betaP", g.dbetaP, "sigmoid")
            dx = dx + gate_back("alphaP", g.dalphaP, "decay")
        if rc.precond == "diag_stable":
            grads[m + "mu_raw"] = np.sum(g.dmu_raw)
        return dx

    def _mlp_back(self, l, dy, cache, grads):
        x, a, b, sa, h, W1, W2, W3 = cache
        f = f"mlp{l}."
        grads[f + "W3"] = _bt(h, dy)
        dh = dy @ W3.T
        da = dh * b * sa * (1.0 + a * (1.0 - sa))
        db = dh * a * sa
        grads[f + "W1"], grads[f + "W2"] = _bt(x, da), _bt(x, db)
        return da @ W1.T + db @ W2.T

    def backward(self, cache, dlogits):
        tokens, x_last, caches = cache
        grads = {}
        W = self.params["out.W"].astype(self.dtype, copy=False)
        grads["out.W"] = _bt(x_last, dlogits)
        grads["out.b"] = np.sum(dlogits, axis=(0, 1))
        dx = dlogits @ W.T
        for l in reversed(range(self.cfg.n_layers)):
            dx = dx + self._mlp_back(l, dx, caches[2 * l + 1], grads)
            dx = dx + self._mixer_back(l, dx, caches[2 * l], grads)
        gE = np.zeros_like(self.params["embed"])
        np.add.at(gE, tokens, dx.astype(np.float64))
        grads["embed"] = gE
        return {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}

    def loss_and_grads(self, tokens, labels):
        logits, cache = self.forward(tokens)
        loss, acc, dlogits = cross_entropy(logits, labels)
        return loss, acc, self.backward(cache, dlogits)


def cross_entropy(logits, labels):
    """Mean CE and accuracy over labeled positions, plus d loss / d logits."""
    mask = labels != IGNORE
    n = max(int(mask.sum()), 1)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    safe = np.where(mask, labels, 0)
    picked = np.take_along_axis(z, safe[..., None], axis=-1)[..., 0]
    loss = float(np.sum((lse - picked)[mask]) / n)
    acc = float(np.sum((np.argmax(logits, axis=-1) == labels) & mask) / n)
    d = np.exp(z - lse[..., None])
    d[np.nonzero(mask) + (safe[mask],)] -= 1.0
    d *= (mask / n)[..., None]
    return loss, acc, d


# ---------------------------------------------------------------- training

@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if p.ndim >= 2:  # decoupled decay on matrices only
                p *= 1 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step, steps, lr, warmup=0):
    if warmup and step < warmup:
        return lr * (step + 1) / warmup
    frac = (step - warmup) / max(steps - warmup, 1)
    return 0.5 * lr * (1.0 + math.cos(math.pi * min(frac, 1.0)))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.01
    warmup: int = 50
    clip: float = 1.0
    eval_every: int = 100
    seed: int = 0
    target_accuracy: float = None  # stop early once eval accuracy exceeds this
    dtype: str = "float64"


@dataclass
class TrainResult:
    curve: list
    final_accuracy: float
    steps_run: int
    seconds: float
    failure: dict = None

    @property
    def diverged(self):
        return self.failure is not None


def evaluate(model, data, path="sequential", C=16, batch_size=256):
    """Exact-match accuracy over labeled positions."""
    hits = total = 0
    for i in range(0, len(data), batch_size):
        b = trim(data[i:i + batch_size])
        logits, _ = model.forward(b.tokens, path=path, C=C, record=False)
        mask = b.labels != IGNORE
        hits += int(np.sum((np.argmax(logits, axis=-1) == b.labels) & mask))
        total += int(mask.sum())
    return hits / max(total, 1)


def train(model, data, tcfg, eval_data=None, log=None):
    """Mini-batch AdamW with cosine decay.

    The curve records (step, loss, accuracy) at every eval interval, with
    accuracy measured on `eval_data` (or the training set if absent). A
    non-finite loss stops training and is reported in `failure`.
    """
    rng = np.random.default_rng(tcfg.seed)
    opt = AdamW(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    eval_data = data if eval_data is None else eval_data
    curve, losses = [], []
    t0 = time.perf_counter()
    acc = evaluate(model, eval_data)
    curve.append({"step": 0, "loss": float("nan"), "accuracy": acc})
    step = 0
    for step in range(1, tcfg.steps + 1):
        idx = rng.integers(0, len(data), tcfg.batch_size)
        b = trim(data[idx])
        loss, _, grads = model.loss_and_grads(b.tokens, b.labels)
        if not math.isfinite(loss):
            return TrainResult(curve, acc, step, time.perf_counter() - t0,
                               {"step": step, "reason": "non-finite loss"})
        losses.append(loss)
        if tcfg.clip:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > tcfg.clip:
                for g in grads.values():
                    g *= tcfg.clip / norm
        opt.step(model.params, grads, cosine_lr(step - 1, tcfg.steps, tcfg.lr, tcfg.warmup))
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            acc = evaluate(model, eval_data)
            curve.append({"step": step, "loss": float(np.mean(losses)), "accuracy": acc})
            losses = []
            if log:
                log(curve[-1])
            if tcfg.target_accuracy is not None and acc > tcfg.target_accuracy:
                break
    return TrainResult(curve, acc, step, time.perf_counter() - t0)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model, path, extra=None):
    """Magic, u64 header length, JSON header, then float64 little-endian params."""
    names = sorted(model.params)
    header = {"config": asdict(model.cfg), "seed": model.seed,
              "shapes": [[n, list(model.params[n].shape)] for n in names], "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(blob)) + blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    flat = np.frombuffer(raw[12 + n:], dtype="<f8")
    params, off = {}, 0
    for name, shape in header["shapes"]:
        size = int(np.prod(shape))
        if off + size > flat.size:
            raise ValueError(f"{path}: truncated parameter data")
        params[name] = flat[off:off + size].reshape(shape).astype(np.float64)
        off += size
    if off != flat.size:
        raise ValueError(f"{path}: trailing bytes after parameters")
    return TinyModel(ModelConfig(**header["config"]), header["seed"], params), header
