"""Command-line front end.

    precdelta verify --suite {equivalence,theorem1,theorem2,eigs,pocp,gradcheck,counterexample,all}
    precdelta bench --variant pgdn --precond diag-stable --T 4096 --C 32 64
    precdelta mqar {gen,train,eval} ...

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or config error.
Reports carry the tool version, an echo of the effective config and a
sha256 of its canonical JSON; verify reports contain no timings, so equal
seeds give byte-identical files.
"""
import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__, mqar
from . import theory as th
from .autograd import gradient_grid
from .chunkwise import check_equivalence, full_chunkwise_run
from .recurrence import VARIANTS, SequenceBatch, run_sequential, variant_config

SUITES = ("equivalence", "theorem1", "theorem2", "eigs", "pocp", "gradcheck", "counterexample")
PRECONDS = ("none", "exact", "diag-raw", "diag-stable")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- output

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def envelope(command, config):
    echo = _clean(config)
    digest = hashlib.sha256(json.dumps(echo, sort_keys=True).encode()).hexdigest()
    return {"tool_version": __version__, "command": command, "config_echo": echo,
            "input_hash": "sha256:" + digest}


def _check(name, max_deviation, tol, passed=None, **details):
    ok = bool(max_deviation < tol) if passed is None else bool(passed)
    rec = {"name": name, "max_deviation": float(max_deviation), "tol": tol, "pass": ok}
    if details:
        rec["details"] = details
    return rec


# ---------------------------------------------------------------- verify

def suite_equivalence(a):
    worst = check_equivalence(instances=a.trials or 200, seed=a.seed)
    return [_check(f"equivalence/{s}/{d}/{p}", dev, 1e-10) for (s, d, p), dev in worst.items()]


def suite_theorem1(a):
    if a.d or a.T or a.lam is not None:
        rng = np.random.default_rng(a.seed)
        d, T = a.d or 8, a.T or 64
        dv = a.dv or d
        seq = SequenceBatch(rng.standard_normal((T, d)), rng.standard_normal((T, d)),
                            rng.standard_normal((T, dv)))
        rep = th.check_theorem1(seq, 1.0 if a.lam is None else a.lam)
    else:
        rep = th.theorem1_sweep(configs=a.trials or 50, seed=a.seed)
    lo, hi = th.write_key_bound(trials=10000, seed=a.seed)
    return [_check("theorem1/state_and_outputs", rep.max_deviation, rep.tol, samples=rep.samples),
            _check("theorem1/write_key_in_unit_interval", max(-lo, hi - 1.0, 0.0), 0.0,
                   passed=lo >= 0 and hi <= 1, min=lo, max=hi)]


def suite_theorem2(a):
    checks = []
    for d in ([a.d] if a.d else [4, 8]):
        recs = th.theorem2_montecarlo(d, 4 * d, a.trials or 10000, seed=a.seed)
        z = max(abs(r["E_LA"] - r["closed_form_LA"]) / r["se_LA"] for r in recs)
        gap = max(r["E_DN"] - r["E_LA"] for r in recs if r["t"] >= d + 1)
        exact = max(r["E_exact"] for r in recs)
        checks += [
            _check(f"theorem2/d{d}/la_closed_form_z", z, 3.0, passed=z <= 3.0, records=recs),
            _check(f"theorem2/d{d}/dn_le_la", max(gap, 0.0), 0.0, passed=gap <= 0.0),
            _check(f"theorem2/d{d}/exact_recurrence", exact, 1e-16),
        ]
    return checks


def suite_eigs(a):
    n = a.trials or 10000
    e = th.check_eigs(trials=n, seed=a.seed)
    u = th.check_unit_disk(x=a.x if a.x is not None else 2.0, trials=n, seed=a.seed)
    v = th.unit_disk_violation(x=3.0)
    return [_check("eigs/trace_det_residual", e.max_deviation, e.tol),
            _check("eigs/unit_disk_excess", u.max_deviation, u.tol, **u.details[0]),
            _check("eigs/constructed_negative_write_eig", max(v["lambda_write"], 0.0), 0.0,
                   passed=v["negative"], lambda_write=v["lambda_write"])]


def suite_pocp(a):
    rng = np.random.default_rng(a.seed)
    d, dv = a.d or 4, a.dv or a.d or 3
    checks = []
    for variant in ("pgdn", "p_longhorn", "key_precond_mamba2"):
        H = rng.standard_normal((2 * d, d))
        P = np.linalg.inv(H.T @ H + np.eye(d))
        rep = th.pocp_verify(variant, rng.standard_normal((dv, d)), rng.standard_normal(d),
                             rng.standard_normal(dv), rng.uniform(0.5, 1), rng.uniform(0.1, 1),
                             0.5 * (P + P.T))
        checks.append(_check(f"pocp/{variant}/fd_grad_norm", rep.max_deviation, rep.tol))
    red = th.pocp_reductions(seed=a.seed)
    checks.append(_check("pocp/identity_reductions", red.max_deviation, red.tol, **red.details[0]))
    return checks


def suite_gradcheck(a):
    recs = gradient_grid(seed=a.seed)
    worst = max(r["max_rel_err"] for r in recs)
    failed = [r for r in recs if not r["pass"]]
    return [_check("gradcheck/grid", worst, 1e-5, passed=not failed, instances=len(recs),
                   failures=len(failed))]


def suite_counterexample(a):
    S_apla, S_apdn, differ = th.counterexample_d2()
    dev = max(np.abs(S_apla - 0.5).max(), np.abs(S_apdn - 1.0 / 3.0).max())
    Sp, Sd = th.counterexample_exact()
    return [_check("counterexample/diagonal_values", dev, 0.0, passed=dev == 0 and differ,
                   S_apla=S_apla.tolist(), S_apdn=S_apdn.tolist()),
            _check("counterexample/exact_gram_agrees", np.abs(Sp - Sd).max(), 1e-15)]


def cmd_verify(a):
    suites = SUITES if a.suite == "all" else (a.suite,)
    checks = []
    for name in suites:
        checks += globals()["suite_" + name](a)
    failed = [c["name"] for c in checks if not c["pass"]]
    config = {"suite": a.suite, "seed": a.seed, "trials": a.trials, "d": a.d, "dv": a.dv,
              "T": a.T, "lambda": a.lam, "x": a.x}
    report = envelope("verify", config)
    report.update({"pass": not failed, "first_failure": failed[0] if failed else None, "checks": checks})
    if a.format == "csv":
        text = _csv(checks, ["name", "max_deviation", "tol", "pass"])
    else:
        text = json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"
    _emit(text, a.out)
    if failed:
        print(f"FAILED: {failed[0]}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- bench

def _median_ns(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def cmd_bench(a):
    if a.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    d = a.d or 64
    cfg = _recurrence(a, d)
    rng = np.random.default_rng(a.seed)
    rows = []
    for T in a.T_list or [4096]:
        seq = SequenceBatch(rng.standard_normal((T, d)), rng.standard_normal((T, d)),
                            rng.standard_normal((T, cfg.d_v)), rng.uniform(0, 1, T),
                            rng.uniform(0.9, 1, (T, d) if cfg.decay == "diagonal" else T),
                            rng.uniform(0, 1, T), rng.uniform(0.9, 1, T))
        seq_ns = _median_ns(lambda: run_sequential(cfg, seq, record=False), a.repeats, a.warmup)
        for C in a.C_list or [32]:
            ns = _median_ns(lambda: full_chunkwise_run(cfg, seq, C), a.repeats, a.warmup)
            rows.append({"variant": a.variant, "T": T, "C": C, "median_ns": ns,
                         "sequential_ns": seq_ns, "noisy": a.repeats == 1})
    if a.format == "json":
        rep = envelope("bench", {"variant": a.variant, "precond": cfg.precond, "d": d,
                                 "repeats": a.repeats, "seed": a.seed})
        rep["rows"] = rows
        text = json.dumps(_clean(rep), indent=2, sort_keys=True) + "\n"
    else:
        text = _csv(rows, ["variant", "T", "C", "median_ns", "sequential_ns", "noisy"])
    _emit(text, a.out)
    return 0


def _recurrence(a, d):
    precond = None if a.precond is None else a.precond
    kw = {}
    if a.lam is not None:
        kw["lam"] = a.lam
    if a.x is not None:
        kw["x"] = a.x
    try:
        return variant_config(a.variant, d, a.dv or d, precond=precond, normalize_qk=True, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- mqar

def _data_cfg(a, n, seed):
    try:
        return mqar.MqarConfig(a.vocab, a.pairs, a.len, n, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _model_cfg(a):
    d = a.d or 64
    try:
        cfg = mqar.ModelConfig(vocab_size=a.vocab, d_model=d, d_hidden=2 * d, variant=a.variant,
                               precond=a.precond.replace("-", "_") if a.precond else None,
                               x=1.5 if a.x is None else a.x,
                               lam=1e-4 if a.lam is None else a.lam)
        cfg.recurrence()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _load(path):
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")
    return mqar.load_jsonl(path)


def cmd_mqar(a):
    if a.mode == "gen":
        data = mqar.generate_mqar(_data_cfg(a, a.n, a.seed))
        mqar.save_jsonl(data, a.out or "mqar.jsonl")
        return 0

    if a.mode == "train":
        cfg = _model_cfg(a)
        model = mqar.TinyModel(cfg, seed=a.seed, dtype=a.dtype)
        train = _load(a.data) if a.data else mqar.generate_mqar(_data_cfg(a, a.n, 1000 + a.seed))
        held = mqar.generate_mqar(_data_cfg(a, a.eval_n, 2000 + a.seed))
        tcfg = mqar.TrainConfig(steps=a.steps, lr=a.lr, batch_size=a.batch, seed=a.seed,
                                eval_every=a.eval_every, target_accuracy=a.target_acc,
                                dtype=a.dtype)
        res = mqar.train(model, train, tcfg, held)
        out = a.out or "mqar_run"
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "curve.csv"), "w", newline="") as fh:
            fh.write(_csv(res.curve, ["step", "loss", "accuracy"]))
        mqar.save_checkpoint(model, os.path.join(out, "model.ckpt"), {"steps_run": res.steps_run})
        report = envelope("mqar train", _mqar_echo(a, cfg, tcfg))
        report.update({"final_accuracy": res.final_accuracy, "steps_run": res.steps_run,
                       "failure": res.failure, "seconds": round(res.seconds, 3)})
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            fh.write(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")
        return 1 if res.diverged else 0

    # eval
    if a.checkpoint:
        if not os.path.exists(a.checkpoint):
            raise UsageError(f"no such file: {a.checkpoint}")
        model, header = mqar.load_checkpoint(a.checkpoint)
        cfg = model.cfg
    else:
        cfg = _model_cfg(a)
        model = mqar.TinyModel(cfg, seed=a.seed)
    data = _load(a.data) if a.data else mqar.generate_mqar(_data_cfg(a, a.eval_n, 2000 + a.seed))
    acc = mqar.evaluate(model, data, path=a.path, C=a.C_list[0] if a.C_list else 16)
    n_q = int(np.sum(data.labels != mqar.IGNORE))
    chance = 1.0 / len(mqar.vocab_split(cfg.vocab_size)[1])
    report = envelope("mqar eval", {"checkpoint": a.checkpoint, "data": a.data, "path": a.path,
                                    "model": asdict(cfg), "seed": a.seed})
    report.update({"accuracy": acc, "queries": n_q, "chance_level": chance,
                   "binomial_se_at_chance": math.sqrt(chance * (1 - chance) / max(n_q, 1))})
    _emit(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n", a.out)
    return 0


def _mqar_echo(a, cfg, tcfg):
    return {"model": asdict(cfg), "train": asdict(tcfg),
            "data": {"vocab": a.vocab, "pairs": a.pairs, "len": a.len, "n": a.n,
                     "eval_n": a.eval_n, "file": a.data}}


# ---------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    p.add_argument("--precond", choices=PRECONDS, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--dv", type=int, default=None)
    p.add_argument("--T", dest="T", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--x", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default=None)
    p.add_argument("--config", default=None, help="JSON file of option defaults")


def build_parser():
    parser = argparse.ArgumentParser(prog="precdelta", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run numerical verification suites")
    v.add_argument("--suite", choices=SUITES + ("all",), required=True)
    _common(v)
    v.set_defaults(func=cmd_verify, format="json")

    b = sub.add_parser("bench", help="time chunkwise against sequential")
    _common(b)
    b.add_argument("--Ts", dest="T_list", type=int, nargs="+", default=None,
                   help="sequence lengths (default: --T or 4096)")
    b.add_argument("--C", dest="C_list", type=int, nargs="+", default=None)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.set_defaults(func=cmd_bench, variant="pgdn", format="csv")

    m = sub.add_parser("mqar", help="associative recall data, training and evaluation")
    m.add_argument("mode", choices=("gen", "train", "eval"))
    _common(m)
    m.add_argument("--pairs", type=int, default=4)
    m.add_argument("--len", type=int, default=64)
    m.add_argument("--vocab", type=int, default=64)
    m.add_argument("--n", type=int, default=20000, help="examples to generate / train on")
    m.add_argument("--eval-n", dest="eval_n", type=int, default=1000)
    m.add_argument("--data", default=None, help="JSONL dataset (train or eval)")
    m.add_argument("--checkpoint", default=None)
    m.add_argument("--steps", type=int, default=3000)
    m.add_argument("--lr", type=float, default=1e-3)
    m.add_argument("--batch", type=int, default=64)
    m.add_argument("--eval-every", dest="eval_every", type=int, default=100)
    m.add_argument("--target-acc", dest="target_acc", type=float, default=None)
    m.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    m.add_argument("--path", choices=("sequential", "chunkwise"), default="sequential")
    m.add_argument("--C", dest="C_list", type=int, nargs="+", default=None)
    m.set_defaults(func=cmd_mqar, variant="dn")
    return parser, {"verify": v, "bench": b, "mqar": m}


def parse(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        if not os.path.exists(args.config):
            parser.error(f"config file not found: {args.config}")
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            parser.error(f"config file is not valid JSON: {exc}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        sp = subs[args.command]
        known = {act.dest for act in sp._actions} - {"help", "config", "mode", "suite"}
        unknown = sorted(set(cfg) - known)
        if unknown:
            parser.error(f"unknown config fields: {', '.join(unknown)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)  # explicit flags still win
    if args.command == "bench" and args.T_list is None and args.T is not None:
        args.T_list = [args.T]
    for name in ("d", "dv", "T", "trials"):
        val = getattr(args, name, None)
        if val is not None and val < 1:
            parser.error(f"--{name} must be positive")
    return args


def main(argv=None):
    args = parse(sys.argv[1:] if argv is None else argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"precdelta: error: {exc}", file=sys.stderr)
        return 2
