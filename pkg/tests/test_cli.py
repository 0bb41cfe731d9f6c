import csv
import io
import json

import pytest

from precdelta import __version__
from precdelta.cli import main


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_counterexample_report(capsys):
    code, out, _ = run(["verify", "--suite", "counterexample"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["pass"] and rep["tool_version"] == __version__
    assert rep["input_hash"].startswith("sha256:")
    diag = rep["checks"][0]
    assert diag["details"]["S_apla"] == [[0.5, 0.5], [0.5, 0.5]]
    assert diag["details"]["S_apdn"] == [[1 / 3, 1 / 3], [1 / 3, 1 / 3]]
    assert diag["max_deviation"] == 0.0


def test_theorem1_single_config(capsys):
    code, out, _ = run(["verify", "--suite", "theorem1", "--d", "8", "--T", "64", "--lambda", "1"], capsys)
    assert code == 0
    rep = json.loads(out)
    first = rep["checks"][0]
    assert first["max_deviation"] < 1e-9
    assert rep["config_echo"]["d"] == 8


def test_reports_are_deterministic(capsys):
    argv = ["verify", "--suite", "eigs", "--seed", "3"]
    _, a, _ = run(argv, capsys)
    _, b, _ = run(argv, capsys)
    assert a == b


def test_csv_format(capsys):
    code, out, _ = run(["verify", "--suite", "counterexample", "--format", "csv"], capsys)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["pass"] for r in rows] == ["true", "true"]


def test_bench_single_repeat_is_flagged_noisy(capsys):
    code, out, _ = run(["bench", "--variant", "pgdn", "--precond", "diag-stable", "--Ts", "64",
                        "--C", "8", "16", "--repeats", "1", "--warmup", "0", "--d", "8"], capsys)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 2
    assert all(r["noisy"] == "true" for r in rows)
    assert all(int(r["median_ns"]) > 0 for r in rows)


def test_mqar_gen_writes_requested_records(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    code, _, _ = run(["mqar", "gen", "--pairs", "4", "--len", "64", "--n", "10000", "--seed", "1",
                      "--out", str(path)], capsys)
    assert code == 0
    lines = path.read_text().splitlines()
    assert len(lines) == 10000
    rec = json.loads(lines[0])
    assert len(rec["tokens"]) == 64


def test_mqar_eval_fresh_model_reports_chance(tmp_path, capsys):
    code, out, _ = run(["mqar", "eval", "--d", "16", "--eval-n", "200"], capsys)
    rep = json.loads(out)
    assert code == 0
    assert rep["chance_level"] == pytest.approx(1 / 32)
    assert rep["accuracy"] < rep["chance_level"] + 6 * rep["binomial_se_at_chance"] + 0.02


def test_mqar_train_then_eval(tmp_path, capsys):
    out_dir = tmp_path / "run"
    code, _, _ = run(["mqar", "train", "--variant", "pdn", "--d", "8", "--pairs", "1", "--len", "4",
                      "--vocab", "16", "--n", "200", "--eval-n", "50", "--steps", "20",
                      "--batch", "8", "--eval-every", "10", "--out", str(out_dir)], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(out_dir / "curve.csv")))
    assert [r["step"] for r in rows] == ["0", "10", "20"]
    metrics = json.loads((out_dir / "metrics.json").read_text())
    assert metrics["steps_run"] == 20 and metrics["failure"] is None
    code, out, _ = run(["mqar", "eval", "--checkpoint", str(out_dir / "model.ckpt"),
                        "--vocab", "16", "--pairs", "1", "--len", "4", "--eval-n", "50"], capsys)
    rep = json.loads(out)
    assert code == 0 and 0.0 <= rep["accuracy"] <= 1.0


def test_config_file_defaults_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d": 4, "T": 32, "lam": 1.0}))
    code, out, _ = run(["verify", "--suite", "theorem1", "--config", str(cfg), "--d", "6"], capsys)
    echo = json.loads(out)["config_echo"]
    assert code == 0 and echo["d"] == 6 and echo["T"] == 32


@pytest.mark.parametrize("argv", [
    ["verify", "--suite", "nope"],
    ["verify", "--suite", "eigs", "--d", "0"],
    ["mqar", "eval", "--data", "/nonexistent/file.jsonl"],
    ["mqar", "eval", "--checkpoint", "/nonexistent/m.ckpt"],
])
def test_usage_errors_exit_2(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 2


def test_unknown_config_field_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d": 4, "colour": "red"}))
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--suite", "eigs", "--config", str(cfg)])
    assert exc.value.code == 2
    assert "colour" in capsys.readouterr().err
