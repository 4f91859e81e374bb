from __future__ import annotations

import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxserve.cli import main
from ctxserve.report import CSV_COLUMNS, SUMMARY_FIELDS, cdf, percentile, summarize

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_percentile_nearest_rank():
    xs = [15, 20, 35, 40, 50]
    assert percentile(xs, 5) == 15
    assert percentile(xs, 30) == 20
    assert percentile(xs, 40) == 20
    assert percentile(xs, 50) == 35
    assert percentile(xs, 100) == 50
    assert percentile([], 50) is None
    with pytest.raises(ValueError):
        percentile(xs, 101)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0, 100))
def test_percentile_is_a_sample_and_monotone(xs, p):
    v = percentile(xs, p)
    assert v in xs
    assert percentile(xs, min(100, p + 10)) >= v


def test_cdf_ends_at_one():
    pts = cdf([3.0, 1.0, 2.0])
    assert [x for x, _ in pts] == [1.0, 2.0, 3.0] and pts[-1][1] == 1.0


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


SMALL = """model: llama3-8b
hardware: a100
parallelism: {p_tp: 8, p_spp: 1, p_kvp: 1}
trace: {qps: 2, duration: 20, long_fraction: 0.1}
horizon: 60
seed: 3
"""


def test_run_outputs_and_golden_header(tmp_path, capsys):
    cfg = _write(tmp_path, "c.yaml", SMALL)
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--plot"]) == 0
    with open(out / "requests.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[0] == ["id", "arrival_s", "prefill_tokens", "decode_tokens", "ttft_s",
                       "tpot_p50_s", "tpot_p95_s", "finished"]
    assert len(rows) > 10
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["num_requests"] == len(rows) - 1
    summary = (out / "summary.txt").read_text()
    assert all(k in summary for k in SUMMARY_FIELDS)
    assert (out / "ttft_cdf.csv").exists() and (out / "tpot_cdf.csv").exists()
    assert "ttft_p99_s" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, "c.yaml", SMALL)
    for d in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for f in ("metrics.json", "requests.csv", "summary.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_override_changes_trace(tmp_path):
    cfg = _write(tmp_path, "c.yaml", SMALL)
    main(["gen-trace", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["gen-trace", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "9"])
    a = (tmp_path / "a" / "trace.jsonl").read_text()
    b = (tmp_path / "b" / "trace.jsonl").read_text()
    assert a and b and a != b
    first = json.loads(a.splitlines()[0])
    assert set(first) == {"arrival_s", "prefill_tokens", "decode_tokens", "id"}


def test_empty_trace_config(tmp_path):
    out = tmp_path / "e"
    assert main(["run", "--config", str(CONFIGS / "empty.yaml"), "--out", str(out)]) == 0
    rows = (out / "requests.csv").read_text().splitlines()
    assert rows == [",".join(CSV_COLUMNS)]
    assert json.loads((out / "metrics.json").read_text())["num_requests"] == 0


def test_sweep_marks_infeasible_cells(tmp_path):
    cfg = _write(tmp_path, "s.yaml", """model: llama3-70b
hardware: h100
parallelism: {p_tp: 8, p_spp: 1, p_kvp: 1}
scheduler: {static_chunk: 65536, max_chunk: 65536}
trace: {context: 100000}
sweep:
  context: [100000, 10000000]
  p_spp: [1, 8]
""")
    out = tmp_path / "o"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    status = {(r["context"], r["p_spp"]): r["status"] for r in rows}
    assert status == {("100000", "1"): "ok", ("100000", "8"): "ok",
                      ("10000000", "1"): "infeasible", ("10000000", "8"): "ok"}
    assert rows[2]["ttft_p50_s"] == ""
    assert len(json.loads((out / "sweep.json").read_text())) == 4


def test_sweep_jobs_match_serial(tmp_path):
    cfg = _write(tmp_path, "s.yaml", SMALL + "sweep:\n  policy: [fcfs, ilrs]\n")
    main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"])
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_validate_config(tmp_path, capsys):
    assert main(["validate-config", "--config", str(CONFIGS / "mixed_ilrs.yaml")]) == 0
    assert capsys.readouterr().out.startswith("ok:")
    bad = _write(tmp_path, "b.yaml", "model: llama3-70b\nhardware: a100\n"
                 "parallelism: {p_tp: 8}\ntrace: {context: 10000000}\n")
    assert main(["validate-config", "--config", str(bad)]) == 1
    assert "GB more" in capsys.readouterr().err


def test_error_exit_codes(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = _write(tmp_path, "b.yaml", "model: llama3-8b\nhardware: h100\nwat: 1\n")
    assert main(["run", "--config", str(bad)]) == 2
    inf = _write(tmp_path, "i.yaml", "model: llama3-70b\nhardware: a100\n"
                 "parallelism: {p_tp: 8}\ntrace: {context: 10000000}\n")
    assert main(["run", "--config", str(inf), "--out", str(tmp_path / "o")]) == 3
    assert main(["gen-trace", "--config", str(CONFIGS / "empty.yaml"),
                 "--out", str(tmp_path / "g")]) == 2
    assert main(["run", "--config", str(bad), "--jobs", "0"]) == 2
    capsys.readouterr()


def test_log_level_from_environment(tmp_path):
    cfg = _write(tmp_path, "c.yaml", SMALL.replace("duration: 20", "duration: 2"))
    env = dict(os.environ, MEDHA_SIM_LOG="DEBUG")
    proc = subprocess.run([sys.executable, "-m", "ctxserve", "run", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], env=env, capture_output=True,
                          text=True, check=True)
    assert "DEBUG ctxserve" in proc.stderr
    env["MEDHA_SIM_LOG"] = "ERROR"
    proc = subprocess.run([sys.executable, "-m", "ctxserve", "run", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], env=env, capture_output=True,
                          text=True, check=True)
    assert "DEBUG" not in proc.stderr


def test_summary_counts(tmp_path):
    from ctxserve.config import load_config
    from ctxserve.simulator import run_experiment
    cfg, _ = load_config(_write(tmp_path, "c.yaml", SMALL))
    s = summarize(run_experiment(cfg))
    assert s["requests"] == s["finished"] + s["censored"]
    assert 0 < s["mfu"] < 1
