"""Percentile summaries, per-request CSV and CDF dumps for simulation runs."""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

from .simulator import SimMetrics

log = logging.getLogger(__name__)

CSV_COLUMNS = ("id", "arrival_s", "prefill_tokens", "decode_tokens", "ttft_s",
               "tpot_p50_s", "tpot_p95_s", "finished")

SUMMARY_FIELDS = ("requests", "finished", "censored",
                  "ttft_p50_s", "ttft_p90_s", "ttft_p99_s",
                  "tpot_p50_s", "tpot_p90_s", "tpot_p99_s",
                  "mfu", "mbu", "slo_violations", "preemptions", "batch_overruns",
                  "deferred_growth", "admission_waits", "stalled")


def percentile(values: Iterable[float], p: float) -> float | None:
    """Nearest-rank percentile; ``None`` for an empty sample."""
    xs = sorted(values)
    if not xs:
        return None
    if not 0 <= p <= 100:
        raise ValueError("p must be in [0, 100]")
    rank = max(1, math.ceil(p / 100 * len(xs)))
    return xs[rank - 1]


def summarize(m: SimMetrics) -> dict:
    """Headline numbers.  TTFT percentiles count cut-off requests at their wait so far."""
    ttft = m.ttfts(censored_bound=True)
    tpot = m.tpots()
    mfu, mbu = m.utilization()
    out = {"requests": m.num_requests, "finished": m.num_finished,
           "censored": m.num_requests - m.num_finished}
    for q in (50, 90, 99):
        out[f"ttft_p{q}_s"] = percentile(ttft, q)
        out[f"tpot_p{q}_s"] = percentile(tpot, q)
    out["mfu"] = mfu
    out["mbu"] = mbu
    for k in ("slo_violations", "preemptions", "batch_overruns", "deferred_growth",
              "admission_waits", "stalled"):
        out[k] = m.counters.get(k, 0)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_summary(s: dict) -> str:
    width = max(len(k) for k in SUMMARY_FIELDS)
    lines = []
    for k in SUMMARY_FIELDS:
        v = s.get(k)
        if isinstance(v, float):
            text = f"{v:.4f}" if k in ("mfu", "mbu") else f"{v:.6g}"
        else:
            text = "-" if v is None else str(v)
        lines.append(f"{k:<{width}}  {text}")
    return "\n".join(lines)


def request_rows(m: SimMetrics) -> list[list[str]]:
    rows = []
    for r in m.records:
        rows.append([r.id, _fmt(r.arrival_s), str(r.prefill_tokens), str(r.decode_tokens),
                     _fmt(r.ttft_s), _fmt(percentile(r.tpot_s, 50)),
                     _fmt(percentile(r.tpot_s, 95)), _fmt(r.finished)])
    return rows


def write_requests_csv(m: SimMetrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(request_rows(m))


def write_summary(s: dict, path) -> None:
    Path(path).write_text(format_summary(s) + "\n", encoding="utf-8")


def cdf(values: Sequence[float]) -> list[tuple[float, float]]:
    xs = sorted(values)
    n = len(xs)
    return [(x, (i + 1) / n) for i, x in enumerate(xs)]


def write_plots(m: SimMetrics, out_dir, prefix: str = "") -> list[Path]:
    """CDF data files, plus PNG charts when matplotlib is installed."""
    out_dir = Path(out_dir)
    written = []
    series = {"ttft": m.ttfts(censored_bound=True), "tpot": m.tpots()}
    for name, values in series.items():
        p = out_dir / f"{prefix}{name}_cdf.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("seconds", "fraction"))
            w.writerows((repr(x), repr(f)) for x, f in cdf(values))
        written.append(p)
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib not installed; skipping rendered charts")
        return written
    for name, values in series.items():
        if not values:
            continue
        pts = cdf(values)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([x for x, _ in pts], [f for _, f in pts], drawstyle="steps-post")
        ax.set_xscale("log")
        ax.set_xlabel(f"{name.upper()} (s)")
        ax.set_ylabel("fraction of requests" if name == "ttft" else "fraction of tokens")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        p = out_dir / f"{prefix}{name}_cdf.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written


def write_sweep_csv(rows: list[dict], axes: Sequence[str], path) -> None:
    """One row per sweep cell in product order.  Infeasible cells carry only
    their axis values and ``status=infeasible``."""
    cols = list(axes) + ["status"] + list(SUMMARY_FIELDS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in cols])
