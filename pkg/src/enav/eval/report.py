"""CSV / JSONL tables and deterministic SVG plots."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from ..records import EpisodeRecord
from .metrics import BUCKETS, EntropyHistogram, difficulty_stratify, sel, success_rate, token_summary

STRATEGY_COLUMNS = (
    "strategy", "episodes", "success_rate", "sel", "tokens_per_episode", "tokens_per_step", "thinking_ratio",
)  # fmt: skip


def fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def strategy_rows(by_strategy: dict[str, list[EpisodeRecord]]) -> list[dict]:
    rows = []
    for name, recs in by_strategy.items():
        ts = token_summary(recs)
        rows.append({
            "strategy": name, "episodes": len(recs), "success_rate": success_rate(recs), "sel": sel(recs),
            "tokens_per_episode": ts.tokens_per_episode, "tokens_per_step": ts.tokens_per_step,
            "thinking_ratio": ts.thinking_ratio,
        })
    return rows


def csv_text(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


# --------------------------------------------------------------------------- svg

W, H, PAD = 480, 320, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, data: dict, body: list[str], xlabel: str, ylabel: str) -> str:
    table = escape(json.dumps(data, sort_keys=True))
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<title>{escape(title)}</title>",
        f"<desc>{table}</desc>",
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W // 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{W // 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H // 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {H // 2})">{escape(ylabel)}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (v - lo) / span * (b - a)


def _range(values) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def svg_lines(title: str, xs: Sequence[float], series: dict[str, Sequence[float]], xlabel: str, ylabel: str) -> str:
    x0, x1 = _range(xs)
    y0, y1 = _range([v for ys in series.values() for v in ys])
    sx = _scale(x0, x1, PAD, W - PAD)
    sy = _scale(y0, y1, H - PAD, PAD)
    body = [
        f'<text x="{PAD}" y="{H - PAD + 14}" font-size="10">{_num(x0)}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 14}" font-size="10" text-anchor="end">{_num(x1)}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" font-size="10" text-anchor="end">{_num(y0)}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 8}" font-size="10" text-anchor="end">{_num(y1)}</text>',
    ]
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in zip(xs, ys) if math.isfinite(y))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            if math.isfinite(y):
                body.append(f'<circle cx="{_num(sx(x))}" cy="{_num(sy(y))}" r="3" fill="{color}"/>')
        body.append(f'<text x="{W - PAD}" y="{PAD + 14 * k}" font-size="11" text-anchor="end" fill="{color}">{escape(name)}</text>')
    data = {"x": list(xs), **{k: list(v) for k, v in series.items()}}
    return _frame(title, data, body, xlabel, ylabel)


def svg_bars(title: str, labels: Sequence[str], values: Sequence[float], xlabel: str, ylabel: str) -> str:
    finite = [v for v in values if math.isfinite(v)]
    top = max(finite + [1e-12])
    sy = _scale(0.0, top, H - PAD, PAD)
    n = max(len(labels), 1)
    bw = (W - 2 * PAD) / n
    body = [f'<text x="{PAD - 4}" y="{PAD + 8}" font-size="10" text-anchor="end">{_num(top)}</text>']
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = PAD + i * bw
        if math.isfinite(v):
            y = sy(v)
            body.append(
                f'<rect x="{_num(x + 1)}" y="{_num(y)}" width="{_num(bw - 2)}" height="{_num(H - PAD - y)}" fill="{PALETTE[0]}"/>'
            )
        if n <= 12:
            body.append(f'<text x="{_num(x + bw / 2)}" y="{H - PAD + 14}" font-size="10" text-anchor="middle">{escape(str(lab))}</text>')
    return _frame(title, {"labels": list(labels), "values": list(values)}, body, xlabel, ylabel)


# --------------------------------------------------------------------------- report


def emit_report(results: dict, out_dir) -> list[Path]:
    """Write every available result under ``out_dir``; returns written paths in order.

    Recognized keys: ``strategies`` (name -> records), ``histogram``
    (EntropyHistogram), ``sweeps`` (list of SweepResult), ``pass_at_k``
    (k -> value), ``boundaries`` (difficulty buckets), ``robustness``
    ((p_drop, p_mislabel) -> SR).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create report directory {out}: {err}") from err
    written: list[Path] = []

    def put(name: str, text: str):
        p = out / name
        with open(p, "w", newline="") as f:
            f.write(text)
        written.append(p)

    by_strategy = results.get("strategies") or {}
    put("strategies.csv", csv_text(STRATEGY_COLUMNS, strategy_rows(by_strategy)))
    lines = [json.dumps(r.to_dict(), sort_keys=True) for recs in by_strategy.values() for r in recs]
    put("records.jsonl", "".join(line + "\n" for line in lines))

    if by_strategy:
        bounds = tuple(results.get("boundaries", (10, 25)))
        rows = []
        for name, recs in by_strategy.items():
            for b, v in difficulty_stratify(recs, bounds).items():
                rows.append({"strategy": name, "bucket": b, "success_rate": v.sr, "thinking_ratio": v.tr, "count": v.count})
        put("stratified.csv", csv_text(("strategy", "bucket", "success_rate", "thinking_ratio", "count"), rows))
        if "hybrid" in by_strategy:
            strat = [r for r in rows if r["strategy"] == "hybrid"]
            put("stratified_hybrid.svg", svg_bars(
                "Hybrid success rate by difficulty", [r["bucket"] for r in strat],
                [r["success_rate"] for r in strat], "difficulty", "success rate"))

    hist: EntropyHistogram | None = results.get("histogram")
    if hist is not None:
        rows = [{"bin_lo": hist.edges[i], "bin_hi": hist.edges[i + 1], "count": c} for i, c in enumerate(hist.counts)]
        put("entropy_histogram.csv", csv_text(("bin_lo", "bin_hi", "count"), rows))
        labels = [f"{hist.edges[i]:.2f}" for i in range(len(hist.counts))]
        put("entropy_histogram.svg", svg_bars("Normalized action entropy", labels, [float(c) for c in hist.counts],
                                              "normalized entropy", "steps"))

    for sw in results.get("sweeps", []):
        rows = sw.rows()
        put(f"sweep_{sw.parameter}.csv", csv_text(tuple(rows[0].keys()) if rows else (sw.parameter,), rows))
        put(f"sweep_{sw.parameter}.svg", svg_lines(
            f"Mean discounted return vs {sw.parameter}", sw.thresholds, {"mean Q": sw.mean_q}, sw.parameter, "mean Q"))
        put(f"sweep_{sw.parameter}_tokens.svg", svg_lines(
            f"Tokens per step vs {sw.parameter}", sw.thresholds, {"tokens/step": sw.tokens_per_step}, sw.parameter,
            "tokens per step"))

    pk = results.get("pass_at_k")
    if pk:
        ks = sorted(pk)
        put("pass_at_k.csv", csv_text(("k", "pass_at_k"), [{"k": k, "pass_at_k": pk[k]} for k in ks]))
        put("pass_at_k.svg", svg_lines("Pass@k", [float(k) for k in ks], {"pass@k": [pk[k] for k in ks]}, "k", "pass@k"))

    rob = results.get("robustness")
    if rob:
        rows = [{"p_drop": k[0], "p_mislabel": k[1], "success_rate": v} for k, v in sorted(rob.items())]
        put("robustness.csv", csv_text(("p_drop", "p_mislabel", "success_rate"), rows))
        put("robustness.svg", svg_bars("Success rate under map corruption",
                                       [f"{r['p_drop']:.2f}/{r['p_mislabel']:.2f}" for r in rows],
                                       [r["success_rate"] for r in rows], "p_drop / p_mislabel", "success rate"))
    return written


__all__ = ["emit_report", "strategy_rows", "csv_text", "svg_lines", "svg_bars", "STRATEGY_COLUMNS", "BUCKETS"]
