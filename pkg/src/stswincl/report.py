"""CSV summaries and plain SVG charts for training logs, reports and ablations."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
W, H, PAD = 560, 320, 48


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD / 2}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD / 2 + 10}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
    ]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str,
               xlabel: str, ylabel: str) -> str:
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if y == y]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    sx = lambda x: PAD + (x - x0) / (x1 - x0) * (W - 1.5 * PAD)
    sy = lambda y: H - PAD - (y - y0) / (y1 - y0) * (H - 1.5 * PAD - 10)
    out = _frame(title, xlabel, ylabel)
    for t in _ticks(y0, y1):
        out.append(f'<text x="{PAD - 4}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.1f}" y="{H - PAD + 14}" text-anchor="middle">{t:.3g}</text>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        c = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if y == y)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{W - PAD * 2}" y="{PAD / 2 + 14 + 14 * i}" fill="{c}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, ylabel: str) -> str:
    vals = [0.0 if (v != v) else float(v) for v in values]
    top = max([1e-12, *vals])
    n = max(1, len(vals))
    slot = (W - 1.5 * PAD) / n
    out = _frame(title, "", ylabel)
    for t in _ticks(0.0, top):
        y = H - PAD - t / top * (H - 1.5 * PAD - 10)
        out.append(f'<text x="{PAD - 4}" y="{y + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    for i, (lab, v) in enumerate(zip(labels, vals)):
        h = v / top * (H - 1.5 * PAD - 10)
        x = PAD + i * slot + slot * 0.15
        out.append(f'<rect x="{x:.1f}" y="{H - PAD - h:.1f}" width="{slot * 0.7:.1f}" height="{h:.1f}" '
                   f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{H - PAD + 14}" text-anchor="middle">{escape(str(lab))}</text>')
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{H - PAD - h - 3:.1f}" text-anchor="middle">{v:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _read_log(path: Path) -> list[dict]:
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


def render(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Write charts and ``summary.csv`` for everything found in ``run_dir``; returns written files."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written, summary = [], []

    log_path = run_dir / "train_log.jsonl"
    if log_path.exists():
        recs = [r for r in _read_log(log_path) if "epoch" in r and "loss" in r]
        series = {}
        for stage in sorted({r["stage"] for r in recs}):
            rs = [r for r in recs if r["stage"] == stage]
            series[f"stage {stage}"] = ([r["epoch"] for r in rs], [r["loss"] for r in rs])
            summary.append(("train", f"stage{stage}_final_loss", rs[-1]["loss"]))
        p = out_dir / "loss_curves.svg"
        p.write_text(line_chart(series, "Training loss per epoch", "epoch", "loss"))
        written.append(p)

    for rp in sorted(run_dir.glob("report_*.json")):
        rep = json.loads(rp.read_text())
        split = rp.stem.split("_", 1)[1]
        per_class = rep.get("per_class_iou", {})
        p = out_dir / f"per_class_iou_{split}.svg"
        p.write_text(bar_chart([f"class {k}" for k in per_class], list(per_class.values()),
                               f"Per-class IoU ({split})", "IoU"))
        written.append(p)
        summary.append((split, "mIoU", rep["overall"]["mIoU"]))
        summary.append((split, "Dice", rep["overall"]["Dice"]))
        if rep.get("dataset"):
            for k in ("PA", "PAC", "mIoU"):
                summary.append((split, f"dataset_{k}", rep["dataset"][k]))

    for ap in sorted(run_dir.glob("ablation_*.csv")):
        with open(ap) as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        p = out_dir / f"{ap.stem}.svg"
        p.write_text(bar_chart([r["setting"] for r in rows], [float(r["mIoU"]) for r in rows],
                               f"Ablation: {rows[0]['axis']}", "test mIoU"))
        written.append(p)
        for r in rows:
            summary.append((ap.stem, f"{r['setting']} mIoU (p={r['p_value']})", float(r["mIoU"])))

    sp = out_dir / "summary.csv"
    with open(sp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "quantity", "value"])
        for src, q, v in summary:
            w.writerow([src, q, "nan" if (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"])
    written.append(sp)
    return written
