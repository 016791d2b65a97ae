"""Report artifacts: metrics JSON, per-run CSV tables, the cross-run summary
and small SVG charts.

SVG schema. Both charts are a single ``<svg>`` with a white background, an
x axis and a y axis drawn as ``<line>`` elements, y tick labels at
0, 0.25, 0.5, 0.75 and 1, and a ``<title>`` naming the chart.
``bars.svg`` draws one ``<rect class="bar">`` per (setting, variant) with
height proportional to mean Recall@50, labelled underneath.
``bias.svg`` draws one ``<polyline class="series">`` per variant through
(bias rank, accuracy) points taken from each run's bias curve, averaged
over seeds. Every number drawn is read back from the CSV files written
alongside, never from the runs themselves.
"""
from __future__ import annotations

import csv
import os
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import DataError
from .metrics import MetricsReport

SUMMARY_FIELDS = ("setting", "variant", "seed", "recall_50", "recall_100", "overlap_ratio",
                  "alignment_recovery", "config_hash")


def write_run(report, out_dir, relation_names=None):
    """metrics.json, per_relation.csv and bias_curve.csv for one run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    name = (lambda r: relation_names[r]) if relation_names else str
    with open(out / "per_relation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["relation", "name", "accuracy"])
        for r, acc in sorted(report.per_relation.items()):
            w.writerow([r, name(r), repr(acc)])
    with open(out / "bias_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "relation", "bias", "accuracy"])
        for rank, (r, b, acc) in enumerate(report.bias_curve):
            w.writerow([rank, r, repr(b), repr(acc)])
    return out


def collect(paths):
    """Every metrics.json under the given files or directories, in path order."""
    found = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        elif p.is_dir():
            found += sorted(p.rglob("metrics.json"))
        else:
            raise DataError(f"no such run path: {p}")
    if not found:
        raise DataError("no metrics.json found")
    return [(f, MetricsReport.from_json(f.read_text())) for f in found]


def write_summary(reports, path):
    rows = sorted((r for _, r in reports), key=lambda r: (r.setting, r.variant, r.seed))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([r.setting, r.variant, r.seed, repr(r.recall_50), repr(r.recall_100),
                        repr(r.overlap_ratio), repr(r.alignment_recovery), r.config_hash])


def write_bias_table(reports, path):
    """Long-format bias curves of every run: setting, variant, seed, rank, relation, bias, accuracy."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "variant", "seed", "rank", "relation", "bias", "accuracy"])
        for _, r in sorted(reports, key=lambda x: (x[1].setting, x[1].variant, x[1].seed)):
            for rank, (rel, b, acc) in enumerate(r.bias_curve):
                w.writerow([r.setting, r.variant, r.seed, rank, rel, repr(b), repr(acc)])


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


W, H, PAD = 640, 360, 50


def _frame(title):
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f"<title>{escape(title)}</title>",
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line class="axis" x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line class="axis" x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>']
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = _y(tick)
        out.append(f'<text x="{PAD - 8}" y="{y:.1f}" font-size="10" text-anchor="end">{tick:.2f}</text>')
    return out


def _y(v):
    return H - PAD - v * (H - 2 * PAD)


def bars_svg(summary_csv, path):
    means = defaultdict(list)
    for row in _read_csv(summary_csv):
        means[(row["setting"], row["variant"])].append(float(row["recall_50"]))
    keys = sorted(means)
    out = _frame("Mean Recall@50 by setting and variant")
    slot = (W - 2 * PAD) / max(len(keys), 1)
    for i, key in enumerate(keys):
        v = sum(means[key]) / len(means[key])
        x = PAD + i * slot + slot * 0.15
        out.append(f'<rect class="bar" x="{x:.1f}" y="{_y(v):.1f}" width="{slot * 0.7:.1f}" '
                   f'height="{H - PAD - _y(v):.1f}" fill="steelblue"/>')
        label = escape(f"{key[0]}/{key[1]}")
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{H - PAD + 14}" font-size="9" '
                   f'text-anchor="middle">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def bias_svg(bias_csv, path):
    acc = defaultdict(lambda: defaultdict(list))
    for row in _read_csv(bias_csv):
        acc[(row["setting"], row["variant"])][int(row["rank"])].append(float(row["accuracy"]))
    out = _frame("Per-relation accuracy in ascending relation-bias order")
    ranks = max((max(v) for v in acc.values() if v), default=0) + 1
    step = (W - 2 * PAD) / max(ranks - 1, 1)
    for i, key in enumerate(sorted(acc)):
        pts = " ".join(f"{PAD + r * step:.1f},{_y(sum(v) / len(v)):.1f}" for r, v in sorted(acc[key].items()))
        color = COLORS[i % len(COLORS)]
        out.append(f'<polyline class="series" points="{pts}" fill="none" stroke="{color}"/>')
        out.append(f'<text x="{W - PAD + 4}" y="{PAD + 12 * i}" font-size="9" fill="{color}">'
                   f"{escape('/'.join(key))}</text>")
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def write_report(paths, out_dir, svg=True):
    """Aggregate runs into summary.csv and bias_table.csv (plus charts)."""
    reports = collect(paths)
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    write_summary(reports, out / "summary.csv")
    write_bias_table(reports, out / "bias_table.csv")
    if svg:
        bars_svg(out / "summary.csv", out / "bars.svg")
        bias_svg(out / "bias_table.csv", out / "bias.svg")
    return reports
