"""Report tables (text + CSV) and minimal SVG charts from a record store.

Every output is a pure function of the records (timestamps are ignored),
so regenerating a report from the same records is byte-identical.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import MissingArtifactError
from ..records import MetricRecord, RecordStore
from .config import AXES
from .runner import ablation_curve, mean_std

METHOD_ORDER = ("CE", "CE(strong)", "SelfSupCon", "SupCon", "CE+SelfSupCon", "SupCon+SelfSupCon")


def _method_key(m: str):
    base = m.split("[", 1)[0]
    return (METHOD_ORDER.index(base) if base in METHOD_ORDER else len(METHOD_ORDER), m)


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.4f}"


# tables


def transfer_table(records: Sequence[MetricRecord], protocol: str, metric: str = "accuracy"):
    """(methods, domains, cells) with cells[(method, domain)] = (mean, std, n) over seeds.

    Uses final-epoch records of untagged methods. A "mean" column holds the
    mean over seeds of each seed's average across domains (grand mean).
    """
    rows = [r for r in records if r.protocol == protocol and r.metric == metric and str(r.epoch) == "final" and "[" not in r.method]
    methods = sorted({r.method for r in rows}, key=_method_key)
    domains = sorted({r.domain for r in rows})
    cells = {}
    for m in methods:
        per_seed: dict[int, list[float]] = {}
        for d in domains:
            vals = [r.value for r in sorted(rows, key=lambda r: r.seed) if r.method == m and r.domain == d]
            if vals:
                cells[(m, d)] = (*mean_std(vals), len(vals))
            for r in rows:
                if r.method == m and r.domain == d:
                    per_seed.setdefault(r.seed, []).append(r.value)
        if per_seed:
            grand = [float(np.mean(v)) for _, v in sorted(per_seed.items())]
            cells[(m, "mean")] = (*mean_std(grand), len(grand))
    return methods, domains + (["mean"] if len(domains) > 1 else []), cells


def render_text(title: str, methods, columns, cells, scale: float = 100.0, digits: int = 2) -> str:
    head = ["method"] + list(columns)
    body = []
    for m in methods:
        row = [m]
        for c in columns:
            if (m, c) in cells:
                mu, sd, n = cells[(m, c)]
                row.append(f"{mu * scale:.{digits}f} ± {sd * scale:.{digits}f} (n={n})")
            else:
                row.append("-")
        body.append(row)
    widths = [max(len(str(r[i])) for r in [head] + body) for i in range(len(head))]
    line = lambda r: "  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip()
    out = [title, "", line(head), line(["-" * w for w in widths])] + [line(r) for r in body]
    return "\n".join(out) + "\n"


def render_csv(methods, columns, cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "domain", "mean", "std", "n"])
    for m in methods:
        for c in columns:
            if (m, c) in cells:
                mu, sd, n = cells[(m, c)]
                w.writerow([m, c, _fmt(mu), _fmt(sd), n])
    return buf.getvalue()


def per_seed_csv(records: Sequence[MetricRecord], protocol: str, metric: str = "accuracy") -> str:
    rows = sorted(
        (r.method, r.domain, r.seed, r.value)
        for r in records
        if r.protocol == protocol and r.metric == metric and str(r.epoch) == "final" and "[" not in r.method
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "domain", "seed", metric])
    for m, d, s, v in rows:
        w.writerow([m, d, s, _fmt(v)])
    return buf.getvalue()


def metric_table(records: Sequence[MetricRecord], protocol: str):
    """methods x metrics mean/std over seeds and domains, for analysis protocols."""
    rows = [r for r in records if r.protocol == protocol]
    methods = sorted({r.method for r in rows}, key=_method_key)
    metrics = sorted({r.metric for r in rows})
    cells = {}
    for m in methods:
        for k in metrics:
            vals = [r.value for r in rows if r.method == m and r.metric == k]
            if vals:
                cells[(m, k)] = (*mean_std(vals), len(vals))
    return methods, metrics, cells


def epoch_curve(records: Sequence[MetricRecord], protocol: str = "probe"):
    """{method: [(epoch, mean accuracy over domains and seeds)]} from numbered epochs."""
    by: dict[str, dict[int, list[float]]] = {}
    for r in records:
        if r.protocol == protocol and r.metric == "accuracy" and str(r.epoch).isdigit():
            by.setdefault(r.method, {}).setdefault(int(r.epoch), []).append(r.value)
    return {m: [(e, float(np.mean(v))) for e, v in sorted(d.items())] for m, d in sorted(by.items(), key=lambda kv: _method_key(kv[0]))}


def pretrain_curve(records: Sequence[MetricRecord]):
    by: dict[str, dict[int, list[float]]] = {}
    for r in records:
        if r.protocol == "pretrain" and r.metric == "loss" and "[" not in r.method:
            by.setdefault(r.method, {}).setdefault(int(r.epoch), []).append(r.value)
    return {m: [(e, float(np.mean(v))) for e, v in sorted(d.items())] for m, d in sorted(by.items(), key=lambda kv: _method_key(kv[0]))}


# SVG

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def svg_line_chart(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
                   width: int = 560, height: int = 360, categorical_x: Sequence[str] | None = None) -> str:
    """Minimal multi-series line chart. ``categorical_x`` spaces labels evenly."""
    ml, mr, mt, mb = 60, 150, 30, 45
    pw, ph = width - ml - mr, height - mt - mb
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    pad = 0.05 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    sx = lambda x: ml + (x - x0) / (x1 - x0) * pw
    sy = lambda y: mt + (1 - (y - y0) / (y1 - y0)) * ph
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
        f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{ml - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3f}</text>')
    ticks = sorted(set(xs))
    if categorical_x is None and len(ticks) > 12:
        ticks = [float(round(t, 6)) for t in np.linspace(x0, x1, 6)]
    for xv in ticks:
        label = categorical_x[int(xv)] if categorical_x is not None else f"{xv:g}"
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 15}" text-anchor="middle">{label}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        for x, y in s:
            out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        ly = mt + 14 * i + 6
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_bar_chart(values: dict[str, float], title: str, ylabel: str, width: int = 560, height: int = 360) -> str:
    ml, mr, mt, mb = 60, 20, 30, 70
    pw, ph = width - ml - mr, height - mt - mb
    names = list(values)
    top = max([v for v in values.values() if v == v] + [1e-12])
    bw = pw / max(len(names), 1)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>',
    ]
    for i, n in enumerate(names):
        v = values[n] if values[n] == values[n] else 0.0
        h = v / top * ph
        x = ml + i * bw + 0.15 * bw
        out.append(f'<rect x="{x:.1f}" y="{mt + ph - h:.1f}" width="{0.7 * bw:.1f}" height="{h:.1f}" fill="{_PALETTE[i % len(_PALETTE)]}"/>')
        out.append(f'<text x="{x + 0.35 * bw:.1f}" y="{mt + ph - h - 3:.1f}" text-anchor="middle">{v:.3f}</text>')
        out.append(f'<text x="{x + 0.35 * bw:.1f}" y="{mt + ph + 14}" text-anchor="middle">{n}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# driver


def write_report(records: Sequence[MetricRecord], out_dir) -> list[Path]:
    """Write every table and chart the records support; returns the written paths."""
    if not records:
        raise MissingArtifactError("the record store is empty; nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def put(name: str, text: str):
        p = out / name
        p.write_text(text)
        written.append(p)

    protocols = sorted({r.protocol for r in records if r.protocol == "probe" or r.protocol.startswith(("finetune", "fewshot"))})
    for protocol in protocols:
        methods, cols, cells = transfer_table(records, protocol)
        if not methods:
            continue
        put(f"transfer_{protocol}.txt", render_text(f"{protocol}: top-1 accuracy (%) mean ± std over seeds", methods, cols, cells))
        put(f"transfer_{protocol}.csv", render_csv(methods, cols, cells))
        put(f"transfer_{protocol}_per_seed.csv", per_seed_csv(records, protocol))
        if "mean" in cols:
            put(f"transfer_{protocol}.svg", svg_bar_chart({m: cells[(m, "mean")][0] for m in methods if (m, "mean") in cells},
                                                        f"{protocol}: average accuracy over target domains", "accuracy"))
    for protocol in ("calibration", "separation", "corruption", "pgd", "cka"):
        methods, metrics, cells = metric_table(records, protocol)
        if methods:
            put(f"{protocol}.txt", render_text(f"{protocol}: mean ± std over seeds", methods, metrics, cells, 1.0, 4))
            put(f"{protocol}.csv", render_csv(methods, metrics, cells))
    pgd = {}
    for r in records:
        if r.protocol == "pgd" and r.metric.startswith("adv_accuracy/"):
            pgd.setdefault(r.method, {}).setdefault(float(r.metric.split("/", 1)[1]), []).append(r.value)
    if pgd:
        series = {m: [(e, float(np.mean(v))) for e, v in sorted(d.items())] for m, d in sorted(pgd.items(), key=lambda kv: _method_key(kv[0]))}
        put("pgd_curve.svg", svg_line_chart(series, "PGD accuracy vs epsilon", "epsilon (L-inf)", "accuracy"))
    for axis in AXES:
        for protocol in sorted({r.protocol for r in records if f"[{axis}=" in r.method and r.protocol != "pretrain"}):
            rows = ablation_curve(records, axis, protocol)
            if not rows:
                continue
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow([axis, "domain", "mean", "std", "n"])
            for v, d, mu, sd, n in rows:
                w.writerow([v, d, _fmt(mu), _fmt(sd), n])
            put(f"ablation_{axis}_{protocol}.csv", buf.getvalue())
            values = []
            for v, *_ in rows:
                if v not in values:
                    values.append(v)
            numeric = all(_is_num(v) for v in values)
            series: dict[str, list[tuple[float, float]]] = {}
            for v, d, mu, _, _ in rows:
                x = float(v) if numeric else float(values.index(v))
                series.setdefault(d, []).append((x, mu))
            put(f"ablation_{axis}_{protocol}.svg", svg_line_chart(
                series, f"{axis} vs {protocol} accuracy", axis, "accuracy", categorical_x=None if numeric else values))
    curves = epoch_curve(records)
    if curves:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "epoch", "mean_accuracy"])
        for m, pts in curves.items():
            for e, v in pts:
                w.writerow([m, e, _fmt(v)])
        put("epoch_curve.csv", buf.getvalue())
        put("epoch_curve.svg", svg_line_chart({m: [(float(e), v) for e, v in p] for m, p in curves.items()},
                                              "transfer accuracy vs pretraining epoch", "epoch", "accuracy"))
    loss = pretrain_curve(records)
    if loss:
        put("pretrain_loss.svg", svg_line_chart({m: [(float(e), v) for e, v in p] for m, p in loss.items()},
                                                "pretraining loss", "epoch", "loss"))
    return written


def _is_num(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def cmd_report(out_dir, experiment_id: str | None = None) -> list[Path]:
    store = RecordStore(Path(out_dir) / "records.jsonl")
    records = store.read()
    if experiment_id is not None:
        records = [r for r in records if r.experiment_id == experiment_id]
    if not records:
        raise MissingArtifactError(f"no records found in {store.path}; run pretrain/eval first")
    return write_report(records, Path(out_dir) / "report")
