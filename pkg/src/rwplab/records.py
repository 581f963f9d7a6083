"""Metrics CSV persistence and dependency-free SVG learning curves."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .errors import ContractError, FormatError
from .train import EpochRow, RunRecord

CSV_COLUMNS = (
    "epoch",
    "lr",
    "train_nat_acc",
    "train_rob_acc",
    "test_nat_acc",
    "test_rob_acc",
    "mean_adv_loss",
    "perturb_steps",
    "lsc_hist",
)
_FLOATS = ("lr", "train_nat_acc", "train_rob_acc", "test_nat_acc", "test_rob_acc", "mean_adv_loss")


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_metrics_csv(record: RunRecord | Sequence[EpochRow], path) -> None:
    rows = record.rows if isinstance(record, RunRecord) else list(record)
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in rows:
                writer.writerow(
                    [r.epoch]
                    + [_fmt(getattr(r, k)) for k in _FLOATS]
                    + [r.perturb_steps, ";".join(str(c) for c in r.lsc_hist)]
                )
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics_csv(path) -> list[EpochRow]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
            rows = []
            for rec in reader:
                hist = tuple(int(c) for c in rec["lsc_hist"].split(";")) if rec["lsc_hist"] else ()
                rows.append(
                    EpochRow(
                        epoch=int(rec["epoch"]),
                        perturb_steps=int(rec["perturb_steps"]),
                        lsc_hist=hist,
                        **{k: float(rec[k]) for k in _FLOATS},
                    )
                )
    except OSError as exc:
        raise OSError(f"cannot read metrics from {path}: {exc}") from exc
    return rows


_W, _H = 640, 400
_LEFT, _RIGHT, _TOP, _BOTTOM = 60, 160, 20, 40
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _series(item) -> tuple[str, list[tuple[int, float]]]:
    if isinstance(item, RunRecord):
        pts = [(item.initial.epoch, item.initial.test_rob_acc)] + [(r.epoch, r.test_rob_acc) for r in item.rows]
        return item.label, pts
    label, rows = item
    return label, [(r.epoch, r.test_rob_acc) for r in rows]


def render_curves_svg(records: Sequence) -> str:
    """SVG of test robust accuracy per epoch, one polyline per run.

    ``records`` holds RunRecords or ``(label, rows)`` pairs.
    """
    if not records:
        raise ContractError("need at least one record to plot")
    series = [_series(r) for r in records]
    max_epoch = max((e for _, pts in series for e, _ in pts), default=1) or 1
    plot_w = _W - _LEFT - _RIGHT
    plot_h = _H - _TOP - _BOTTOM

    def sx(e):
        return _LEFT + plot_w * e / max_epoch

    def sy(acc):
        return _TOP + plot_h * (1.0 - acc)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_LEFT}" y1="{_TOP + plot_h}" x2="{_LEFT + plot_w}" y2="{_TOP + plot_h}" stroke="black"/>',
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_TOP + plot_h}" stroke="black"/>',
    ]
    for tick in range(0, 11, 2):
        acc = tick / 10
        out.append(
            f'<text x="{_LEFT - 8}" y="{sy(acc) + 4:.2f}" font-size="11" text-anchor="end">{acc:.1f}</text>'
        )
    out.append(
        f'<text x="{_LEFT + plot_w / 2:.2f}" y="{_H - 8}" font-size="12" text-anchor="middle">epoch</text>'
    )
    out.append(
        f'<text x="14" y="{_TOP + plot_h / 2:.2f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {_TOP + plot_h / 2:.2f})">test robust accuracy</text>'
    )
    for i, (label, pts) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(e):.2f},{sy(a):.2f}" for e, a in pts)
        out.append(f'<polyline class="curve" fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = _TOP + 16 * (i + 1)
        lx = _W - _RIGHT + 12
        out.append(f'<line class="legend" x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_curves_svg(records: Sequence, path) -> None:
    Path(path).write_text(render_curves_svg(records))
