"""Static report: accuracy-by-epoch panels, t-SNE scatter, distance tables, text summary."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..embed2d import read_tsne_csv
from ..transport import mean_off_diagonal, read_distance_csv
from .experiment import SPLITS, final_epoch_summary, read_metrics

SPLITTERS = ("vgmm", "random")
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
DASHES = ("", "6,3", "2,2", "8,3,2,3")

PANEL_W, PANEL_H, MARGIN = 300, 200, 50


@dataclass
class ReportSummary:
    stats: dict  # (splitter, model, split) -> (mean, std, n_folds)
    distances: dict  # splitter -> mean off-diagonal distance
    panels: int
    text: str


class Svg:
    def __init__(self, width, height):
        self.width, self.height = width, height
        self.items = []

    def add(self, tag, text=None, **attrs):
        parts = " ".join(f'{k.rstrip("_").replace("_", "-")}="{escape(str(v), {chr(34): "&quot;"})}"'
                         for k, v in attrs.items())
        if text is None:
            self.items.append(f"<{tag} {parts}/>")
        else:
            self.items.append(f"<{tag} {parts}>{escape(str(text))}</{tag}>")

    def text(self, x, y, s, size=11, anchor="start", **attrs):
        self.add("text", s, x=f"{x:.1f}", y=f"{y:.1f}", font_size=size, text_anchor=anchor,
                 font_family="sans-serif", **attrs)

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
                          *self.items, "</svg>"]) + "\n"


def _panel(svg, x0, y0, title, series, max_epoch):
    """Axes box with accuracy in [0, 1] against epoch; ``series`` is (points, color, dash)."""
    svg.add("rect", x=x0, y=y0, width=PANEL_W, height=PANEL_H, fill="none", stroke="#333")
    svg.text(x0 + PANEL_W / 2, y0 - 8, title, size=12, anchor="middle")
    for t in (0.0, 0.5, 1.0):
        y = y0 + PANEL_H * (1 - t)
        svg.add("line", x1=x0 - 4, y1=f"{y:.1f}", x2=x0, y2=f"{y:.1f}", stroke="#333")
        svg.text(x0 - 6, y + 4, f"{t:.1f}", size=9, anchor="end")
    svg.text(x0 + PANEL_W / 2, y0 + PANEL_H + 28, "epoch", size=10, anchor="middle")
    svg.text(x0, y0 + PANEL_H + 14, "1", size=9, anchor="middle")
    svg.text(x0 + PANEL_W, y0 + PANEL_H + 14, str(max_epoch), size=9, anchor="middle")
    if not series:
        svg.text(x0 + PANEL_W / 2, y0 + PANEL_H / 2, "no records", size=11, anchor="middle", fill="#888")
        return
    span = max(max_epoch - 1, 1)
    for pts, color, dash in series:
        coords = " ".join(f"{x0 + PANEL_W * (e - 1) / span:.1f},{y0 + PANEL_H * (1 - a):.1f}" for e, a in pts)
        attrs = {"stroke_dasharray": dash} if dash else {}
        if len(pts) == 1:
            (e, a), = pts
            svg.add("circle", cx=f"{x0 + PANEL_W * (e - 1) / span:.1f}", cy=f"{y0 + PANEL_H * (1 - a):.1f}",
                    r=3, fill=color)
        else:
            svg.add("polyline", points=coords, fill="none", stroke=color, stroke_width=1.5, **attrs)


def _distance_table(svg, x0, y0, name, D):
    K = len(D)
    cell = 56
    svg.text(x0, y0 - 8, f"Wasserstein distances between {name} folds (mean off-diagonal "
                         f"{mean_off_diagonal(D):.4g})", size=12)
    for i in range(K):
        svg.text(x0 + cell * (i + 1) + cell / 2, y0 + 14, f"fold {i}", size=10, anchor="middle")
        svg.text(x0 + cell / 2, y0 + 14 + 18 * (i + 1), f"fold {i}", size=10, anchor="middle")
        for j in range(K):
            svg.text(x0 + cell * (j + 1) + cell / 2, y0 + 14 + 18 * (i + 1), f"{D[i, j]:.3f}", size=10,
                     anchor="middle")
    return 14 + 18 * (K + 1)


def accuracy_svg(records, distances: dict) -> tuple[str, int]:
    """2 x 3 grid (splitter rows, split columns) plus one table per distance matrix."""
    models = sorted({r.model for r in records})
    folds = sorted({r.fold for r in records})
    max_epoch = max(r.epoch for r in records)
    table_h = sum(40 + 18 * (len(D) + 1) for D in distances.values())
    width = MARGIN + 3 * (PANEL_W + MARGIN) + 150
    height = MARGIN + 2 * (PANEL_H + MARGIN + 20) + table_h + 20
    svg = Svg(width, height)
    panels = 0
    for row, splitter in enumerate(SPLITTERS):
        for col, split in enumerate(SPLITS):
            x0 = MARGIN + col * (PANEL_W + MARGIN)
            y0 = MARGIN + row * (PANEL_H + MARGIN + 20)
            series = []
            for mi, model in enumerate(models):
                for fold in folds:
                    pts = sorted((r.epoch, r.accuracy) for r in records
                                 if (r.splitter, r.model, r.fold, r.split) == (splitter, model, fold, split))
                    if pts:
                        series.append((pts, PALETTE[fold % len(PALETTE)], DASHES[mi % len(DASHES)]))
            _panel(svg, x0, y0, f"{splitter} / {split} accuracy", series, max_epoch)
            panels += 1
    lx = MARGIN + 3 * (PANEL_W + MARGIN) - 20
    for i, fold in enumerate(folds):
        svg.add("line", x1=lx, y1=MARGIN + 16 * i, x2=lx + 20, y2=MARGIN + 16 * i,
                stroke=PALETTE[fold % len(PALETTE)], stroke_width=2)
        svg.text(lx + 26, MARGIN + 16 * i + 4, f"fold {fold}", size=10)
    for mi, model in enumerate(models):
        y = MARGIN + 16 * (len(folds) + 1 + mi)
        svg.add("line", x1=lx, y1=y, x2=lx + 20, y2=y, stroke="#333",
                **({"stroke_dasharray": DASHES[mi % len(DASHES)]} if DASHES[mi % len(DASHES)] else {}))
        svg.text(lx + 26, y + 4, model, size=10)
    y = MARGIN + 2 * (PANEL_H + MARGIN + 20) + 10
    for name, D in distances.items():
        y += _distance_table(svg, MARGIN, y + 20, name, D) + 40
    return svg.render(), panels


def tsne_svg(Y, labels, folds, size=520) -> str:
    svg = Svg(size + 140, size + 60)
    svg.text((size + 140) / 2, 24, "t-SNE of latent codes, colored by fold", size=13, anchor="middle")
    if len(Y):
        lo, hi = Y.min(axis=0), Y.max(axis=0)
        scale = (size - 20) / np.maximum(hi - lo, 1e-12)
        px = 20 + (Y[:, 0] - lo[0]) * scale[0]
        py = 40 + (hi[1] - Y[:, 1]) * scale[1]
        for x, y, k in zip(px, py, folds):
            svg.add("circle", cx=f"{x:.1f}", cy=f"{y:.1f}", r=2, fill=PALETTE[int(k) % len(PALETTE)],
                    fill_opacity=0.7)
    for i, k in enumerate(sorted(set(int(v) for v in folds))):
        svg.add("circle", cx=size + 20, cy=60 + 18 * i, r=5, fill=PALETTE[k % len(PALETTE)])
        svg.text(size + 32, 64 + 18 * i, f"fold {k}", size=11)
    return svg.render()


def summary_text(stats: dict, distances: dict) -> str:
    lines = ["final-epoch accuracy, mean +- std over folds", "splitter\tmodel\tsplit\tmean\tstd\tfolds"]
    order = {s: i for i, s in enumerate(SPLITTERS)}
    split_order = {s: i for i, s in enumerate(SPLITS)}
    for key in sorted(stats, key=lambda k: (order.get(k[0], 99), k[0], k[1], split_order.get(k[2], 99))):
        mean, std, n = stats[key]
        lines.append(f"{key[0]}\t{key[1]}\t{key[2]}\t{mean:.6f}\t{std:.6f}\t{n}")
    if distances:
        lines.append("")
        lines.append("mean off-diagonal Wasserstein distance between folds")
        for name, value in distances.items():
            lines.append(f"{name}\t{value:.6f}")
    return "\n".join(lines) + "\n"


def render_report(metrics_csv, out_dir, tsne_csv=None, distance_csvs: dict | None = None) -> ReportSummary:
    """Write ``report.svg``, ``tsne.svg`` (when a t-SNE CSV is given) and ``summary.txt``."""
    records = read_metrics(metrics_csv)
    if not records:
        raise ValueError(f"{metrics_csv}: no metrics records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrices = {name: read_distance_csv(path) for name, path in (distance_csvs or {}).items()}
    svg, panels = accuracy_svg(records, matrices)
    (out_dir / "report.svg").write_text(svg)
    if tsne_csv is not None:
        Y, labels, folds = read_tsne_csv(tsne_csv)
        (out_dir / "tsne.svg").write_text(tsne_svg(Y, labels, folds))
    stats = final_epoch_summary(records)
    distances = {name: mean_off_diagonal(D) for name, D in matrices.items()}
    text = summary_text(stats, distances)
    (out_dir / "summary.txt").write_text(text)
    return ReportSummary(stats=stats, distances=distances, panels=panels, text=text)
