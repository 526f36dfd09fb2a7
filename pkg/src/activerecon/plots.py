"""Render IoU-vs-views and entropy-vs-views charts from evaluation CSVs.

Output is SVG with a pinned hash salt and no date metadata, so re-rendering
the same CSVs reproduces the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class PlotError(Exception):
    pass


def _read_eval_csv(path) -> tuple[str, list[int], list[float], list[float]]:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2:
        raise PlotError(f"{path} has no data rows")
    series = None
    views, ious, ents = [], [], []
    for line in lines[1:]:
        parts = line.split(",")
        if parts[0] != "eval":
            continue
        series = parts[3]
        views.append(int(parts[4]))
        ious.append(float(parts[5]))
        ents.append(float(parts[6]))
    if series is None:
        raise PlotError(f"{path} contains no eval rows")
    return series, views, ious, ents


def _deterministic_save(fig, out_path):
    matplotlib.rcParams["svg.hashsalt"] = "activerecon"
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_plots(eval_csvs: list, out_dir) -> list[Path]:
    """One IoU chart and one entropy chart, a line per planner/series."""
    if not eval_csvs:
        raise PlotError("no evaluation CSVs were given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = [_read_eval_csv(p) for p in eval_csvs]

    written = []
    for metric, idx, ylabel, fname in (
        ("iou", 2, "mean voxel IoU", "iou_vs_views.svg"),
        ("entropy", 3, "mean entropy (bits/voxel)", "entropy_vs_views.svg"),
    ):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for series, views, ious, ents in data:
            ys = (ious, ents)[idx - 2]
            ax.plot(views, ys, marker="o", label=series)
        ax.set_xlabel("number of views")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out / fname
        _deterministic_save(fig, path)
        written.append(path)
    return written
