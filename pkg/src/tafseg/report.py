"""CSV output for ablation rows, plus figures.

Figures come in two flavours: a gnuplot script that reads ``summary.csv``
(no Python dependency) and a PNG drawn with matplotlib, which is imported
only when a figure is actually requested.
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict

from .experiments import Row, summarize

__all__ = ["fmt_value", "write_results", "read_results", "write_summary", "gnuplot_script", "plot_summary",
           "write_report"]

RESULT_FIELDS = ("sweep_value", "seed", "metric", "value")
SUMMARY_FIELDS = ("sweep_value", "metric", "mean", "std", "n", "min", "max")

# axis labels per study
XLABELS = {
    "change-rate": "change rate c1",
    "context": "temporal context n_h",
    "swap-curve": "swap offset (frames)",
    "attenuate": "branch",
    "class-rate": "offset (frames)",
}


def fmt_value(v) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return format(v, ".10g")


def write_results(rows, path) -> None:
    rows = sorted(rows, key=lambda r: (r.sweep_value, r.seed, r.metric))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([fmt_value(r.sweep_value), r.seed, r.metric, repr(float(r.value))])


def read_results(path) -> list[Row]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(RESULT_FIELDS)}")
        return [Row(float(r["sweep_value"]), int(r["seed"]), r["metric"], float(r["value"])) for r in reader]


def write_summary(rows, path) -> list[tuple]:
    summary = summarize(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for v, metric, mean, std, n, lo, hi in summary:
            w.writerow([fmt_value(v), metric, fmt_value(mean), fmt_value(std), n, fmt_value(lo), fmt_value(hi)])
    return summary


def _series(summary, metrics=None):
    out = defaultdict(list)
    for v, metric, mean, std, *_ in summary:
        if metrics is None or metric in metrics:
            out[metric].append((v, mean, std))
    return {m: sorted(pts) for m, pts in out.items()}


def _plot_metrics(kind: str, summary) -> list[str]:
    names = sorted({s[1] for s in summary})
    if kind in ("change-rate", "context"):
        return [m for m in names if m == "miou"] or names
    if kind == "attenuate":
        return [m for m in names if m.startswith("zeros/")] or names
    return names


def _x_positions(values, log: bool):
    """Map sweep values to plot x; on a log axis ``0`` and ``inf`` get slots at either end."""
    finite = sorted(v for v in values if math.isfinite(v) and v > 0)
    if not log or not finite:
        return {v: v for v in values}, False
    lo, hi = math.log10(finite[0]), math.log10(finite[-1])
    pos = {v: math.log10(v) for v in finite}
    for v in values:
        if v == 0:
            pos[v] = lo - 1
        elif math.isinf(v):
            pos[v] = hi + 1
    return pos, True


def gnuplot_script(kind: str, summary, summary_csv: str, png: str) -> str:
    metrics = _plot_metrics(kind, summary)
    lines = [
        "set datafile separator ','",
        "set terminal pngcairo size 800,500",
        f"set output '{os.path.basename(png)}'",
        f"set xlabel '{XLABELS.get(kind, 'sweep value')}'",
        "set ylabel 'value'",
        "set key outside right",
    ]
    if kind == "change-rate":
        # nonpositive and infinite values cannot sit on a log axis; gnuplot skips them
        lines.append("set logscale x")
    plots = [f"'{os.path.basename(summary_csv)}' using 1:(strcol(2) eq '{m}' ? $3 : 1/0):4 "
             f"with yerrorlines title '{m}'" for m in metrics]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def plot_summary(kind: str, summary, png: str) -> None:
    """Draw mean curves with one-std error bars to ``png`` (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = _series(summary, set(_plot_metrics(kind, summary)))
    values = sorted({v for pts in series.values() for v, _, _ in pts})
    pos, relabel = _x_positions(values, kind == "change-rate")
    fig, ax = plt.subplots(figsize=(8, 5))
    for metric, pts in series.items():
        ax.errorbar([pos[v] for v, _, _ in pts], [m for _, m, _ in pts], yerr=[s for _, _, s in pts],
                    marker="o", capsize=3, label=metric)
    if relabel:
        ax.set_xticks([pos[v] for v in values])
        ax.set_xticklabels([fmt_value(v) for v in values])
    ax.set_xlabel(XLABELS.get(kind, "sweep value"))
    ax.set_ylabel("value")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)


def write_report(kind: str, rows, out_dir, gnuplot: bool = False, plot: bool = True) -> dict:
    """Write ``results.csv``, ``summary.csv`` and the requested figures; return their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"results": os.path.join(out_dir, "results.csv"), "summary": os.path.join(out_dir, "summary.csv")}
    write_results(rows, paths["results"])
    summary = write_summary(rows, paths["summary"])
    png = os.path.join(out_dir, f"{kind}.png")
    if gnuplot:
        paths["gnuplot"] = os.path.join(out_dir, f"{kind}.gp")
        with open(paths["gnuplot"], "w", encoding="utf-8") as fh:
            fh.write(gnuplot_script(kind, summary, paths["summary"], os.path.join(out_dir, f"{kind}_gnuplot.png")))
    if plot:
        plot_summary(kind, summary, png)
        paths["figure"] = png
    return paths
