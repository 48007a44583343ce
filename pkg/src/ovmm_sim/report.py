"""Tables and figures for suite summaries."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLUMNS = ("variant", "task_size", "n", "sr", "psr", "spl", "pspl", "avg_ticks", "avg_path_len")


def summary_rows(summaries: dict) -> list[dict]:
    rows = []
    for (variant, size), s in sorted(summaries.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        rows.append({"variant": variant, "task_size": size, "n": s.n, "sr": s.sr, "psr": s.psr, "spl": s.spl,
                     "pspl": s.pspl, "avg_ticks": s.avg_ticks, "avg_path_len": s.avg_path_len})
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "-" if math.isnan(v) else f"{v:.3f}"
    return str(v)


def format_table(summaries: dict) -> str:
    rows = [[_fmt(r[c]) for c in COLUMNS] for r in summary_rows(summaries)]
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def format_csv(summaries: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in summary_rows(summaries):
        writer.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()})
    return buf.getvalue()


def plot_success(summaries: dict, path: str | Path) -> None:
    """SR and SPL bars per variant, one group per task size."""
    variants = sorted({v for v, _ in summaries})
    sizes = sorted({n for _, n in summaries})
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    width = 0.8 / max(1, len(variants))
    for ax, metric in zip(axes, ("sr", "spl")):
        for k, v in enumerate(variants):
            xs = [i + k * width for i in range(len(sizes))]
            ys = [getattr(summaries[(v, n)], metric) if (v, n) in summaries else 0.0 for n in sizes]
            ax.bar(xs, ys, width, label=v)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(sizes))])
        ax.set_xticklabels([f"{n} subgoal{'s' if n > 1 else ''}" for n in sizes])
        ax.set_title(metric.upper())
        ax.set_ylim(0, 1)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_failure_flow(taxonomy: dict, path: str | Path) -> None:
    """Stacked bars: how many episodes pass or fail at each stage, per variant."""
    variants = sorted(taxonomy)
    stages = ("navigation", "manipulation", "placing")
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(variants)), 4))
    bottom = [0] * len(variants)
    for stage in stages:
        ys = [taxonomy[v]["flow"][stage]["failed"] for v in variants]
        ax.bar(variants, ys, bottom=bottom, label=f"failed at {stage}")
        bottom = [b + y for b, y in zip(bottom, ys)]
    ok = [taxonomy[v]["successes"] for v in variants]
    ax.bar(variants, ok, bottom=bottom, label="success", color="lightgrey")
    ax.set_ylabel("episodes")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(summaries: dict, taxonomy: dict, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "table.txt", out / "table.csv", out / "success.png", out / "failure_flow.png"]
    files[0].write_text(format_table(summaries), encoding="utf-8")
    files[1].write_text(format_csv(summaries), encoding="utf-8")
    plot_success(summaries, files[2])
    plot_failure_flow(taxonomy, files[3])
    return files
