"""Static plots and a markdown summary of runs and metric reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402


def boxplot_reports(reports: Mapping[str, MetricReport], path: str | Path, metric: str = "ssim") -> Path:
    """One box per report of the per-image ``metric`` values (validation and test side by side)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(reports)
    values = [[r[metric] for r in reports[n].per_image if metric in r] for n in names]
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(names), 3.2))
    ax.boxplot(values, showmeans=True)
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylabel(metric.upper().replace("_", "-"))
    ax.set_ylim(min(0.0, *(min(v) for v in values if v)), 1.0)
    fids = [reports[n].fid for n in names]
    if all(f is not None for f in fids):
        ax.set_title("FID " + ", ".join(f"{n}: {f:.3f}" for n, f in zip(names, fids)), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def read_loss_log(path: str | Path) -> dict[str, list[tuple[int, float]]]:
    series: dict[str, list[tuple[int, float]]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            series.setdefault(row["term"], []).append((int(row["epoch"]), float(row["value"])))
    return series


def plot_loss_curves(losses_csv: str | Path, path: str | Path) -> Path:
    series = read_loss_log(losses_csv)
    path = Path(path)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for term, pts in sorted(series.items()):
        if term in ("lr", "output_std"):
            continue
        ax = axes[0] if term == "val_loss" else axes[1]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=term)
    axes[0].set_title("validation generator loss")
    axes[1].set_title("training terms")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def render_report(root: str | Path, out: str | Path | None = None) -> Path:
    """Collect run manifests and metric JSON files below ``root`` into ``report.md``."""
    root = Path(root)
    out = Path(out) if out is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Bias transfer report", ""]

    runs = sorted(p for p in root.rglob("manifest.json") if p.parent != root and "history" in p.read_text())
    if runs:
        lines += ["## Training runs", "",
                  "| run | architecture | extra | seed | status | selected epoch | best val loss | collapse |",
                  "|---|---|---|---|---|---|---|---|"]
        for p in runs:
            m = json.loads(p.read_text())
            rel = p.parent.relative_to(root)
            lines.append(f"| {rel} | {m['architecture']} | {m['extra_mode']} | {m['seed']} | {m['status']} | "
                         f"{_fmt(m.get('selected_epoch'))} | {_fmt(m.get('best_val_loss'))} | "
                         f"{m.get('mode_collapse')} |")
            log = p.parent / "losses.csv"
            if log.exists():
                name = str(rel).replace("/", "_") + "_losses.png"
                plot_loss_curves(log, out / name)
                lines.append(f"|  | ![losses]({name}) | | | | | | |")
        lines.append("")

    metric_files = sorted(p for p in root.rglob("*.json")
                          if p.name.startswith(("metrics", "baseline_metrics")) and out not in p.parents)
    if metric_files:
        lines += ["## Metric reports", "",
                  "Validation and test scores are listed separately.", "",
                  "| report | split | SSIM | MS-SSIM | FID | FID (original) | accuracy | accuracy (original) |",
                  "|---|---|---|---|---|---|---|---|"]
        for p in metric_files:
            r = json.loads(p.read_text())
            lines.append(f"| {p.relative_to(root)} | {r['split']} | {_fmt(r.get('ssim_mean'))} | "
                         f"{_fmt(r.get('ms_ssim_mean'))} | {_fmt(r.get('fid'))} | {_fmt(r.get('fid_original'))} | "
                         f"{_fmt(r.get('accuracy'))} | {_fmt(r.get('accuracy_original'))} |")
        lines.append("")
    if not runs and not metric_files:
        lines.append(f"No manifests or metric reports found under {root}.")
    path = out / "report.md"
    path.write_text("\n".join(lines) + "\n")
    return path
