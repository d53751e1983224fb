"""Rendering evaluation results: delimited tables, plot-ready series, figures.

Every report lands twice: as TSV (one record per variant per metric, easy to
diff and re-plot elsewhere) and as PNG figures rendered here with a small
consistent style.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

_RC = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}


def _style():
    return plt.rc_context(_RC)


def write_table(reports: list[MetricsReport], path, fingerprint="unversioned") -> Path:
    """TSV with one row per report; columns are the union of report fields."""
    path = Path(path)
    rows = [rep.row() for rep in reports]
    cols: list[str] = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    lines = [f"#genrec-table v1 config={fingerprint}", "\t".join(cols)]
    for row in rows:
        lines.append("\t".join(_fmt(row.get(c, "")) for c in cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_series(reports: list[MetricsReport], path, fingerprint="unversioned") -> Path:
    """Long-form (label, metric, value) series consumable by any plotting tool."""
    path = Path(path)
    lines = [f"#genrec-series v1 config={fingerprint}", "label\tmetric\tvalue"]
    for rep in reports:
        label = _label(rep)
        for k, v in sorted(rep.recall.items()):
            lines.append(f"{label}\trecall@{k}\t{v:.6f}")
        for k, v in sorted(rep.ndcg.items()):
            lines.append(f"{label}\tndcg@{k}\t{v:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _label(rep: MetricsReport) -> str:
    flags = rep.flags
    if "variant" in flags:
        label = str(flags["variant"])
        if flags.get("gct"):
            label += "+gct"
        if flags.get("aat"):
            label += "+aat"
        if "seed" in flags:
            label += f"/s{flags['seed']}"
        return label
    return flags.get("label", "run")


def plot_metric_bars(reports: list[MetricsReport], path, metric: str = "recall",
                     k: int = 10, title: str | None = None) -> Path:
    """Grouped bars of one metric across report labels (composition study)."""
    path = Path(path)
    labels = [_label(rep) for rep in reports]
    table = {"recall": lambda r: r.recall.get(k), "ndcg": lambda r: r.ndcg.get(k)}
    values = [table[metric](rep) for rep in reports]
    with _style():
        fig, ax = plt.subplots()
        ax.bar(range(len(labels)), values, color="#4878a8")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel(f"{metric}@{k}")
        ax.set_title(title or f"{metric}@{k} by variant")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_depth_sweep(reports: list[MetricsReport], path, metric: str = "recall",
                     k: int = 10) -> Path:
    """Metric versus total index length (identifier-length study)."""
    path = Path(path)
    pts = sorted(
        (rep.flags.get("depth_s", 0) + rep.flags.get("depth_b", 0),
         rep.recall.get(k) if metric == "recall" else rep.ndcg.get(k))
        for rep in reports
    )
    with _style():
        fig, ax = plt.subplots()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
        ax.set_xlabel("index tokens per item")
        ax.set_ylabel(f"{metric}@{k}")
        ax.set_title("identifier length sweep")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_training_curve(metrics_jsonl, path) -> Path:
    """Loss per optimizer step plus per-epoch validation recall."""
    path = Path(path)
    steps, losses, val_x, val_y = [], [], [], []
    with open(metrics_jsonl, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if "loss" in rec:
                steps.append(rec["step"])
                losses.append(rec["loss"])
            elif "valid_recall@10" in rec:
                val_x.append(rec["epoch"])
                val_y.append(rec["valid_recall@10"])
    with _style():
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        ax1.plot(steps, losses, lw=0.8)
        ax1.set_xlabel("optimizer step")
        ax1.set_ylabel("loss")
        ax2.plot(val_x, val_y, marker="o")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("valid recall@10")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
