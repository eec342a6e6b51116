"""Figure rendering for report directories.

Every function draws one PNG next to the delimited tables and returns its
path. The Agg backend is forced so rendering works headless, and the PNG
Software tag is stripped so repeated renders of the same data are
byte-identical.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .experiments import GridRow, read_grid_csv

__all__ = [
    "plot_classwise",
    "plot_grid",
    "plot_k_sweep",
    "plot_loss_traces",
    "plot_roc",
    "render_report_figures",
]

_SAVE_KW = dict(dpi=120, metadata={"Software": None})


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_roc(points: np.ndarray, path: str | Path, title: str = "ROC") -> Path:
    """ROC curve from (fpr, tpr) rows, with the chance diagonal for scale."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
        raise ValueError("ROC points must be an (n >= 2, 2) array")
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(points[:, 0], points[:, 1], lw=1.8)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    return _finish(fig, path)


def plot_classwise(classwise: Mapping[str, float], path: str | Path) -> Path:
    """Horizontal bars of per-class AUC, sorted by class name."""
    if not classwise:
        raise ValueError("no classes to plot")
    names = sorted(classwise)
    values = [classwise[n] for n in names]
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(names) + 1.5))
    ax.barh(range(len(names)), values)
    ax.set_yticks(range(len(names)), names)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("AUC (abnormal-video frames)")
    ax.set_title("Per-class AUC")
    return _finish(fig, path)


def plot_grid(rows: Sequence[GridRow], path: str | Path, title: str = "Ablation") -> Path:
    """Grouped bars of both AUC numbers, one group per grid row."""
    if not rows:
        raise ValueError("no grid rows to plot")
    x = np.arange(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.3 * len(rows) + 2.5, 4))
    ax.bar(x - width / 2, [r.auc_overall for r in rows], width, label="overall")
    ax.bar(x + width / 2, [r.auc_abnormal for r in rows], width, label="abnormal")
    ax.set_xticks(x, [r.row for r in rows], rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("AUC")
    ax.set_title(title)
    ax.legend()
    return _finish(fig, path)


def plot_k_sweep(rows: Sequence[GridRow], path: str | Path) -> Path:
    """AUC against memory size; rows must carry a config with k."""
    if not rows:
        raise ValueError("no sweep rows to plot")
    if any(r.config is None for r in rows):
        raise ValueError("sweep rows must carry a memory configuration")
    ks = [r.config.k for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(ks, [r.auc_overall for r in rows], marker="o", label="overall")
    ax.plot(ks, [r.auc_abnormal for r in rows], marker="s", label="abnormal")
    ax.set_xticks(ks)
    ax.set_xlabel("memory size k")
    ax.set_ylabel("AUC")
    ax.set_title("Memory-size sweep")
    ax.legend()
    return _finish(fig, path)


def plot_loss_traces(traces: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    """Per-epoch training loss, one line per named run."""
    if not traces or all(len(t) == 0 for t in traces.values()):
        raise ValueError("no loss traces to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(traces):
        trace = traces[name]
        ax.plot(range(1, len(trace) + 1), trace, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss")
    ax.legend()
    return _finish(fig, path)


def render_report_figures(report_dir: str | Path) -> list[Path]:
    """Render a PNG for every table present in a report directory.

    Looks for roc_points.csv, classwise.csv, ablation.csv, and ksweep.csv;
    absent tables are skipped so partial reports render what they have.
    """
    report_dir = Path(report_dir)
    if not report_dir.is_dir():
        raise ValueError(f"report directory {report_dir} does not exist")
    out: list[Path] = []
    roc = report_dir / "roc_points.csv"
    if roc.exists():
        points = np.loadtxt(roc, delimiter=",", skiprows=1, ndmin=2)
        out.append(plot_roc(points, report_dir / "roc.png"))
    classwise = report_dir / "classwise.csv"
    if classwise.exists():
        table: dict[str, float] = {}
        for line in classwise.read_text().splitlines()[1:]:
            name, value = line.rsplit(",", 1)
            table[name] = float(value)
        if table:
            out.append(plot_classwise(table, report_dir / "classwise.png"))
    ablation = report_dir / "ablation.csv"
    if ablation.exists():
        out.append(plot_grid(read_grid_csv(ablation), report_dir / "ablation.png"))
    ksweep = report_dir / "ksweep.csv"
    if ksweep.exists():
        out.append(plot_k_sweep(read_grid_csv(ksweep), report_dir / "ksweep.png"))
    return out
