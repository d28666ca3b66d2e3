"""ROC and score-histogram figures rendered from evaluation CSVs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (4.5, 3.4)
FMR_FLOOR = 1e-4  # log axis cannot show FMR = 0


def read_roc(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


def read_histogram(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    edges = np.append(data[:, 0], data[-1, 1])
    return edges, data[:, 2], data[:, 3]


def plot_roc(curves: dict, path, title: str = "") -> Path:
    """``curves`` maps a label to (fmr, tpr) arrays; FMR on a log axis."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for label, (fmr, tpr) in curves.items():
        order = np.argsort(fmr, kind="stable")
        ax.step(np.maximum(fmr[order], FMR_FLOOR), tpr[order], where="post", label=label, lw=1.2)
    ax.set_xscale("log")
    ax.set_xlim(FMR_FLOOR, 1.0)
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel("false match rate")
    ax.set_ylabel("true match rate")
    ax.grid(True, which="both", alpha=0.3)
    if title:
        ax.set_title(title)
    if len(curves) > 1:
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_histogram(edges, genuine, impostor, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    width = np.diff(edges)
    ax.bar(edges[:-1], impostor, width=width, align="edge", alpha=0.6, label="impostor", color="tab:red")
    ax.bar(edges[:-1], genuine, width=width, align="edge", alpha=0.6, label="genuine", color="tab:blue")
    ax.set_xlim(edges[0], edges[-1])
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("pairs")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_eval_dir(d) -> list[Path]:
    """roc.png and histogram.png next to the CSVs of one evaluation."""
    d = Path(d)
    out = []
    if (d / "roc.csv").exists():
        out.append(plot_roc({d.name: read_roc(d / "roc.csv")}, d / "roc.png", d.name))
    if (d / "histogram.csv").exists():
        edges, g, i = read_histogram(d / "histogram.csv")
        out.append(plot_histogram(edges, g, i, d / "histogram.png", d.name))
    return out


def render_tree(root) -> list[Path]:
    """Render every evaluation directory below ``root``, plus one overlay ROC per parent."""
    root = Path(root)
    evals = sorted({p.parent for p in root.rglob("roc.csv")})
    out = []
    for d in evals:
        out += render_eval_dir(d)
    by_parent = {}
    for d in evals:
        by_parent.setdefault(d.parent, []).append(d)
    for parent, ds in by_parent.items():
        if len(ds) > 1:
            curves = {d.name: read_roc(d / "roc.csv") for d in ds}
            out.append(plot_roc(curves, parent / "roc_overlay.png", parent.name))
    return out
