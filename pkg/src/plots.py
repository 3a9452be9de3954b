"""
src/plots.py - Optional SVG Figures

Rendered with matplotlib's Agg backend, only when the CLI gets --svg. The CSV
files in reports/ remain the canonical results; these are for eyeballing.

    plot_metrics            loss curves from metrics.csv records
    plot_score_histograms   per-dataset anomaly-score histograms
    plot_scatter            occupied soft-classes / k-NN accuracy vs mean AUROC
"""

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams['svg.hashsalt'] = 'ood-selfdistill'

_SVG_META = {'Date': None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_metrics(records: Sequence[Dict], path) -> Path:
    steps = [r['step'] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ('loss_total', 'loss_pos', 'loss_neg'):
        ax.plot(steps, [float(r[key]) for r in records], label=key, linewidth=1)
    ax.set_xlabel('step')
    ax.set_ylabel('loss')
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_score_histograms(edges: np.ndarray, hists: Dict[str, np.ndarray], path) -> Path:
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, counts in hists.items():
        total = max(int(np.sum(counts)), 1)
        ax.bar(centers, np.asarray(counts) / total, width=width, alpha=0.5, label=name)
    ax.set_xlabel('anomaly score (higher = more anomalous)')
    ax.set_ylabel('fraction')
    ax.legend(frameon=False)
    return _save(fig, path)


def _num(value) -> float:
    return float('nan') if value is None else float(value)


def plot_scatter(rows: List[Dict], path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    auroc = [_num(r['mean_auroc']) for r in rows]
    axes[0].scatter([r['occupied'] for r in rows], auroc)
    axes[0].set_xlabel('occupied soft-classes')
    axes[0].set_ylabel('mean AUROC')
    axes[1].scatter([_num(r['knn_acc']) for r in rows], auroc)
    axes[1].set_xlabel('k-NN accuracy')
    return _save(fig, path)
