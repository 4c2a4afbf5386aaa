"""Matplotlib figures written next to the TSV/JSON reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRIC_LABELS = {"bleu4": "BLEU-4", "rouge_l": "ROUGE-L", "cider": "CIDEr"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    return np.convolve(y, np.ones(window) / window, mode="valid")


def plot_loss_curves(history: Sequence[Mapping], path: str | Path, window: int = 20) -> Path:
    """Training losses per iteration (moving average) with validation points."""
    train = [r for r in history if "l_cap" in r]
    val = [r for r in history if "val_l_cap" in r]
    fig, (ax_cap, ax_align) = plt.subplots(1, 2, figsize=(10, 3.8))
    its = np.array([r["iter"] for r in train])
    for key, ax in (("l_cap", ax_cap), ("l_total", ax_cap), ("l_sa", ax_align), ("l_da", ax_align)):
        y = _smooth(np.array([r[key] for r in train], dtype=float), window)
        ax.plot(its[len(its) - len(y):], y, label=key)
    if val:
        ax_cap.plot([r["iter"] for r in val], [r["val_l_cap"] for r in val], "o", label="val l_cap")
    ax_cap.set_xlabel("iteration")
    ax_cap.set_ylabel("loss")
    ax_align.set_xlabel("iteration")
    ax_align.set_yscale("symlog")
    for ax in (ax_cap, ax_align):
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_report(report: Mapping, path: str | Path) -> Path:
    """Grouped bars for the total and semantic-change blocks of one report dict."""
    fig, ax = plt.subplots(figsize=(6, 3.8))
    metrics = list(METRIC_LABELS)
    x = np.arange(len(metrics))
    for off, block in ((-0.2, "total"), (0.2, "semantic_change")):
        vals = [report[block][m] * 100 for m in metrics]
        ax.bar(x + off, vals, width=0.4, label=block.replace("_", " "))
    ax.set_xticks(x, [METRIC_LABELS[m] for m in metrics])
    ax.set_ylabel("score x100")
    ax.legend()
    return _save(fig, path)


def plot_lambda_sweep(scores: Mapping[float, float], path: str | Path, baseline: float | None = None,
                      metric: str = "cider") -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    lams = sorted(scores)
    ax.plot(lams, [scores[l] * 100 for l in lams], "o-", label="CORTEX")
    if baseline is not None:
        ax.axhline(baseline * 100, color="gray", ls="--", label="baseline")
    ax.set_xscale("log")
    ax.set_xlabel("lambda")
    ax.set_ylabel(f"{METRIC_LABELS.get(metric, metric)} x100")
    ax.legend()
    return _save(fig, path)


def plot_ablation(rows: Sequence[Mapping], path: str | Path, metric: str = "cider") -> Path:
    """Mean and per-seed scores for each row of the module and loss grids."""
    tables = [t for t in ("modules", "losses") if any(r["table"] == t for r in rows)]
    fig, axes = plt.subplots(1, len(tables), figsize=(5 * len(tables), 3.8), squeeze=False)
    for ax, table in zip(axes[0], tables):
        names = list(dict.fromkeys(r["row"] for r in rows if r["table"] == table))
        for i, name in enumerate(names):
            vals = [r[metric] * 100 for r in rows if r["table"] == table and r["row"] == name]
            ax.bar(i, np.mean(vals), color="C0" if table == "modules" else "C1", alpha=0.7)
            ax.plot([i] * len(vals), vals, "k.", ms=5)
        ax.set_xticks(range(len(names)), names, rotation=20, fontsize=8)
        ax.set_title(table)
        ax.set_ylabel(f"{METRIC_LABELS.get(metric, metric)} x100")
    return _save(fig, path)
