"""Figures for training logs and evaluation reports."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def read_loss_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    steps, losses, lrs = [], [], []
    with Path(path).open(newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            lrs.append(float(row["lr"]))
    return np.array(steps), np.array(losses), np.array(lrs)


def plot_losses(logs: Sequence[str | Path], out: str | Path, labels: Sequence[str] | None = None,
                window: int = 10) -> Path:
    """Per-step loss (faint) with a trailing moving average, one line per log."""
    labels = list(labels) if labels is not None else [Path(p).stem for p in logs]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6.4, 5.2), sharex=True, height_ratios=(3, 1))
    for path, label in zip(logs, labels):
        steps, losses, lrs = read_loss_csv(path)
        line, = ax.plot(steps, losses, alpha=0.25, linewidth=0.8)
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1 :], smooth, color=line.get_color(), label=label)
        else:
            line.set_label(label)
        ax_lr.plot(steps, lrs, color=line.get_color())
    ax.set_ylabel("loss")
    ax.legend()
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return out


def plot_confusion(report: EvalReport, out: str | Path) -> Path:
    conf = np.asarray(report.confusion)
    cols = list(report.categories) + (["unparsed"] if conf.shape[1] > len(report.categories) else [])
    size = max(3.5, 0.6 * len(cols) + 2)
    fig, ax = plt.subplots(figsize=(size, size * 0.85))
    im = ax.imshow(conf, cmap="Blues")
    ax.set_xticks(range(len(cols)), cols, rotation=45, ha="right")
    ax.set_yticks(range(len(report.categories)), report.categories)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    hi = conf.max() if conf.size else 0
    for (i, j), v in np.ndenumerate(conf):
        ax.text(j, i, str(v), ha="center", va="center", color="white" if v > hi / 2 else "black")
    ax.set_title(f"{report.dataset or report.task}: acc {report.accuracy:.3f}, F1 {report.macro_f1:.3f}")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return out


def write_summary(reports: dict[str, EvalReport], path: str | Path) -> Path:
    """One CSV row per named report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "dataset", "mode", "task", "prompt_mode", "n_examples", "accuracy", "macro_f1", "unparsed"])
        for name, r in reports.items():
            w.writerow([name, r.dataset, r.mode, r.task, r.prompt_mode, r.n_examples,
                        f"{r.accuracy:.6f}", f"{r.macro_f1:.6f}", r.unparsed])
    return path
