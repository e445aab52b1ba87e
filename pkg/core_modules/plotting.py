"""
Plotting Module

PNG figures for calibration fits and recognition reports, drawn with the
non-interactive Agg backend.
"""

import logging
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from core_modules.analysis import ConfusionMatrix, TrialTiming
from core_modules.psychophysics import MagnitudeSample, SigmoidModel, forward

logger = logging.getLogger("core.plotting")


def plot_calibration(samples: Sequence[MagnitudeSample], model: SigmoidModel, path: Union[str, Path]) -> Path:
    """Reported magnitudes against probability, with the fitted curve."""
    p = np.array([s.probability for s in samples])
    s = np.array([s.reported for s in samples])
    grid = np.linspace(0.0, 1.0, 201)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(p, s, s=14, alpha=0.6, label="trials")
    ax.plot(grid, [forward(model, x) for x in grid], color="black",
            label=f"a={model.a:.3g} b={model.b:.3g} k={model.k:.3g}")
    ax.set_xlabel("Stimulation probability p")
    ax.set_ylabel("Reported magnitude S")
    ax.set_xlim(0.0, 1.0)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved calibration plot to {path}")
    return Path(path)


def plot_confusion(matrix: ConfusionMatrix, path: Union[str, Path]) -> Path:
    """Row-normalised confusion matrix heat map with counts in each cell."""
    counts = matrix.counts.astype(float)
    totals = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)

    n = len(matrix.labels)
    fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.2 * n + 1.5))
    image = ax.imshow(rates, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(n):
        for j in range(n):
            ax.text(j, i, int(matrix.counts[i, j]), ha="center", va="center",
                    color="white" if rates[i, j] > 0.5 else "black")
    ax.set_xticks(range(n), matrix.labels, rotation=45, ha="right")
    ax.set_yticks(range(n), matrix.labels)
    ax.set_xlabel("Predicted label")
    ax.set_ylabel("True label")
    ax.set_title(f"Recognition rate (overall {matrix.overall_accuracy:.0%})")
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved confusion plot to {path}")
    return Path(path)


def plot_timing(timing: TrialTiming, path: Union[str, Path]) -> Path:
    """Box plot of recognition time per class."""
    labels = list(timing.durations)
    fig, ax = plt.subplots(figsize=(6, 4))
    if labels:
        ax.boxplot([timing.durations[label] for label in labels])
        ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.set_ylabel("Recognition time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved timing plot to {path}")
    return Path(path)
