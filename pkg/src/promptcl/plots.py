"""Headless matplotlib renderings of similarity and selection matrices."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def matrix_heatmap(
    values: np.ndarray,
    row_labels: list[str],
    col_labels: list[str],
    path: str | Path,
    title: str = "",
    fmt: str = "{:.2f}",
) -> Path:
    values = np.asarray(values, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.2 * values.shape[1] + 2, 1.0 * values.shape[0] + 2))
    im = ax.imshow(values, cmap="viridis")
    ax.set_xticks(range(values.shape[1]), labels=col_labels, rotation=45, ha="right")
    ax.set_yticks(range(values.shape[0]), labels=row_labels)
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            ax.text(j, i, fmt.format(values[i, j]), ha="center", va="center", fontsize=8)
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_matrix_csv(values: np.ndarray, labels: list[str], path: str | Path) -> Path:
    values = np.asarray(values, dtype=np.float64)
    lines = ["," + ",".join(labels)]
    for label, row in zip(labels, values):
        lines.append(label + "," + ",".join(f"{v:.6g}" for v in row))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_matrix_csv(path: str | Path) -> tuple[np.ndarray, list[str]]:
    lines = Path(path).read_text().strip().splitlines()
    labels = lines[0].split(",")[1:]
    rows = [[float(v) for v in line.split(",")[1:]] for line in lines[1:]]
    return np.asarray(rows, dtype=np.float64), labels
