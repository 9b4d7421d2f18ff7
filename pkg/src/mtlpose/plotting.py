"""PNG figures rendered next to the CSV outputs.

Figures are drawn on a bare ``matplotlib.figure.Figure`` with the Agg canvas,
so importing this module never touches the global pyplot backend.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .training import format_ratio


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def plot_train_log(log, path, title: str | None = None) -> Path:
    """Regression and detection losses per epoch, train solid and test dashed."""
    rows = log.rows
    ep = [r.epoch for r in rows]
    fig = Figure(figsize=(9, 3.6))
    axes = fig.subplots(1, 2)
    for ax, task, label in ((axes[0], "reg", "regression loss"), (axes[1], "det", "detection loss")):
        for split, style in (("train", "-"), ("test", "--")):
            ys = [getattr(r, f"{split}_{task}") for r in rows]
            if any(y is not None and math.isfinite(y) for y in ys):
                ax.plot(ep, ys, style, label=split)
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows, path, logs: dict | None = None) -> Path:
    """Final losses against the weight ratio; with ``logs``, test curves per ratio too."""
    fig = Figure(figsize=(9, 3.6))
    axes = fig.subplots(1, 2)
    labels = [format_ratio(r.ratio) for r in rows]
    x = np.arange(len(rows))
    for ax, task in ((axes[0], "reg"), (axes[1], "det")):
        for split, marker in (("train", "o"), ("test", "s")):
            ys = [getattr(r, f"{split}_{task}") for r in rows]
            ys = [np.nan if y is None else y for y in ys]
            ax.plot(x, ys, marker=marker, linestyle="-", label=split)
        ax.set_xticks(x, labels)
        ax.set_xlabel("lambda_r / lambda_d")
        ax.set_ylabel(f"final {task} loss")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    out = _save(fig, path)
    if logs:
        fig = Figure(figsize=(9, 3.6))
        axes = fig.subplots(1, 2)
        for name, log in logs.items():
            ep = [r.epoch for r in log.rows]
            for ax, task in ((axes[0], "test_reg"), (axes[1], "test_det")):
                ys = [getattr(r, task) for r in log.rows]
                if all(math.isfinite(y) for y in ys):
                    ax.plot(ep, ys, label=name)
        for ax, task in ((axes[0], "test regression loss"), (axes[1], "test detection loss")):
            ax.set_xlabel("epoch")
            ax.set_ylabel(task)
            ax.grid(alpha=0.3)
            if ax.get_legend_handles_labels()[0]:
                ax.legend(title="ratio", fontsize="small")
        fig.tight_layout()
        _save(fig, Path(path).with_name(Path(path).stem + "_curves.png"))
    return out


def plot_accuracy(curve, path) -> Path:
    from .data import JOINT_NAMES

    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    for j, name in enumerate(JOINT_NAMES[:len(curve.accuracy)]):
        ax.plot(curve.radii, curve.accuracy[j], label=name)
    ax.set_xlabel("normalized distance r")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small", ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def plot_pcp(result, path) -> Path:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    names = list(result.percent)
    ax.bar(range(len(names)), [result.percent[n] for n in names])
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel(f"PCP (%) at alpha={result.alpha:g}")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    return _save(fig, path)


def plot_patch_grid(images, path, columns: int = 8) -> Path:
    """Tile (C, H, W) images in [0, 1] into one figure."""
    n = len(images)
    cols = min(columns, n)
    rows = math.ceil(n / cols)
    fig = Figure(figsize=(1.2 * cols, 1.2 * rows))
    axes = np.atleast_1d(fig.subplots(rows, cols)).ravel()
    for ax in axes:
        ax.axis("off")
    for k, img in enumerate(images):
        axes[k].imshow(np.clip(np.asarray(img).transpose(1, 2, 0), 0, 1), interpolation="nearest")
        axes[k].set_title(str(k), fontsize=7)
    return _save(fig, path)
