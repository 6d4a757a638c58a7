"""Figure rendering for the CLI reports (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_WIDTH = 6.4
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
})


def _figure(width: float = FIG_WIDTH, height: float | None = None):
    return plt.subplots(figsize=(width, height or width * GOLDEN))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history, path, title: str = "") -> Path:
    """Loss (left) and RMSLE (right) per epoch, one line per split."""
    fig, (ax_loss, ax_rmsle) = plt.subplots(1, 2, figsize=(FIG_WIDTH * 1.5, FIG_WIDTH * GOLDEN))
    splits = sorted({row.split for row in history}, key=lambda s: (s != "train", s))
    for split in splits:
        rows = [r for r in history if r.split == split]
        epochs = [r.epoch for r in rows]
        ax_loss.plot(epochs, [r.loss for r in rows], marker="o", ms=3, label=split)
        ax_rmsle.plot(epochs, [r.rmsle for r in rows], marker="o", ms=3, label=split)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("MSE (log1p space)")
    ax_rmsle.set_xlabel("epoch")
    ax_rmsle.set_ylabel("RMSLE")
    ax_rmsle.legend(frameon=False)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_kernel(values: np.ndarray, path, title: str = "") -> Path:
    """Heat map of per-channel kernels: lag on x, channel on y."""
    values = np.atleast_2d(values)
    fig, ax = _figure()
    lim = float(np.max(np.abs(values))) or 1.0
    im = ax.imshow(values, aspect="auto", origin="lower", cmap="RdBu_r", vmin=-lim, vmax=lim,
                   interpolation="nearest")
    ax.set_xlabel("lag")
    ax.set_ylabel("channel")
    fig.colorbar(im, ax=ax, label="K")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_bench(rows, path) -> Path:
    """Median time per tile size, naive and tiled side by side."""
    tiles = sorted({r.tile for r in rows})
    x = np.arange(len(tiles))
    fig, ax = _figure()
    width = 0.38
    for shift, variant in ((-0.5, "naive"), (0.5, "tiled")):
        ms = [next((r.median_ns * 1e-6 for r in rows if r.tile == t and r.variant == variant), np.nan)
              for t in tiles]
        ax.bar(x + shift * width, ms, width, label=variant)
    for i, t in enumerate(tiles):
        tiled = [r for r in rows if r.tile == t and r.variant == "tiled"]
        if tiled:
            ax.annotate(f"{tiled[0].speedup:.2f}x", (x[i] + 0.5 * width, tiled[0].median_ns * 1e-6),
                        ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, [str(t) for t in tiles])
    ax.set_xlabel("tile")
    ax.set_ylabel("median time (ms)")
    if rows:
        ax.set_title(f"N={rows[0].n}, L={rows[0].l}")
    ax.legend(frameon=False)
    return _save(fig, path)
