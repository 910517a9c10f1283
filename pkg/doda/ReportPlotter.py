"""CSV tables and PNG figures for run reports.

Everything lands under ``<out>/plots`` with fixed names, so re-running a
command overwrites its own files instead of piling up timestamped copies.
"""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_DIR = "plots"
SMOOTH_WINDOW = 50


def clean_outliers(arr, threshold: float = 5.0) -> np.ndarray:
    """Replace points more than ``threshold`` median absolute deviations out.

    Each outlier becomes the mean of its neighbours, or the median at the ends.
    """
    arr = np.array(arr, dtype=float)
    if len(arr) < 3:
        return arr
    median = np.median(arr)
    mad = np.median(np.abs(arr - median)) + 1e-9
    mask = np.abs(arr - median) / mad > threshold
    cleaned = arr.copy()
    for i in np.where(mask)[0]:
        if i == 0 or i == len(arr) - 1:
            cleaned[i] = median
        else:
            cleaned[i] = 0.5 * (cleaned[i - 1] + cleaned[i + 1])
    return cleaned


def moving_average(arr, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing mean over ``window`` points (shorter at the start)."""
    arr = np.asarray(arr, dtype=float)
    if arr.size == 0:
        return arr
    csum = np.cumsum(np.insert(arr, 0, 0.0))
    idx = np.arange(1, arr.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def loss_decreased(losses, window: int = SMOOTH_WINDOW) -> bool:
    """Whether the smoothed loss at the end is below the smoothed loss at the start."""
    if len(losses) < 2:
        return False
    window = max(1, min(window, len(losses) // 2))
    smooth = moving_average(clean_outliers(losses), window)
    return bool(smooth[-1] < smooth[window - 1])


class ReportPlotter:
    """Writes tables and figures of one run directory.

    Args:
        out_dir: Run output root; files go to ``out_dir/plots``.
    """

    def __init__(self, out_dir):
        self.plot_dir = Path(out_dir) / PLOT_DIR

    def _path(self, name: str) -> Path:
        self.plot_dir.mkdir(parents=True, exist_ok=True)
        return self.plot_dir / name

    def save_table(self, name: str, rows) -> pd.DataFrame:
        """Write rows (list of dicts or a DataFrame) to ``<name>.csv``."""
        df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
        path = self._path(f"{name}.csv")
        try:
            df.to_csv(path, index=False, float_format="%.6g")
            logger.info("table written to %s", path)
        except OSError as exc:
            logger.warning("could not save table %s: %s", path, exc)
        return df

    def loss_curves(self, name: str, curves: dict) -> Path:
        """Raw (faint) and smoothed loss per named task."""
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for label, losses in curves.items():
            if not len(losses):
                continue
            steps = np.arange(len(losses))
            line, = ax.plot(steps, losses, alpha=0.25)
            ax.plot(steps, moving_average(clean_outliers(losses)), color=line.get_color(), label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.grid(True)
        if curves:
            ax.legend(loc="best")
        return self._save(fig, f"{name}.png")

    def sweep(self, name: str, df: pd.DataFrame, x: str, y: str, group: str = None, title: str = "") -> Path:
        """Mean and standard deviation of ``y`` against ``x``, one line per ``group``."""
        fig, ax = plt.subplots(figsize=(7, 4.5))
        groups = df.groupby(group) if group else [("", df)]
        for label, part in groups:
            stats = part.groupby(x)[y].agg(["mean", "std"]).reset_index().fillna(0.0)
            ax.errorbar(stats[x], stats["mean"], yerr=stats["std"], marker="o", capsize=3,
                        label=str(label) if group else None)
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        ax.set_title(title)
        ax.grid(True)
        if group:
            ax.legend(loc="best")
        return self._save(fig, f"{name}.png")

    def sample_grid(self, name: str, images, layouts=None, cols: int = 8) -> Path:
        """Images in a grid, boxes drawn on top when layouts are given."""
        images = np.asarray(images)
        n = len(images)
        rows = max(1, int(np.ceil(n / cols)))
        fig, axes = plt.subplots(rows, cols, figsize=(1.5 * cols, 1.5 * rows), squeeze=False)
        for k, ax in enumerate(axes.ravel()):
            ax.axis("off")
            if k >= n:
                continue
            ax.imshow(np.clip(images[k], 0, 1), interpolation="nearest")
            if layouts is not None:
                for b in layouts[k].boxes:
                    ax.add_patch(plt.Rectangle((b.x_min - 0.5, b.y_min - 0.5), b.width, b.height,
                                               fill=False, edgecolor="yellow", linewidth=0.8))
        fig.tight_layout()
        return self._save(fig, f"{name}.png")

    def _save(self, fig, name: str) -> Path:
        path = self._path(name)
        fig.savefig(path, dpi=100)
        plt.close(fig)
        logger.info("figure written to %s", path)
        return path
