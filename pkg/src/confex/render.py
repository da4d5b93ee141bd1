"""Static PNG rendering: kept-region overlays and confidence sweep charts.

PNG metadata that would vary between runs (writer version, timestamps) is
suppressed so that re-rendering identical inputs yields identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# strip the default Software tag for byte-reproducible output
_PNG_METADATA = {"Software": None}


def _display_image(img: np.ndarray) -> np.ndarray:
    """(C,H,W) floats -> (H,W) or (H,W,3) in [0,1] for display."""
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi - lo < 1e-12 else (img - lo) / (hi - lo)
    if img.shape[0] == 3:
        return np.moveaxis(scaled, 0, -1)
    return scaled.mean(axis=0)


def render_mask_overlay(image: np.ndarray, keep: np.ndarray, path, size_fraction: float | None = None) -> str:
    """Draw the kept region at full contrast over a gray baseline.

    The caption reports the mask size as a percentage; returns the caption
    text so callers can echo it.
    """
    disp = _display_image(np.asarray(image, dtype=np.float64))
    keep = np.asarray(keep, dtype=bool)
    gray = 0.5
    if disp.ndim == 3:
        shown = np.where(keep[:, :, None], disp, gray)
    else:
        shown = np.where(keep, disp, gray)
    if size_fraction is None:
        size_fraction = keep.sum() / keep.size
    caption = f"S_E size: {100.0 * size_fraction:.1f}%"

    fig, ax = plt.subplots(figsize=(3, 3.3))
    ax.imshow(shown, cmap=None if shown.ndim == 3 else "gray", vmin=0, vmax=1, interpolation="nearest")
    ax.set_axis_off()
    ax.set_title(caption, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return caption


def render_sweep_charts(rows: list[dict], out_prefix) -> list[Path]:
    """Line charts of mask size and fidelity versus confidence level.

    `rows` follow the evaluation CSV schema; one line per conformity kind.
    Returns the chart paths ([size, fidelity]).
    """
    out_prefix = Path(out_prefix)
    by_kind: dict[str, list[dict]] = {}
    for r in rows:
        by_kind.setdefault(str(r["kind"]), []).append(r)
    paths = []
    for metric, ylabel, fname in (
        ("mean_size", "mean mask size fraction", "size_vs_confidence.png"),
        ("fidelity", "fidelity", "fidelity_vs_confidence.png"),
    ):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for kind, kind_rows in sorted(by_kind.items()):
            kind_rows = sorted(kind_rows, key=lambda r: float(r["epsilon"]), reverse=True)
            conf = [100.0 * (1.0 - float(r["epsilon"])) for r in kind_rows]
            ax.plot(conf, [float(r[metric]) for r in kind_rows], marker="o", label=kind)
        if metric == "fidelity":
            conf_all = sorted({100.0 * (1.0 - float(r["epsilon"])) for r in rows})
            ax.plot(conf_all, [c / 100.0 for c in conf_all], linestyle="--", color="gray", label="target")
        ax.set_xlabel("confidence level (%)")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_prefix / fname
        fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
        plt.close(fig)
        paths.append(path)
    return paths
