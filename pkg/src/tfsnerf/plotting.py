"""Figures for training logs, metric reports and the backend benchmark.

All figures go through the Agg backend with PNG metadata stripped, so the
same input table always produces the same bytes.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import TERM_NAMES  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
    "path.simplify": False,
}

PNG_META = {"Software": None}

BACKEND_COLORS = {"inn": "#1f77b4", "broyden": "#d62728"}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)
    return path


def plot_loss_curves(log: Mapping[str, np.ndarray], out_dir) -> list[Path]:
    """One image per loss term plus the weighted total."""
    out_dir = Path(out_dir)
    steps = np.asarray(log["step"])
    names = [n for n in TERM_NAMES if n in log] + [n for n in ("l_eik", "l_sem") if n in log] + ["total"]
    paths = []
    with plt.rc_context(STYLE):
        for name in names:
            fig, ax = plt.subplots()
            y = np.asarray(log[name], dtype=float)
            ax.plot(steps, y, lw=0.8, color="0.55", label="per step")
            if len(y) >= 20:
                k = max(len(y) // 50, 5)
                smooth = np.convolve(y, np.ones(k) / k, mode="valid")
                ax.plot(steps[k - 1 :], smooth, lw=1.4, color="k", label=f"mean of {k}")
                ax.legend(loc="upper right")
            if np.all(y > 0):
                ax.set_yscale("log")
            ax.set_xlabel("step")
            ax.set_ylabel(name)
            ax.set_title(name)
            fig.tight_layout()
            paths.append(_save(fig, out_dir / f"loss_{name}.png"))
    return paths


def plot_metric_trends(rows: Sequence[Mapping], out_dir, metrics=("chamfer", "f_score")) -> list[Path]:
    """Per-frame metric curves, one line per report group."""
    out_dir = Path(out_dir)
    groups = sorted({r["group"] for r in rows})
    paths = []
    with plt.rc_context(STYLE):
        for m in metrics:
            fig, ax = plt.subplots()
            for g in groups:
                sel = [r for r in rows if r["group"] == g and str(r["frame"]) != "mean"]
                if not sel:
                    continue
                x = [int(r["frame"]) for r in sel]
                y = [float(r[m]) for r in sel]
                ax.plot(x, y, marker="o", ms=2.5, lw=1.0, label=g)
            ax.set_xlabel("frame")
            ax.set_ylabel(m + (" (cm)" if m in ("chamfer", "dist_acc", "completeness") else " (%)"))
            ax.legend()
            fig.tight_layout()
            paths.append(_save(fig, out_dir / f"metric_{m}.png"))
    return paths


def plot_bench(rows: Sequence[Mapping], path) -> Path:
    """Chamfer against training wall-clock, one labeled curve per backend."""
    labels = list(dict.fromkeys(r["backend"] for r in rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, lab in enumerate(labels):
            sel = [r for r in rows if r["backend"] == lab]
            x = np.array([float(r["wall_s"]) for r in sel]) / 60.0
            y = np.array([float(r["chamfer_cm"]) for r in sel])
            finite = np.isfinite(y)
            color = BACKEND_COLORS.get(lab, f"C{i}")
            ls = "--" if i % 2 else "-"
            ax.plot(x[finite], y[finite], marker="o", ms=3, lw=1.2, ls=ls, color=color, label=lab)
        ax.set_xlabel("training wall-clock (min)")
        ax.set_ylabel("Chamfer (cm)")
        ax.legend()
        fig.tight_layout()
        return _save(fig, Path(path))
