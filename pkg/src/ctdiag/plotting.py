"""SVG figures written next to the JSON/CSV artifacts.

Output is byte-stable: fixed hash salt, no date metadata, no figure-level
randomness.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"svg.hashsalt": "ctdiag", "svg.fonttype": "none", "font.size": 9}
_CURVE_STYLE = {"C75": "tab:blue", "C50": "tab:orange", "Loc": "tab:green", "BG": "tab:red", "FN": "tab:purple"}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_error_curves(curves: dict, path, title: str = "") -> Path:
    from .evaluation.detection import RECALL_POINTS, average

    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        for name in ("FN", "BG", "Loc", "C50", "C75"):
            if name not in curves:
                continue
            c = np.asarray(curves[name], dtype=float)
            ax.fill_between(RECALL_POINTS, c, step=None, alpha=0.25, color=_CURVE_STYLE[name])
            ax.plot(RECALL_POINTS, c, color=_CURVE_STYLE[name], lw=1.2,
                    label=f"[{average(c):.3f}] {name}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower left", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(rows: list[dict], path, keys=("total", "focal", "box", "cls")) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        it = [r["iteration"] for r in rows]
        for k in keys:
            ys = [r.get(k) for r in rows]
            if all(y is None for y in ys):
                continue
            ax.plot(it, [np.nan if y is None else y for y in ys], lw=1, label=k)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_area_histogram(edges, counts, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        labels = [f"{edges[i]:g}-{edges[i + 1]:g}" for i in range(len(counts))]
        ax.bar(range(len(counts)), counts, color="tab:gray")
        ax.set_xticks(range(len(counts)))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_xlabel("box area (px²)")
        ax.set_ylabel("boxes")
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 0.3 * len(rows) + 1))
        names = [r["name"] for r in rows]
        vals = [np.nan if r["ap50"] is None else r["ap50"] for r in rows]
        ax.barh(range(len(rows)), vals, color="tab:blue")
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(names)
        ax.invert_yaxis()
        ax.set_xlabel("AP50 (%)")
        fig.tight_layout()
        return _save(fig, path)
