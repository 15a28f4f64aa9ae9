"""Figure rendering for reports. Everything is written to files through the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (4.8, 3.2),
    "savefig.dpi": 120,
}

# no timestamp or version strings in the file, so equal data gives equal bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def bar_balance(names: Sequence[str], means: Sequence[float], stds: Sequence[float], path,
                ylabel: str = "degree of balance") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        x = range(len(names))
        ax.bar(x, means, yerr=stds, capsize=3, color="#4c72b0")
        ax.set_xticks(list(x), names, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, max(1.0, max(means, default=0) * 1.1))
        return _save(fig, path)


def line_curves(xs: Sequence[float], curves: Mapping[str, Sequence[float]], path, xlabel: str,
                ylabel: str = "degree of balance", constants: Mapping[str, float] | None = None,
                logx: bool = False) -> Path:
    """One line per curve; ``constants`` are drawn as dashed horizontal references."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for name, ys in curves.items():
            ax.plot(xs, ys, label=name, lw=1.4)
        for name, y in (constants or {}).items():
            ax.axhline(y, ls="--", lw=1.0, label=name)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        return _save(fig, path)
