"""Error-vs-step line charts written as standalone SVG files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp, so identical inputs give identical bytes
_RC = {"svg.hashsalt": "kia", "svg.fonttype": "path"}


def error_chart(
    curves: Mapping[str, Sequence[float]],
    path,
    title: str = "",
    ylabel: str = "relative error",
    log: bool = False,
) -> Path:
    """One line per entry of ``curves`` (label -> per-step mean error)."""
    path = Path(path)
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for label, ys in curves.items():
            ys = np.asarray(ys, dtype=np.float64)
            ax.plot(np.arange(1, len(ys) + 1), ys, label=label, linewidth=1.2)
        if log:
            ax.set_yscale("log")
        ax.set_xlabel("prediction step")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return path
