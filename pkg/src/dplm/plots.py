"""Figure rendering for report outputs; files only, no interactive backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_epsilon_curve(
    rows: list[tuple[float, float, float]], path: str | Path, q: float, steps: int
) -> None:
    """Epsilon as a function of delta, one line per noise scale, log-log."""
    fig, ax = plt.subplots(figsize=(6, 4))
    sigmas = sorted({r[0] for r in rows})
    for sigma in sigmas:
        pts = sorted((d, e) for s, d, e in rows if s == sigma)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"sigma={sigma:g}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("delta")
    ax.set_ylabel("epsilon")
    ax.set_title(f"(epsilon, delta) guarantees, q={q:g}, T={steps:g}")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_perplexity_curves(
    curves: dict[str, list[tuple[int, float]]], path: str | Path
) -> None:
    """Dev-set perplexity against training step, one line per stage."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for stage, points in curves.items():
        if not points:
            continue
        steps = [p[0] for p in points]
        values = [p[1] for p in points]
        finite = [v if np.isfinite(v) else np.nan for v in values]
        ax.plot(steps, finite, label=stage)
    ax.set_xlabel("training step")
    ax.set_ylabel("dev perplexity")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
