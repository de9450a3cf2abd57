"""Figures for comparison runs (Agg backend, PNG files)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_errors(result, out_dir: Path) -> list[Path]:
    """Covariance error vs step, one curve per eps, one file per method."""
    paths = []
    for m in result.config.methods:
        fig, ax = plt.subplots(figsize=(6, 4))
        for eps in result.config.eps_grid:
            err = result.runs[m, eps].cov_err
            ax.semilogy(np.arange(len(err)), np.maximum(err, 1e-17), marker=".", label=f"eps={eps:g}")
        ax.set_xlabel("step")
        ax.set_ylabel("||P_nbd - P_exact||_F")
        ax.set_title(f"{m}: stabilized covariance error")
        ax.legend()
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"{m}_errors.png"))
    return paths


def plot_convergence(result, out_dir: Path) -> Path:
    """Max covariance error vs eps on log-log axes with an eps^2 guide."""
    grid = np.array(result.config.eps_grid)
    fig, ax = plt.subplots(figsize=(5, 4))
    for m in result.config.methods:
        errs = [result.runs[m, e].cov_err.max() for e in grid]
        ax.loglog(grid, errs, marker="o", label=m)
    ref = [result.runs[result.config.methods[0], grid[0]].cov_err.max()]
    ax.loglog(grid, ref[0] * (grid / grid[0]) ** 2, "k--", label="eps^2")
    ax.set_xlabel("eps")
    ax.set_ylabel("max step error")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / "convergence.png")
