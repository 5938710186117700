"""Report figures written straight to files (non-interactive Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def loss_curve(records, path):
    """Meta-loss per iteration, with validation PSNR on a twin axis when present."""
    it = [r["iter"] for r in records]
    loss = [r["meta_loss"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(it, loss, lw=0.8, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("meta-loss", color="tab:blue")
    val = [(r["iter"], r["val_psnr"]) for r in records if "val_psnr" in r]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "o-", color="tab:red", ms=3)
        ax2.set_ylabel("val PSNR [dB]", color="tab:red")
    _save(fig, path)


def gridsearch_heatmap(rows, path, key="psnr"):
    """Heatmap of a metric over (omega1, omegaK/omega1)."""
    w1 = sorted({r["omega1"] for r in rows})
    ratio = sorted({round(r["omegaK"] / r["omega1"], 9) for r in rows})
    grid = np.full((len(ratio), len(w1)), np.nan)
    for r in rows:
        i = ratio.index(round(r["omegaK"] / r["omega1"], 9))
        grid[i, w1.index(r["omega1"])] = r[key]
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(w1)), [f"{v:g}" for v in w1])
    ax.set_yticks(range(len(ratio)), [f"{v:g}" for v in ratio])
    ax.set_xlabel(r"$\omega_1$")
    ax.set_ylabel(r"$\omega_K / \omega_1$")
    for (i, j), v in np.ndenumerate(grid):
        if np.isfinite(v):
            ax.text(j, i, f"{v:.1f}", ha="center", va="center", fontsize=7, color="w")
    fig.colorbar(im, ax=ax, label=key.upper())
    _save(fig, path)


def dynamics_plot(report, path):
    """Relative deviation between the two parametrizations over SGD steps."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, trace in report["traces"].items():
        t = np.asarray(trace, dtype=float)
        ax.semilogy(np.arange(len(t)), np.maximum(t, 1e-18), label=label)
    ax.set_xlabel("SGD step")
    ax.set_ylabel("relative deviation")
    ax.legend(frameon=False)
    _save(fig, path)
