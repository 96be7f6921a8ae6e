"""Figure rendering for the CLI report paths (training and evaluation)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curves(log, path) -> None:
    """Loss / gamma / Gaussian-count curves from a list of LossReport."""
    its = [r.iteration for r in log]
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax = axes[0]
    ax.plot(its, [r.total for r in log], label="total", lw=1.0)
    if any(r.loss_rgb is not None for r in log):
        ax.plot(its, [r.loss_rgb if r.loss_rgb is not None else np.nan for r in log],
                label="rgb", lw=0.8)
    if any(r.loss_thermal is not None for r in log):
        ax.plot(its, [r.loss_thermal if r.loss_thermal is not None else np.nan for r in log],
                label="thermal", lw=0.8)
    ax.set_yscale("log")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    if any(r.gamma is not None for r in log):
        ax2 = ax.twinx()
        ax2.plot(its, [r.gamma if r.gamma is not None else np.nan for r in log],
                 color="gray", ls="--", lw=0.8)
        ax2.set_ylabel("gamma", color="gray")
        ax2.set_ylim(0, 1)

    ax = axes[1]
    if any(r.n_rgb is not None for r in log):
        ax.plot(its, [r.n_rgb if r.n_rgb is not None else np.nan for r in log], label="n_rgb")
    if any(r.n_thermal is not None for r in log):
        ax.plot(its, [r.n_thermal if r.n_thermal is not None else np.nan for r in log],
                label="n_thermal")
    ax.set_xlabel("iteration")
    ax.set_ylabel("Gaussians")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_eval_bars(report, path) -> None:
    """Per-view PSNR bars per modality."""
    mods = sorted(report.mean.keys())
    if not mods:
        return
    fig, axes = plt.subplots(1, len(mods), figsize=(5 * len(mods), 3.2), squeeze=False)
    for ax, mod in zip(axes[0], mods):
        views = [v["view"] for v in report.per_view if mod in v]
        vals = [v[mod]["psnr"] for v in report.per_view if mod in v]
        finite = [min(v, 99.0) if math.isinf(v) else v for v in vals]
        ax.bar(views, finite, color="tab:red" if mod == "thermal" else "tab:blue")
        mean = report.mean[mod]["psnr"]
        label = "inf" if math.isinf(mean) else f"{mean:.2f}"
        ax.axhline(min(mean, 99.0) if not math.isinf(mean) else 99.0, color="k", lw=0.8, ls="--")
        ax.set_title(f"{mod} PSNR (mean {label} dB)")
        ax.set_xlabel("test view")
        ax.set_ylabel("dB")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_comparison(rendered, target, path, title="") -> None:
    """Side-by-side rendered / ground-truth / absolute-difference panel."""
    rendered = np.asarray(rendered)
    target = np.asarray(target)
    diff = np.abs(rendered - target)
    gray = rendered.ndim == 2
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, img, name in zip(axes, (rendered, target, diff), ("rendered", "ground truth", "|diff|")):
        if gray:
            im = ax.imshow(img, cmap="inferno", vmin=0, vmax=1 if name != "|diff|" else None)
        else:
            im = ax.imshow(np.clip(img, 0, 1) if name != "|diff|" else diff / max(diff.max(), 1e-9))
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
