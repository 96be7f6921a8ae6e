"""Adaptive density control: clone small / split large high-gradient Gaussians,
prune near-transparent ones, and keep the optimizer moments in sync."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianCloud, quat_to_rotmat
from .optim import OptimizerState

SPLIT_CHILDREN = 2
# Children are sampled from the parent distribution; samples are pulled back
# onto the 3-sigma shell when they land outside so the parent's support
# always contains them.
SPLIT_TRUNC_SIGMA = 3.0


@dataclass
class DensifyStats:
    """Accumulated screen-space positional gradients between densify events."""

    grad_accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(grad_accum=np.zeros(n), denom=np.zeros(n, dtype=np.int64))

    def accumulate(self, pgrads) -> None:
        self.grad_accum += np.linalg.norm(pgrads.pos2d_ndc, axis=1)
        self.denom += pgrads.visible.astype(np.int64)

    def mean(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.denom, 1)


@dataclass
class DensifyReport:
    n_cloned: int
    n_split: int
    n_pruned: int
    n_after: int


def densify_and_prune(
    cloud: GaussianCloud,
    stats: DensifyStats,
    state: OptimizerState,
    grad_threshold: float,
    prune_opacity: float,
    scene_extent: float,
    percent_dense: float = 0.01,
    split_factor: float = 1.6,
    rng: np.random.Generator | None = None,
) -> DensifyReport:
    """Mutates the cloud in place; resizes optimizer moments and resets stats."""
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(cloud)
    avg = stats.mean()
    over = avg > grad_threshold
    scales = cloud.scales()
    small = scales.max(axis=1) <= percent_dense * scene_extent
    clone_sel = over & small
    split_sel = over & ~small

    parts = {
        "positions": [cloud.positions],
        "log_scales": [cloud.log_scales],
        "rotations": [cloud.rotations],
        "opacity_logits": [cloud.opacity_logits],
        "sh_rgb": None if cloud.sh_rgb is None else [cloud.sh_rgb],
        "sh_thermal": None if cloud.sh_thermal is None else [cloud.sh_thermal],
    }

    def append(sel_idx, positions, log_scales):
        parts["positions"].append(positions)
        parts["log_scales"].append(log_scales)
        parts["rotations"].append(cloud.rotations[sel_idx])
        parts["opacity_logits"].append(cloud.opacity_logits[sel_idx])
        if parts["sh_rgb"] is not None:
            parts["sh_rgb"].append(cloud.sh_rgb[sel_idx])
        if parts["sh_thermal"] is not None:
            parts["sh_thermal"].append(cloud.sh_thermal[sel_idx])

    clone_idx = np.flatnonzero(clone_sel)
    if clone_idx.size:
        append(clone_idx, cloud.positions[clone_idx], cloud.log_scales[clone_idx])

    split_idx = np.flatnonzero(split_sel)
    if split_idx.size:
        rep = np.repeat(split_idx, SPLIT_CHILDREN)
        z = rng.standard_normal((rep.shape[0], 3))
        r = np.linalg.norm(z, axis=1, keepdims=True)
        z = np.where(r > SPLIT_TRUNC_SIGMA, z * (SPLIT_TRUNC_SIGMA / r), z)
        rot = quat_to_rotmat(cloud.unit_rotations()[rep])
        offset = np.einsum("kab,kb->ka", rot, z * scales[rep])
        child_pos = cloud.positions[rep] + offset
        child_log_scale = cloud.log_scales[rep] - np.log(split_factor)
        append(rep, child_pos, child_log_scale)

    positions = np.concatenate(parts["positions"])
    log_scales = np.concatenate(parts["log_scales"])
    rotations = np.concatenate(parts["rotations"])
    opacity_logits = np.concatenate(parts["opacity_logits"])
    sh_rgb = None if parts["sh_rgb"] is None else np.concatenate(parts["sh_rgb"])
    sh_thermal = (
        None if parts["sh_thermal"] is None else np.concatenate(parts["sh_thermal"])
    )

    # Split parents are removed; near-transparent Gaussians pruned.
    total = positions.shape[0]
    drop = np.zeros(total, dtype=bool)
    drop[split_idx] = True
    from .core import sigmoid

    transparent = sigmoid(opacity_logits) < prune_opacity
    n_pruned = int((transparent & ~drop).sum())
    drop |= transparent
    keep_mask = ~drop
    keep_idx = np.flatnonzero(keep_mask)

    cloud.positions = positions[keep_idx]
    cloud.log_scales = log_scales[keep_idx]
    cloud.rotations = rotations[keep_idx]
    cloud.opacity_logits = opacity_logits[keep_idx]
    cloud.sh_rgb = None if sh_rgb is None else sh_rgb[keep_idx]
    cloud.sh_thermal = None if sh_thermal is None else sh_thermal[keep_idx]
    cloud.touch()

    # Optimizer moments: copies for survivors that existed before the event,
    # zeros for clones/children (they sit past the original n rows).
    survivors_old = keep_idx[keep_idx < n]
    n_new_rows = int((keep_idx >= n).sum())
    state.reindex(survivors_old, n_new_rows)
    # New rows appended by reindex are exactly the kept rows >= n, in order.
    fresh = DensifyStats.zeros(len(cloud))
    stats.grad_accum = fresh.grad_accum
    stats.denom = fresh.denom
    return DensifyReport(
        n_cloned=int(clone_idx.size),
        n_split=int(split_idx.size),
        n_pruned=n_pruned,
        n_after=len(cloud),
    )
