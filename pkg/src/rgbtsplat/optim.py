"""Per-parameter adaptive moment optimizer and learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianCloud
from .errors import StateError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


@dataclass
class LearningRates:
    position: float = 1.6e-4        # scaled by scene extent, decays exponentially
    position_final: float = 1.6e-6
    sh: float = 2.5e-3              # DC coefficients; higher orders get sh / sh_rest_divisor
    sh_rest_divisor: float = 20.0
    opacity: float = 5e-2
    scale: float = 5e-3
    rotation: float = 1e-3


def exponential_lr(lr_init: float, lr_final: float, step: int, max_steps: int) -> float:
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    if max_steps <= 0:
        return lr_init
    t = min(max(step / max_steps, 0.0), 1.0)
    return float(np.exp(np.log(lr_init) * (1.0 - t) + np.log(lr_final) * t))


_FIELDS = ("position", "log_scale", "rotation", "opacity_logit", "sh_rgb", "sh_thermal")

_CLOUD_ATTR = {
    "position": "positions",
    "log_scale": "log_scales",
    "rotation": "rotations",
    "opacity_logit": "opacity_logits",
    "sh_rgb": "sh_rgb",
    "sh_thermal": "sh_thermal",
}


class OptimizerState:
    """First/second moment accumulators mirroring the cloud layout."""

    def __init__(self, cloud: GaussianCloud):
        self.step = 0
        self.m = {}
        self.v = {}
        for f in _FIELDS:
            arr = getattr(cloud, _CLOUD_ATTR[f])
            if arr is None:
                continue
            self.m[f] = np.zeros_like(arr)
            self.v[f] = np.zeros_like(arr)

    def check_shapes(self, cloud: GaussianCloud):
        for f, m in self.m.items():
            arr = getattr(cloud, _CLOUD_ATTR[f])
            if arr is None or arr.shape != m.shape:
                raise StateError(
                    f"optimizer state for {f} has shape {m.shape}, cloud has "
                    f"{None if arr is None else arr.shape}"
                )

    def reindex(self, keep: np.ndarray, n_new: int):
        """Keep moment rows of surviving Gaussians, zero rows for new ones."""
        for f in self.m:
            for d in (self.m, self.v):
                old = d[f]
                fresh = np.zeros((keep.shape[0] + n_new,) + old.shape[1:])
                fresh[: keep.shape[0]] = old[keep]
                d[f] = fresh


def optimizer_step(
    cloud: GaussianCloud,
    grads,
    state: OptimizerState,
    lrs: LearningRates,
    position_lr: float | None = None,
) -> None:
    """One adaptive update; renormalizes quaternions of Gaussians that moved."""
    state.check_shapes(cloud)
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t

    lr_of = {
        "position": lrs.position if position_lr is None else position_lr,
        "log_scale": lrs.scale,
        "rotation": lrs.rotation,
        "opacity_logit": lrs.opacity,
    }
    for f in state.m:
        g = getattr(grads, f)
        if g is None:
            continue
        arr = getattr(cloud, _CLOUD_ATTR[f])
        if g.shape != arr.shape:
            raise StateError(f"gradient for {f} has shape {g.shape}, cloud {arr.shape}")
        m = state.m[f]
        v = state.v[f]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if f in ("sh_rgb", "sh_thermal"):
            lr = np.full(arr.shape[1], lrs.sh / lrs.sh_rest_divisor)
            lr[0] = lrs.sh
            lr = lr[None, :, None]
        else:
            lr = lr_of[f]
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
        if f == "rotation":
            moved = np.any(update != 0.0, axis=1)
            arr -= update
            if moved.any():
                q = arr[moved]
                arr[moved] = q / np.linalg.norm(q, axis=1, keepdims=True)
        else:
            arr -= update
    cloud.touch()
