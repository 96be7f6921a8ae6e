"""Scalar objectives: photometric terms, thermal smoothness, joint weighting.

All loss functions accept (H,W) single-channel or (H,W,C) images and return
plain floats; each has an analytic gradient counterpart used by the trainer.
SSIM uses the ubiquitous 11-tap Gaussian window (sigma 1.5) with zero padding,
C1=(0.01)^2, C2=(0.03)^2 on unit dynamic range.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeMismatchError, UndefinedCoefficientError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

_conv_cache: dict = {}


def _as3d(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def _conv_matrix(n: int) -> np.ndarray:
    """Banded matrix applying the zero-padded 1-D Gaussian window."""
    key = (n, SSIM_WINDOW, SSIM_SIGMA)
    if key not in _conv_cache:
        half = SSIM_WINDOW // 2
        taps = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2.0 * SSIM_SIGMA ** 2))
        taps /= taps.sum()
        mat = np.zeros((n, n))
        for off, w in zip(range(-half, half + 1), taps):
            idx = np.arange(max(0, -off), min(n, n - off))
            mat[idx, idx + off] = w
        _conv_cache[key] = mat
    return _conv_cache[key]


def _sep_apply(img: np.ndarray, wr: np.ndarray, wc: np.ndarray) -> np.ndarray:
    """rows <- wr @ rows, cols <- wc @ cols, batched over channels."""
    h, w, c = img.shape
    rowed = (wr @ img.reshape(h, w * c)).reshape(h, w, c)
    swapped = rowed.transpose(1, 0, 2).reshape(w, h * c)
    coled = (wc @ swapped).reshape(w, h, c)
    return coled.transpose(1, 0, 2)


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable window blur per channel, zero padding ('same')."""
    h, w = img.shape[:2]
    return _sep_apply(img, _conv_matrix(h), _conv_matrix(w))


def _blur_adjoint(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    return _sep_apply(img, _conv_matrix(h).T, _conv_matrix(w).T)


def l1_loss(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute difference over all pixels and channels."""
    a, b = _as3d(rendered), _as3d(target)
    _check_pair(a, b)
    diff = np.abs(a - b)
    if mask is None:
        return float(diff.mean())
    m = mask[:, :, None]
    return float((diff * m).sum() / (m.sum() * a.shape[2]))


def l1_grad(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    a, b = _as3d(rendered), _as3d(target)
    _check_pair(a, b)
    g = np.sign(a - b)
    if mask is None:
        g = g / a.size
    else:
        m = mask[:, :, None]
        g = g * m / (m.sum() * a.shape[2])
    return g[:, :, 0] if np.asarray(rendered).ndim == 2 else g


def _ssim_map(x: np.ndarray, y: np.ndarray):
    ux, uy = _blur(x), _blur(y)
    vxx, vyy, vxy = _blur(x * x), _blur(y * y), _blur(x * y)
    sx = vxx - ux * ux
    sy = vyy - uy * uy
    sxy = vxy - ux * uy
    a = 2.0 * ux * uy + SSIM_C1
    b = 2.0 * sxy + SSIM_C2
    c = ux * ux + uy * uy + SSIM_C1
    d = sx + sy + SSIM_C2
    return a * b / (c * d), (ux, uy, vxy, a, b, c, d)


def ssim_value(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean windowed SSIM over pixels and channels."""
    x, y = _as3d(rendered), _as3d(target)
    _check_pair(x, y)
    smap, _ = _ssim_map(x, y)
    if mask is None:
        return float(smap.mean())
    m = mask[:, :, None]
    return float((smap * m).sum() / (m.sum() * x.shape[2]))


def dssim_loss(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """(1 - SSIM) / 2."""
    return (1.0 - ssim_value(rendered, target, mask)) / 2.0


def dssim_loss_and_grad(rendered, target, mask: np.ndarray | None = None):
    """(dssim value, analytic gradient) sharing one set of windowed statistics."""
    x, y = _as3d(rendered), _as3d(target)
    _check_pair(x, y)
    smap, stats = _ssim_map(x, y)
    if mask is None:
        value = (1.0 - float(smap.mean())) / 2.0
    else:
        m = mask[:, :, None]
        value = (1.0 - float((smap * m).sum() / (m.sum() * x.shape[2]))) / 2.0
    g = _dssim_grad_from_stats(x, y, stats, mask)
    g = g[:, :, 0] if np.asarray(rendered).ndim == 2 else g
    return value, g


def _dssim_grad_from_stats(x, y, stats, mask):
    ux, uy, vxy, a, b, c, d = stats
    if mask is None:
        d_map = np.full_like(x, -0.5 / x.size)
    else:
        m = mask[:, :, None]
        d_map = np.where(m, -0.5 / (m.sum() * x.shape[2]), 0.0) * np.ones_like(x)
    cd = c * d
    s_a = b / cd
    s_b = a / cd
    s_c = -a * b / (c * cd)
    s_d = -a * b / (cd * d)
    d_ux = d_map * (2.0 * uy * (s_a - s_b) + 2.0 * ux * (s_c - s_d))
    d_vxx = d_map * s_d
    d_vxy = d_map * s_b * 2.0
    return _blur_adjoint(d_ux) + 2.0 * x * _blur_adjoint(d_vxx) + y * _blur_adjoint(d_vxy)


def dssim_grad(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Analytic d(dssim)/d(rendered) through the windowed statistics."""
    x, y = _as3d(rendered), _as3d(target)
    _check_pair(x, y)
    _, stats = _ssim_map(x, y)
    g = _dssim_grad_from_stats(x, y, stats, mask)
    return g[:, :, 0] if np.asarray(rendered).ndim == 2 else g


def smooth_loss(thermal: np.ndarray) -> float:
    """Four-neighbor absolute-difference smoothness of a thermal image.

    Every pixel contributes |T_neighbor - T| for each of its in-range
    neighbors; out-of-range neighbors contribute zero and the normalizer
    stays 4*M.  Equivalent to twice the sum over adjacent pairs / 4M.
    """
    t = np.asarray(thermal, dtype=np.float64)
    if t.ndim == 3 and t.shape[2] == 1:
        t = t[:, :, 0]
    if t.ndim != 2 or t.size == 0:
        raise ShapeMismatchError("smooth_loss expects a non-empty H x W image")
    m = t.size
    dh = np.abs(t[:, 1:] - t[:, :-1]).sum()
    dv = np.abs(t[1:, :] - t[:-1, :]).sum()
    return float((dh + dv) / (2.0 * m))


def smooth_grad(thermal: np.ndarray) -> np.ndarray:
    t = np.asarray(thermal, dtype=np.float64)
    squeeze = False
    if t.ndim == 3 and t.shape[2] == 1:
        t, squeeze = t[:, :, 0], True
    if t.ndim != 2 or t.size == 0:
        raise ShapeMismatchError("smooth_grad expects a non-empty H x W image")
    m = t.size
    g = np.zeros_like(t)
    sh = np.sign(t[:, 1:] - t[:, :-1])
    g[:, 1:] += sh
    g[:, :-1] -= sh
    sv = np.sign(t[1:, :] - t[:-1, :])
    g[1:, :] += sv
    g[:-1, :] -= sv
    g /= 2.0 * m
    return g[:, :, None] if squeeze else g


def modality_loss(
    rendered: np.ndarray,
    target: np.ndarray,
    weights,
    modality,
    mask: np.ndarray | None = None,
) -> float:
    """(1-l)*L1 + l*DSSIM, plus the smoothness term for thermal."""
    from .core import Modality

    lam = weights.lambda_dssim
    loss = (1.0 - lam) * l1_loss(rendered, target, mask) + lam * dssim_loss(
        rendered, target, mask
    )
    if modality == Modality.THERMAL:
        loss += weights.lambda_smooth * smooth_loss(rendered)
    return loss


def modality_loss_terms(rendered, target, weights, modality, mask=None):
    """Component values (l1, dssim, smooth, total); smooth is None for RGB."""
    from .core import Modality

    lam = weights.lambda_dssim
    l1 = l1_loss(rendered, target, mask)
    ds = dssim_loss(rendered, target, mask)
    total = (1.0 - lam) * l1 + lam * ds
    smooth = None
    if modality == Modality.THERMAL:
        smooth = smooth_loss(rendered)
        total += weights.lambda_smooth * smooth
    return l1, ds, smooth, total


def modality_loss_grad(rendered, target, weights, modality, mask=None) -> np.ndarray:
    from .core import Modality

    lam = weights.lambda_dssim
    g = (1.0 - lam) * l1_grad(rendered, target, mask) + lam * dssim_grad(
        rendered, target, mask
    )
    if modality == Modality.THERMAL:
        g = g + weights.lambda_smooth * smooth_grad(rendered)
    return g


def modality_loss_terms_and_grad(rendered, target, weights, modality, mask=None):
    """Fused (terms, gradient): the windowed statistics are computed once."""
    from .core import Modality

    lam = weights.lambda_dssim
    l1 = l1_loss(rendered, target, mask)
    ds, ds_g = dssim_loss_and_grad(rendered, target, mask)
    total = (1.0 - lam) * l1 + lam * ds
    g = (1.0 - lam) * l1_grad(rendered, target, mask) + lam * ds_g
    smooth = None
    if modality == Modality.THERMAL:
        smooth = smooth_loss(rendered)
        total += weights.lambda_smooth * smooth
        g = g + weights.lambda_smooth * smooth_grad(rendered)
    return (l1, ds, smooth, total), g


def mr_gamma(n_thermal: int, n_rgb: int) -> float:
    """Count-based regularization coefficient N_th / (N_th + N_rgb)."""
    if n_thermal < 0 or n_rgb < 0:
        raise UndefinedCoefficientError("Gaussian counts must be non-negative")
    total = n_thermal + n_rgb
    if total == 0:
        raise UndefinedCoefficientError("gamma undefined for zero Gaussians")
    return n_thermal / total


def joint_loss(loss_rgb: float, loss_thermal: float, gamma: float | None = None) -> float:
    """Plain sum of the modality losses, or the gamma-weighted combination."""
    if gamma is None:
        return loss_rgb + loss_thermal
    return gamma * loss_rgb + (1.0 - gamma) * loss_thermal


@dataclass
class LossReport:
    """Per-iteration training telemetry, one JSON object per log line."""

    iteration: int
    total: float
    l1_rgb: float | None = None
    dssim_rgb: float | None = None
    l1_thermal: float | None = None
    dssim_thermal: float | None = None
    smooth_thermal: float | None = None
    loss_rgb: float | None = None
    loss_thermal: float | None = None
    gamma: float | None = None
    n_rgb: int | None = None
    n_thermal: int | None = None

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))
