"""Learnable Gaussian scene representation and the math shared by every strategy.

A scene is a cloud of anisotropic 3D Gaussians.  Each Gaussian carries its
geometry in unconstrained form (log scales, raw quaternion, opacity logit) so
the optimizer never has to respect constraints explicitly, plus per-modality
spherical-harmonic coefficients: 3-channel for RGB, 1-channel for thermal.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateCovarianceError,
    InvalidParameterError,
    ModalityMismatchError,
)


class Modality(str, Enum):
    RGB = "rgb"
    THERMAL = "thermal"


# Real spherical harmonic basis constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3


def n_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    dirs: (..., 3) unit vectors.  Returns (..., (degree+1)**2).
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ConfigurationError(f"SH degree {degree} outside supported range 0..3")
    dirs = np.asarray(dirs, dtype=np.float64)
    out = np.empty(dirs.shape[:-1] + (n_sh_coeffs(degree),), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of every basis function w.r.t. the direction components.

    Returns (..., (degree+1)**2, 3): d Y_i / d dir_j.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ConfigurationError(f"SH degree {degree} outside supported range 0..3")
    dirs = np.asarray(dirs, dtype=np.float64)
    n = n_sh_coeffs(degree)
    g = np.zeros(dirs.shape[:-1] + (n, 3), dtype=np.float64)
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
        g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
        g[..., 6, 2] = SH_C2[2] * (4.0 * z)
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * (2.0 * x)
        g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = SH_C3[2] * (8.0 * y * z)
        g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = SH_C3[4] * (8.0 * x * z)
        g[..., 14, 0] = SH_C3[5] * (2.0 * x * z)
        g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return g


def channel_to_dc(value: np.ndarray | float) -> np.ndarray | float:
    """DC coefficient that reproduces `value` under sh_evaluate's 0.5 offset."""
    return (np.asarray(value, dtype=np.float64) - 0.5) / SH_C0


def dc_to_channel(coeff: np.ndarray | float) -> np.ndarray | float:
    return np.asarray(coeff, dtype=np.float64) * SH_C0 + 0.5


def sh_evaluate(coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Channel values from SH coefficients seen from `view_dir`.

    coeffs: (n_coeffs, channels) with n_coeffs >= (degree+1)**2.
    Returns per-channel values: sum over the basis plus the conventional 0.5
    offset, clamped to be non-negative.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    need = n_sh_coeffs(degree)
    if coeffs.shape[0] < need:
        raise ConfigurationError(
            f"degree {degree} needs {need} coefficients, got {coeffs.shape[0]}"
        )
    basis = sh_basis(view_dir, degree)
    raw = basis @ coeffs[:need] + 0.5
    return np.maximum(raw, 0.0)


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidParameterError("zero quaternion cannot be normalized")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z).  Batched over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_rotmat_partials(q: np.ndarray) -> np.ndarray:
    """dR/dq for the formula in quat_to_rotmat, shape (..., 4, 3, 3).

    Valid on the unit sphere when combined with the normalization projection.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    d = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    d[..., 0, :, :] = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    d[..., 1, :, :] = 2.0 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2.0 * x, -w], axis=-1),
            np.stack([z, w, -2.0 * x], axis=-1),
        ],
        axis=-2,
    )
    d[..., 2, :, :] = 2.0 * np.stack(
        [
            np.stack([-2.0 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2.0 * y], axis=-1),
        ],
        axis=-2,
    )
    d[..., 3, :, :] = 2.0 * np.stack(
        [
            np.stack([-2.0 * z, -w, x], axis=-1),
            np.stack([w, -2.0 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return d


def covariance_from_factors(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """3x3 covariance R S S^T R^T from log scales and a unit quaternion."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("non-finite covariance factors")
    R = quat_to_rotmat(rotation)
    M = R * np.exp(log_scale)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def gaussian_density(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Unnormalized Gaussian kernel exp(-0.5 (x-mean)^T cov^-1 (x-mean))."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("covariance is not positive definite") from exc
    delta = x - mean
    u = np.linalg.solve(chol, delta)
    return float(np.exp(-0.5 * np.dot(u, u)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian3D:
    """One Gaussian in unconstrained parameterization."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_rgb: np.ndarray | None = None       # (n_coeffs, 3)
    sh_thermal: np.ndarray | None = None   # (n_coeffs, 1)

    def activated(self) -> "ActivatedGaussian":
        return activate_parameters(self)


@dataclass
class ActivatedGaussian:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray   # unit norm
    opacity: float
    sh_rgb: np.ndarray | None
    sh_thermal: np.ndarray | None


def activate_parameters(g: Gaussian3D) -> ActivatedGaussian:
    """Map unconstrained parameters to their constrained counterparts."""
    return ActivatedGaussian(
        position=np.asarray(g.position, dtype=np.float64),
        scale=np.exp(np.asarray(g.log_scale, dtype=np.float64)),
        rotation=normalize_quaternion(g.rotation),
        opacity=float(sigmoid(g.opacity_logit)),
        sh_rgb=None if g.sh_rgb is None else np.asarray(g.sh_rgb, dtype=np.float64),
        sh_thermal=None
        if g.sh_thermal is None
        else np.asarray(g.sh_thermal, dtype=np.float64),
    )


@dataclass
class ModalityWeights:
    """Loss weighting: dynamic gamma plus the fixed structural coefficients."""

    gamma: float = 0.5
    lambda_dssim: float = 0.2
    lambda_smooth: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma {self.gamma} outside [0, 1]")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ConfigurationError(f"lambda_dssim {self.lambda_dssim} outside [0, 1]")
        if self.lambda_smooth < 0.0:
            raise ConfigurationError(f"lambda_smooth {self.lambda_smooth} negative")


class GaussianCloud:
    """Struct-of-arrays container for the whole scene.

    Mutated only by the trainer between render passes; renders treat it as
    read-only value data.  `version` advances on every mutation so retained
    forward buffers can detect staleness.
    """

    def __init__(
        self,
        positions: np.ndarray,
        log_scales: np.ndarray,
        rotations: np.ndarray,
        opacity_logits: np.ndarray,
        sh_rgb: np.ndarray | None = None,
        sh_thermal: np.ndarray | None = None,
    ):
        self.positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(rotations, dtype=np.float64))
        self.opacity_logits = np.atleast_1d(
            np.asarray(opacity_logits, dtype=np.float64)
        )
        self.sh_rgb = None if sh_rgb is None else np.asarray(sh_rgb, dtype=np.float64)
        self.sh_thermal = (
            None if sh_thermal is None else np.asarray(sh_thermal, dtype=np.float64)
        )
        self.version = 0
        self._validate()

    def _validate(self):
        n = len(self)
        if n < 1:
            raise InvalidParameterError("cloud must contain at least one Gaussian")
        if self.sh_rgb is None and self.sh_thermal is None:
            raise ConfigurationError("cloud must carry at least one modality")
        for name, arr, shape in (
            ("positions", self.positions, (n, 3)),
            ("log_scales", self.log_scales, (n, 3)),
            ("rotations", self.rotations, (n, 4)),
            ("opacity_logits", self.opacity_logits, (n,)),
        ):
            if arr.shape != shape:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, want {shape}")
        if self.sh_rgb is not None and (
            self.sh_rgb.ndim != 3 or self.sh_rgb.shape[0] != n or self.sh_rgb.shape[2] != 3
        ):
            raise InvalidParameterError(f"sh_rgb has shape {self.sh_rgb.shape}")
        if self.sh_thermal is not None and (
            self.sh_thermal.ndim != 3
            or self.sh_thermal.shape[0] != n
            or self.sh_thermal.shape[2] != 1
        ):
            raise InvalidParameterError(f"sh_thermal has shape {self.sh_thermal.shape}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_rgb=None if self.sh_rgb is None else self.sh_rgb[i].copy(),
            sh_thermal=None if self.sh_thermal is None else self.sh_thermal[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D]) -> "GaussianCloud":
        if not gaussians:
            raise InvalidParameterError("cloud must contain at least one Gaussian")
        has_rgb = gaussians[0].sh_rgb is not None
        has_th = gaussians[0].sh_thermal is not None
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh_rgb=np.stack([g.sh_rgb for g in gaussians]) if has_rgb else None,
            sh_thermal=np.stack([g.sh_thermal for g in gaussians]) if has_th else None,
        )

    @property
    def modality_mask(self) -> frozenset:
        mods = set()
        if self.sh_rgb is not None:
            mods.add(Modality.RGB)
        if self.sh_thermal is not None:
            mods.add(Modality.THERMAL)
        return frozenset(mods)

    @property
    def sh_degree_rgb(self) -> int | None:
        if self.sh_rgb is None:
            return None
        return int(round(np.sqrt(self.sh_rgb.shape[1]))) - 1

    @property
    def sh_degree_thermal(self) -> int | None:
        if self.sh_thermal is None:
            return None
        return int(round(np.sqrt(self.sh_thermal.shape[1]))) - 1

    def has_modality(self, modality: Modality) -> bool:
        return modality in self.modality_mask

    def sh_for(self, modality: Modality) -> np.ndarray:
        arr = self.sh_rgb if modality == Modality.RGB else self.sh_thermal
        if arr is None:
            raise ModalityMismatchError(f"cloud carries no {modality.value} channels")
        return arr

    def touch(self):
        """Mark the cloud as mutated (invalidates retained render buffers)."""
        self.version += 1

    def copy(self) -> "GaussianCloud":
        c = GaussianCloud(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            None if self.sh_rgb is None else self.sh_rgb.copy(),
            None if self.sh_thermal is None else self.sh_thermal.copy(),
        )
        return c

    # Activated views, vectorized over the whole cloud.
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternion(self.rotations)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)
