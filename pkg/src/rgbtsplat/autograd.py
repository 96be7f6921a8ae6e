"""Analytic reverse-mode gradients for the render pipeline.

backward() differentiates exactly the function the tiled renderer computes,
including the alpha clamp, the skip threshold and early termination (all with
zero sub-gradient past their boundaries), so central finite differences on the
same forward agree everywhere away from those measure-zero crossings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .core import (
    GaussianCloud,
    Modality,
    n_sh_coeffs,
    quat_rotmat_partials,
    quat_to_rotmat,
    sh_basis,
    sh_basis_grad,
)
from .errors import OracleInvalidError, ShapeMismatchError, StateError
from .rasterize import (
    ALPHA_CLAMP,
    RenderOutput,
    _composite_core,
    _pixel_coords,
    _tile_bins,
    check_retained,
    perspective_jacobian,
    TILE,
)


@dataclass
class ParameterGradients:
    """Gradients mirroring the cloud layout, plus densification statistics."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    sh_rgb: np.ndarray | None
    sh_thermal: np.ndarray | None
    pos2d_ndc: np.ndarray       # (N,2) screen gradient in NDC units
    visible: np.ndarray         # (N,) bool

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "ParameterGradients":
        n = len(cloud)
        return cls(
            position=np.zeros((n, 3)),
            log_scale=np.zeros((n, 3)),
            rotation=np.zeros((n, 4)),
            opacity_logit=np.zeros(n),
            sh_rgb=None if cloud.sh_rgb is None else np.zeros_like(cloud.sh_rgb),
            sh_thermal=None
            if cloud.sh_thermal is None
            else np.zeros_like(cloud.sh_thermal),
            pos2d_ndc=np.zeros((n, 2)),
            visible=np.zeros(n, dtype=bool),
        )

    def add_(self, other: "ParameterGradients"):
        self.position += other.position
        self.log_scale += other.log_scale
        self.rotation += other.rotation
        self.opacity_logit += other.opacity_logit
        if self.sh_rgb is not None and other.sh_rgb is not None:
            self.sh_rgb += other.sh_rgb
        if self.sh_thermal is not None and other.sh_thermal is not None:
            self.sh_thermal += other.sh_thermal
        self.pos2d_ndc += other.pos2d_ndc
        self.visible |= other.visible
        return self

    def scale_(self, factor: float):
        self.position *= factor
        self.log_scale *= factor
        self.rotation *= factor
        self.opacity_logit *= factor
        if self.sh_rgb is not None:
            self.sh_rgb *= factor
        if self.sh_thermal is not None:
            self.sh_thermal *= factor
        self.pos2d_ndc *= factor
        return self

    def all_finite(self) -> bool:
        parts = [self.position, self.log_scale, self.rotation, self.opacity_logit]
        if self.sh_rgb is not None:
            parts.append(self.sh_rgb)
        if self.sh_thermal is not None:
            parts.append(self.sh_thermal)
        return all(np.all(np.isfinite(p)) for p in parts)


def backward(
    cloud: GaussianCloud,
    cam: Camera,
    modality,
    upstream: np.ndarray,
    forward: RenderOutput,
) -> ParameterGradients:
    """Chain-rule gradients of sum(upstream * image) w.r.t. every parameter.

    `forward` must be the retained output of a matching render of `cloud`.
    """
    retained = check_retained(forward, cloud, cam)
    modalities = (modality,) if isinstance(modality, Modality) else tuple(modality)
    if modalities != retained.modalities:
        raise StateError(
            f"forward rendered {retained.modalities}, backward asked {modalities}"
        )
    proj = retained.proj
    H, W = cam.height, cam.width
    M = proj.values.shape[1] if len(proj) else sum(
        3 if m == Modality.RGB else 1 for m in modalities
    )

    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 2:
        up = up[:, :, None]
    if up.shape != (H, W, M):
        raise ShapeMismatchError(f"upstream shape {upstream.shape}, want {(H, W, M)}")
    if retained.clamp:
        raw = forward.image_raw
        raw = raw[:, :, None] if raw.ndim == 2 else raw
        up = up * (raw <= 1.0)

    grads = ParameterGradients.zeros_like(cloud)
    K = len(proj)
    grads.visible = proj.visible.copy()
    if K == 0:
        return grads

    d_values = np.zeros((K, M))
    d_alpha_base = np.zeros(K)
    d_conic = np.zeros((K, 3))
    d_mean = np.zeros((K, 2))

    n_tx = (W + TILE - 1) // TILE
    if retained.tiles is not None:
        tiles = retained.tiles
    else:
        tiles = []
        _, _, bins = _tile_bins(proj, W, H)
        for tid, kidx in bins.items():
            ty, tx = divmod(tid, n_tx)
            x0, x1 = tx * TILE, min((tx + 1) * TILE, W)
            y0, y1 = ty * TILE, min((ty + 1) * TILE, H)
            px, py = _pixel_coords(x0, x1, y0, y1)
            _, _, _, inter = _composite_core(
                proj.mean2d[kidx], proj.conic[kidx], proj.alpha_base[kidx],
                proj.values[kidx], px, py,
            )
            tiles.append((tid, kidx, inter))
    for tid, kidx, inter in tiles:
        ty, tx = divmod(tid, n_tx)
        x0, x1 = tx * TILE, min((tx + 1) * TILE, W)
        y0, y1 = ty * TILE, min((ty + 1) * TILE, H)
        vals_k = proj.values[kidx]
        up_t = up[y0:y1, x0:x1].reshape(-1, M)  # (P,M)

        weights = inter["weights"]              # (Kt,P) alpha*T on contributing pairs
        contrib = inter["contrib"]
        alpha_eff = inter["alpha_eff"]
        t_excl = inter["t_excl"]
        g = inter["g"]
        dx, dy = inter["dx"], inter["dy"]

        d_values[kidx] += weights @ up_t

        e = vals_k @ up_t.T                     # (Kt,P)
        f = e * weights
        cs = np.cumsum(f[::-1], axis=0)[::-1]
        suffix = cs - f
        if retained.background != 0.0:
            # the background shines through the final transmittance, which
            # every contributing alpha attenuates
            suffix = suffix + retained.background * up_t.sum(axis=1) * inter["t_final"]
        d_alpha = np.where(
            contrib, e * t_excl - suffix / (1.0 - alpha_eff), 0.0
        )
        unclamped = proj.alpha_base[kidx, None] * g < ALPHA_CLAMP
        d_ag = d_alpha * unclamped
        d_alpha_base[kidx] += (d_ag * g).sum(axis=1)
        d_power = d_ag * proj.alpha_base[kidx, None] * g

        conic_t = proj.conic[kidx]
        d_conic[kidx, 0] += (-0.5 * dx * dx * d_power).sum(axis=1)
        d_conic[kidx, 1] += (-dx * dy * d_power).sum(axis=1)
        d_conic[kidx, 2] += (-0.5 * dy * dy * d_power).sum(axis=1)
        d_mean[kidx, 0] += (
            d_power * (conic_t[:, 0, None] * dx + conic_t[:, 1, None] * dy)
        ).sum(axis=1)
        d_mean[kidx, 1] += (
            d_power * (conic_t[:, 1, None] * dx + conic_t[:, 2, None] * dy)
        ).sum(axis=1)

    # --- projection chain, vectorized over kept splats ---
    kept = proj.idx
    fx, fy = cam.fx, cam.fy
    x, y, z = proj.xyz_cam[:, 0], proj.xyz_cam[:, 1], proj.xyz_cam[:, 2]

    # conic -> 2D covariance (inverse backward, symmetric convention)
    lam = np.empty((K, 2, 2))
    lam[:, 0, 0] = proj.conic[:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = proj.conic[:, 1]
    lam[:, 1, 1] = proj.conic[:, 2]
    d_lam = np.empty((K, 2, 2))
    d_lam[:, 0, 0] = d_conic[:, 0]
    d_lam[:, 0, 1] = d_lam[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_lam[:, 1, 1] = d_conic[:, 2]
    d_cov = -np.einsum("kab,kbc,kcd->kad", lam, d_lam, lam)

    # cov2d = J Mcam J^T + floor
    s_kept = np.exp(cloud.log_scales[kept])
    q_raw = cloud.rotations[kept]
    q_norm = np.linalg.norm(q_raw, axis=1)
    q_hat = q_raw / q_norm[:, None]
    r_q = quat_to_rotmat(q_hat)
    m3 = r_q * s_kept[:, None, :]
    sigma = m3 @ np.swapaxes(m3, 1, 2)
    m_cam = np.einsum("ab,kbc,dc->kad", cam.R, sigma, cam.R)
    J = perspective_jacobian(proj.xyz_cam, fx, fy)

    d_mcam = np.einsum("kai,kab,kbj->kij", J, d_cov, J)
    d_J = 2.0 * np.einsum("kab,kbc,kcd->kad", d_cov, J, m_cam)

    # camera-space point gradients from the mean and from J
    z2 = z * z
    z3 = z2 * z
    d_t = np.zeros((K, 3))
    d_t[:, 0] = d_mean[:, 0] * fx / z + d_J[:, 0, 2] * (-fx / z2)
    d_t[:, 1] = d_mean[:, 1] * fy / z + d_J[:, 1, 2] * (-fy / z2)
    d_t[:, 2] = (
        d_mean[:, 0] * (-fx * x / z2)
        + d_mean[:, 1] * (-fy * y / z2)
        + d_J[:, 0, 0] * (-fx / z2)
        + d_J[:, 1, 1] * (-fy / z2)
        + d_J[:, 0, 2] * (2.0 * fx * x / z3)
        + d_J[:, 1, 2] * (2.0 * fy * y / z3)
    )

    d_sigma = np.einsum("ba,kbc,cd->kad", cam.R, d_mcam, cam.R)
    d_m3 = 2.0 * d_sigma @ m3
    d_scale = (d_m3 * r_q).sum(axis=1)
    d_log_scale = d_scale * s_kept
    d_rq = d_m3 * s_kept[:, None, :]
    partials = quat_rotmat_partials(q_hat)
    d_qhat = np.einsum("kab,kcab->kc", d_rq, partials)
    p_tan = (np.eye(4)[None] - q_hat[:, :, None] * q_hat[:, None, :]) / q_norm[:, None, None]
    d_q = np.einsum("kab,kb->ka", p_tan, d_qhat)

    # SH clamp mask, coefficient and view-direction gradients
    d_pos_view = np.zeros((K, 3))
    df = d_values * (proj.raw_sh > 0.0)
    for m in retained.modalities:
        sl = retained.channel_slices[m]
        deg = retained.active_degrees[m]
        n = n_sh_coeffs(deg)
        basis = sh_basis(proj.viewdir, deg)            # (K,n)
        coeffs = cloud.sh_for(m)[kept][:, :n, :]       # (K,n,C)
        df_m = df[:, sl]                               # (K,C)
        d_coeff = basis[:, :, None] * df_m[:, None, :]  # (K,n,C)
        target = grads.sh_rgb if m == Modality.RGB else grads.sh_thermal
        target[kept[:, None], np.arange(n)[None, :]] += d_coeff
        bgrad = sh_basis_grad(proj.viewdir, deg)       # (K,n,3)
        d_pos_view += np.einsum("knc,kc,knd->kd", coeffs, df_m, bgrad)
    eye3 = np.eye(3)[None]
    p_dir = (eye3 - proj.viewdir[:, :, None] * proj.viewdir[:, None, :]) / proj.viewnorm[
        :, None, None
    ]
    d_mu = np.einsum("kab,kb->ka", p_dir, d_pos_view)
    d_mu += d_t @ cam.R

    a = proj.alpha_base
    grads.position[kept] += d_mu
    grads.log_scale[kept] += d_log_scale
    grads.rotation[kept] += d_q
    grads.opacity_logit[kept] += d_alpha_base * a * (1.0 - a)
    grads.pos2d_ndc[kept, 0] += d_mean[:, 0] * (W / 2.0)
    grads.pos2d_ndc[kept, 1] += d_mean[:, 1] * (H / 2.0)
    return grads


_PARAM_FIELDS = ("position", "log_scale", "rotation", "opacity_logit", "sh_rgb", "sh_thermal")

_CLOUD_ATTR = {
    "position": "positions",
    "log_scale": "log_scales",
    "rotation": "rotations",
    "opacity_logit": "opacity_logits",
    "sh_rgb": "sh_rgb",
    "sh_thermal": "sh_thermal",
}


def finite_difference_oracle(loss_fn, cloud: GaussianCloud, parameter: str, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of loss_fn(cloud) w.r.t. one parameter array.

    Ground truth for backward(); perturbs the cloud in place and restores it.
    Raises OracleInvalidError when loss_fn is not deterministic.
    """
    if step <= 0:
        raise OracleInvalidError("step must be positive")
    if parameter not in _CLOUD_ATTR:
        raise OracleInvalidError(f"unknown parameter class {parameter!r}")
    arr = getattr(cloud, _CLOUD_ATTR[parameter])
    if arr is None:
        raise OracleInvalidError(f"cloud carries no {parameter}")
    f0 = float(loss_fn(cloud))
    if float(loss_fn(cloud)) != f0:
        raise OracleInvalidError("loss_fn is not deterministic")
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        cloud.touch()
        f_plus = float(loss_fn(cloud))
        flat[i] = orig - step
        cloud.touch()
        f_minus = float(loss_fn(cloud))
        flat[i] = orig
        cloud.touch()
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def gradients_as_dict(g: ParameterGradients) -> dict:
    out = {
        "position": g.position,
        "log_scale": g.log_scale,
        "rotation": g.rotation,
        "opacity_logit": g.opacity_logit,
    }
    if g.sh_rgb is not None:
        out["sh_rgb"] = g.sh_rgb
    if g.sh_thermal is not None:
        out["sh_thermal"] = g.sh_thermal
    return out
