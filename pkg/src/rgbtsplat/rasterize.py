"""Screen-space projection and depth-ordered alpha compositing.

The production path splits the frame into 16x16 tiles, bins splats by their
screen-space extent and composites each tile front to back, vectorized over
pixels.  Per pixel the arithmetic follows the exact same sequence as the
unoptimized reference compositor, so the two agree to floating-point noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .core import GaussianCloud, Modality, n_sh_coeffs, sh_basis
from .errors import ModalityMismatchError, StateError

TILE = 16
NEAR_PLANE = 0.2
LOWPASS_FLOOR = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_EPS = 1e-4
# Binning / cull radius in units of the largest 2D std-dev.  3.5 sigma is past
# the point where alpha can still reach the 1/255 skip threshold (3.33 sigma
# at alpha_base 0.99), so a splat culled for missing the viewport contributes
# exactly zero even when force-included.
CULL_SIGMA = 3.5
CULL_PAD = 1.0


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    alpha_base: float
    channel_values: np.ndarray
    source_index: int = 0


@dataclass
class ProjectedSplats:
    """Vectorized projection results, sorted by (depth, source index)."""

    idx: np.ndarray          # (K,) global Gaussian indices
    xyz_cam: np.ndarray      # (K,3)
    mean2d: np.ndarray       # (K,2)
    cov2d: np.ndarray        # (K,2,2)
    conic: np.ndarray        # (K,3)  inverse-covariance entries (A,B,C)
    depth: np.ndarray        # (K,)
    alpha_base: np.ndarray   # (K,)
    values: np.ndarray       # (K,M) channel values after the SH clamp
    raw_sh: np.ndarray       # (K,M) pre-clamp SH output (offset included)
    viewdir: np.ndarray      # (K,3)
    viewnorm: np.ndarray     # (K,)
    radius: np.ndarray       # (K,)
    visible: np.ndarray      # (N,) bool: survives culling

    def __len__(self):
        return self.idx.shape[0]


@dataclass
class Retained:
    cloud: GaussianCloud
    cloud_version: int
    camera: Camera
    modalities: tuple
    active_degrees: dict
    clamp: bool
    proj: ProjectedSplats
    channel_slices: dict
    background: float = 0.0
    tiles: list | None = None   # per-tile (tile_id, splat indices, intermediates)


@dataclass
class RenderOutput:
    image: np.ndarray          # (H,W) or (H,W,3), clamped to [0,1] if requested
    image_raw: np.ndarray      # pre-clamp composite
    accum_alpha: np.ndarray    # (H,W)
    contrib_count: np.ndarray  # (H,W) int
    modalities: tuple = (Modality.RGB,)
    retained: Retained | None = None


def _active_degree(cloud: GaussianCloud, modality: Modality, requested) -> int:
    stored = (
        cloud.sh_degree_rgb if modality == Modality.RGB else cloud.sh_degree_thermal
    )
    if requested is None:
        return stored
    return min(int(requested), stored)


def evaluate_channels(cloud: GaussianCloud, cam: Camera, modalities, active_degrees):
    """Per-Gaussian channel values for the requested modalities.

    Returns (values, raw, slices): values (N,M) clamped, raw (N,M) pre-clamp,
    and a modality -> column-slice map.
    """
    centers = cloud.positions - cam.camera_center
    norms = np.linalg.norm(centers, axis=1)
    norms = np.maximum(norms, 1e-12)
    dirs = centers / norms[:, None]
    cols = []
    raw_cols = []
    slices = {}
    start = 0
    for m in modalities:
        coeffs = cloud.sh_for(m)
        deg = active_degrees[m]
        n = n_sh_coeffs(deg)
        basis = sh_basis(dirs, deg)  # (N, n)
        raw = np.einsum("kn,knc->kc", basis, coeffs[:, :n, :]) + 0.5
        raw_cols.append(raw)
        cols.append(np.maximum(raw, 0.0))
        slices[m] = slice(start, start + raw.shape[1])
        start += raw.shape[1]
    return np.concatenate(cols, axis=1), np.concatenate(raw_cols, axis=1), dirs, norms, slices


def perspective_jacobian(xyz_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """2x3 Jacobian of pinhole projection at camera-space points (K,3)."""
    x, y, z = xyz_cam[..., 0], xyz_cam[..., 1], xyz_cam[..., 2]
    J = np.zeros(xyz_cam.shape[:-1] + (2, 3), dtype=np.float64)
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def _covariance3d(cloud: GaussianCloud) -> np.ndarray:
    from .core import quat_to_rotmat

    R = quat_to_rotmat(cloud.unit_rotations())
    M = R * cloud.scales()[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def project_cloud(
    cloud: GaussianCloud,
    cam: Camera,
    modalities=(Modality.RGB,),
    active_degrees=None,
) -> ProjectedSplats:
    """Project every Gaussian, cull, depth-sort, evaluate channel values."""
    modalities = tuple(modalities)
    for m in modalities:
        if not cloud.has_modality(m):
            raise ModalityMismatchError(f"cloud carries no {m.value} channels")
    degrees = {
        m: _active_degree(cloud, m, None if active_degrees is None else active_degrees.get(m))
        for m in modalities
    }

    n = len(cloud)
    xyz_cam = cloud.positions @ cam.R.T + cam.t
    z = xyz_cam[:, 2]
    in_front = z > NEAR_PLANE

    # Screen-space mean and covariance (EWA approximation + low-pass floor).
    zs = np.where(in_front, z, 1.0)
    u = cam.fx * xyz_cam[:, 0] / zs + cam.cx
    v = cam.fy * xyz_cam[:, 1] / zs + cam.cy
    J = perspective_jacobian(np.where(in_front[:, None], xyz_cam, [0.0, 0.0, 1.0]), cam.fx, cam.fy)
    sigma = _covariance3d(cloud)
    m_cam = np.einsum("ab,kbc,dc->kad", cam.R, sigma, cam.R)
    cov2d = np.einsum("kab,kbc,kdc->kad", J, m_cam, J)
    cov2d[:, 0, 0] += LOWPASS_FLOOR
    cov2d[:, 1, 1] += LOWPASS_FLOOR

    # Largest eigenvalue of the 2x2 covariance -> conservative pixel radius.
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2, 0.0))
    lam_max = mid + disc
    radius = CULL_SIGMA * np.sqrt(lam_max) + CULL_PAD

    on_screen = (
        (u + radius >= 0.0)
        & (u - radius <= cam.width - 1.0)
        & (v + radius >= 0.0)
        & (v - radius <= cam.height - 1.0)
    )
    visible = in_front & on_screen
    kept = np.flatnonzero(visible)
    # Stable depth sort; ties fall back to ascending source index.
    order = kept[np.argsort(z[kept], kind="stable")]

    values_all, raw_all, dirs, norms, slices = evaluate_channels(
        cloud, cam, modalities, degrees
    )

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
    )

    alpha_base = cloud.opacities()

    return ProjectedSplats(
        idx=order,
        xyz_cam=xyz_cam[order],
        mean2d=np.stack([u, v], axis=1)[order],
        cov2d=cov2d[order],
        conic=conic[order],
        depth=z[order],
        alpha_base=alpha_base[order],
        values=values_all[order],
        raw_sh=raw_all[order],
        viewdir=dirs[order],
        viewnorm=norms[order],
        radius=radius[order],
        visible=visible,
    )


def project_gaussian(g, cam: Camera) -> Splat2D | None:
    """Project a single Gaussian; returns None when culled.

    Accepts a Gaussian3D (activated internally) and evaluates whatever
    channels it carries at their stored degree.
    """
    from .core import Gaussian3D, GaussianCloud

    if isinstance(g, Gaussian3D):
        cloud = GaussianCloud.from_gaussians([g])
    else:
        raise TypeError("project_gaussian expects a Gaussian3D")
    mods = tuple(sorted(cloud.modality_mask, key=lambda m: m.value, reverse=True))
    proj = project_cloud(cloud, cam, mods)
    if len(proj) == 0:
        return None
    return Splat2D(
        mean2d=proj.mean2d[0],
        cov2d=proj.cov2d[0],
        depth=float(proj.depth[0]),
        alpha_base=float(proj.alpha_base[0]),
        channel_values=proj.values[0],
        source_index=0,
    )


def _composite_core(mean2d, conic, alpha_base, values, px, py, background=0.0):
    """Front-to-back compositing of sorted splats over a flat pixel set.

    Returns (image (P,M), accum_alpha (P,), n_contrib (P,)) plus the
    intermediates the backward pass reuses.  The background shows through
    the final transmittance.
    """
    K = mean2d.shape[0]
    P = px.shape[0]
    M = values.shape[1]
    if K == 0:
        return (
            np.full((P, M), background),
            np.zeros(P),
            np.zeros(P, dtype=np.int32),
            None,
        )

    dx = px - mean2d[:, 0, None]
    dy = py - mean2d[:, 1, None]
    power = dx * dx
    power *= conic[:, 0, None]
    tmp = dx * dy
    tmp *= 2.0 * conic[:, 1, None]
    power += tmp
    tmp = dy * dy
    tmp *= conic[:, 2, None]
    power += tmp
    power *= -0.5
    np.minimum(power, 0.0, out=power)
    g = np.exp(power)
    alpha = alpha_base[:, None] * g
    np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    skip = alpha < ALPHA_SKIP
    alpha_eff = np.where(skip, 0.0, alpha)

    t_excl = np.empty((K + 1, P))
    t_excl[0] = 1.0
    np.cumprod(1.0 - alpha_eff, axis=0, out=t_excl[1:])
    test_t = t_excl[1:]

    # First non-skipped splat that would push transmittance below the floor
    # terminates the pixel; it and everything after contribute nothing.
    bad = (test_t < TRANSMITTANCE_EPS) & ~skip
    any_bad = bad.any(axis=0)
    if any_bad.any():
        cut = np.where(any_bad, np.argmax(bad, axis=0), K)
        contrib = (np.arange(K)[:, None] < cut) & ~skip
        t_final = t_excl[cut, np.arange(P)]
    else:
        cut = None
        contrib = ~skip
        t_final = t_excl[K]

    weights = np.where(contrib, alpha_eff * t_excl[:-1], 0.0)
    image = weights.T @ values
    if background != 0.0:
        image += background * t_final[:, None]
    accum_alpha = 1.0 - t_final
    n_contrib = contrib.sum(axis=0).astype(np.int32)

    inter = {
        "dx": dx,
        "dy": dy,
        "g": g,
        "alpha_eff": alpha_eff,
        "t_excl": t_excl[:-1],
        "t_final": t_final,
        "contrib": contrib,
        "weights": weights,
    }
    return image, accum_alpha, n_contrib, inter


def composite_tile(splats: list[Splat2D], region, n_channels: int | None = None) -> RenderOutput:
    """Composite an explicit depth-sorted splat list over a pixel region.

    region: (x0, y0, x1, y1) half-open pixel bounds.  Raises an assertion on
    unsorted input (contract violation).
    """
    x0, y0, x1, y1 = region
    depths = [s.depth for s in splats]
    assert all(a <= b for a, b in zip(depths, depths[1:])), "splats must be depth-sorted"
    if n_channels is None:
        n_channels = len(splats[0].channel_values) if splats else 1
    h, w = y1 - y0, x1 - x0
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs.ravel().astype(np.float64)
    py = ys.ravel().astype(np.float64)
    if splats:
        mean2d = np.stack([s.mean2d for s in splats]).astype(np.float64)
        cov2d = np.stack([s.cov2d for s in splats]).astype(np.float64)
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        conic = np.stack(
            [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
        )
        alpha_base = np.array([s.alpha_base for s in splats], dtype=np.float64)
        values = np.stack([np.atleast_1d(s.channel_values) for s in splats]).astype(np.float64)
    else:
        mean2d = np.zeros((0, 2))
        conic = np.zeros((0, 3))
        alpha_base = np.zeros(0)
        values = np.zeros((0, n_channels))
    image, accum, count, _ = _composite_core(mean2d, conic, alpha_base, values, px, py)
    return RenderOutput(
        image=image.reshape(h, w, n_channels),
        image_raw=image.reshape(h, w, n_channels),
        accum_alpha=accum.reshape(h, w),
        contrib_count=count.reshape(h, w),
    )


_grid_cache: dict = {}


def _pixel_coords(x0, x1, y0, y1):
    """Flat pixel-center coordinates of a tile (cached base grid + offset)."""
    h, w = y1 - y0, x1 - x0
    key = (h, w)
    if key not in _grid_cache:
        ys, xs = np.mgrid[0:h, 0:w]
        _grid_cache[key] = (xs.ravel().astype(np.float64), ys.ravel().astype(np.float64))
    bx, by = _grid_cache[key]
    return bx + x0, by + y0


def _tile_bins(proj: ProjectedSplats, width: int, height: int):
    """Group splat indices (in sorted order) by the 16x16 tiles they touch."""
    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    K = len(proj)
    if K == 0:
        return n_tx, n_ty, {}
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    r = proj.radius
    tx0 = np.clip(((u - r) // TILE).astype(np.int64), 0, n_tx - 1)
    tx1 = np.clip(((u + r) // TILE).astype(np.int64), 0, n_tx - 1)
    ty0 = np.clip(((v - r) // TILE).astype(np.int64), 0, n_ty - 1)
    ty1 = np.clip(((v + r) // TILE).astype(np.int64), 0, n_ty - 1)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = (nx * ny).astype(np.int64)
    total = int(counts.sum())
    splat_of_pair = np.repeat(np.arange(K), counts)
    # Local (tile-within-rect) offsets for every (splat, tile) pair.
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    local_x = offs % np.repeat(nx, counts)
    local_y = offs // np.repeat(nx, counts)
    tile_id = (np.repeat(ty0, counts) + local_y) * n_tx + (np.repeat(tx0, counts) + local_x)
    order = np.argsort(tile_id, kind="stable")  # preserves depth order per tile
    tile_sorted = tile_id[order]
    splat_sorted = splat_of_pair[order]
    bounds = np.searchsorted(tile_sorted, np.arange(n_tx * n_ty + 1))
    bins = {}
    for tid in np.unique(tile_sorted):
        bins[int(tid)] = splat_sorted[bounds[tid] : bounds[tid + 1]]
    return n_tx, n_ty, bins


def render_channels(
    cloud: GaussianCloud,
    cam: Camera,
    modalities,
    active_degrees=None,
    clamp: bool = True,
    retain: bool = True,
    background: float = 0.0,
) -> RenderOutput:
    """Tiled multi-channel render; channels of all requested modalities are
    composited with the shared per-splat alphas."""
    modalities = tuple(modalities)
    proj = project_cloud(cloud, cam, modalities, active_degrees)
    degrees = {
        m: _active_degree(cloud, m, None if active_degrees is None else active_degrees.get(m))
        for m in modalities
    }
    H, W = cam.height, cam.width
    M = proj.values.shape[1] if len(proj) else sum(
        3 if m == Modality.RGB else 1 for m in modalities
    )
    image = np.full((H, W, M), float(background))
    accum = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int32)

    n_tx, n_ty, bins = _tile_bins(proj, W, H)
    tiles = [] if retain else None
    for tid, kidx in bins.items():
        ty, tx = divmod(tid, n_tx)
        x0, x1 = tx * TILE, min((tx + 1) * TILE, W)
        y0, y1 = ty * TILE, min((ty + 1) * TILE, H)
        px, py = _pixel_coords(x0, x1, y0, y1)
        img_t, acc_t, cnt_t, inter = _composite_core(
            proj.mean2d[kidx], proj.conic[kidx], proj.alpha_base[kidx],
            proj.values[kidx], px, py, background,
        )
        h, w = y1 - y0, x1 - x0
        image[y0:y1, x0:x1] = img_t.reshape(h, w, M)
        accum[y0:y1, x0:x1] = acc_t.reshape(h, w)
        count[y0:y1, x0:x1] = cnt_t.reshape(h, w)
        if retain:
            tiles.append((tid, kidx, inter))

    raw = image
    out_img = np.clip(raw, 0.0, 1.0) if clamp else raw.copy()
    slices = {}
    start = 0
    for m in modalities:
        width_m = 3 if m == Modality.RGB else 1
        slices[m] = slice(start, start + width_m)
        start += width_m
    retained = None
    if retain:
        retained = Retained(
            cloud=cloud,
            cloud_version=cloud.version,
            camera=cam,
            modalities=modalities,
            active_degrees=degrees,
            clamp=clamp,
            proj=proj,
            channel_slices=slices,
            background=float(background),
            tiles=tiles,
        )
    return RenderOutput(
        image=out_img,
        image_raw=raw,
        accum_alpha=accum,
        contrib_count=count,
        modalities=modalities,
        retained=retained,
    )


def _squeeze_modality(img: np.ndarray, modality: Modality) -> np.ndarray:
    return img[..., 0] if modality == Modality.THERMAL else img


def render(
    cloud: GaussianCloud,
    cam: Camera,
    modality: Modality,
    active_degree=None,
    clamp: bool = True,
    retain: bool = True,
    background: float = 0.0,
) -> RenderOutput:
    """Render one modality.  RGB images are (H,W,3); thermal images (H,W)."""
    degrees = None if active_degree is None else {modality: active_degree}
    out = render_channels(cloud, cam, (modality,), degrees, clamp=clamp, retain=retain,
                          background=background)
    out.image = _squeeze_modality(out.image, modality)
    out.image_raw = _squeeze_modality(out.image_raw, modality)
    return out


def render_reference(
    cloud: GaussianCloud,
    cam: Camera,
    modality: Modality,
    active_degree=None,
    clamp: bool = True,
    background: float = 0.0,
) -> RenderOutput:
    """Brute-force global-sort compositor: a plain per-pixel loop over the
    full depth-sorted splat list.  Test oracle for the tiled path."""
    degrees = None if active_degree is None else {modality: active_degree}
    proj = project_cloud(cloud, cam, (modality,), degrees)
    H, W = cam.height, cam.width
    M = proj.values.shape[1] if len(proj) else (3 if modality == Modality.RGB else 1)
    image = np.zeros((H, W, M))
    accum = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int32)

    mean = proj.mean2d.tolist()
    conic = proj.conic.tolist()
    abase = proj.alpha_base.tolist()
    vals = proj.values.tolist()
    K = len(proj)
    import math

    for yi in range(H):
        for xi in range(W):
            T = 1.0
            acc = [0.0] * M
            n = 0
            for k in range(K):
                dx = xi - mean[k][0]
                dy = yi - mean[k][1]
                A, B, C = conic[k]
                p = -0.5 * (A * dx * dx + 2.0 * B * dx * dy + C * dy * dy)
                if p > 0.0:
                    p = 0.0
                a = abase[k] * math.exp(p)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                if a < ALPHA_SKIP:
                    continue
                test_t = T * (1.0 - a)
                if test_t < TRANSMITTANCE_EPS:
                    break
                for m in range(M):
                    acc[m] += vals[k][m] * a * T
                T = test_t
                n += 1
            for m in range(M):
                acc[m] += background * T
            image[yi, xi] = acc
            accum[yi, xi] = 1.0 - T
            count[yi, xi] = n

    raw = image
    out_img = np.clip(raw, 0.0, 1.0) if clamp else raw.copy()
    out = RenderOutput(
        image=_squeeze_modality(out_img, modality),
        image_raw=_squeeze_modality(raw, modality),
        accum_alpha=accum,
        contrib_count=count,
        modalities=(modality,),
    )
    return out


def check_retained(out: RenderOutput, cloud: GaussianCloud, cam: Camera) -> Retained:
    r = out.retained
    if r is None:
        raise StateError("render was called without retain=True")
    if r.cloud is not cloud or r.cloud_version != cloud.version:
        raise StateError("retained forward buffers are stale (cloud mutated)")
    if r.camera is not cam:
        raise StateError("retained buffers belong to a different camera")
    return r
