"""Scene loading, multimodal initialization utilities, synthetic scenes and
model serialization.

On-disk scene layout: a `scene.json` manifest next to 8-bit RGB PNGs and
16-bit grayscale thermal PNGs.  Poses are row-major 4x4 camera-to-world;
axes +x right, +y down, +z forward.  Stored 16-bit thermal values map
linearly onto the manifest's [t_min, t_max] temperature range.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .cameras import Camera
from .core import GaussianCloud, Modality, channel_to_dc, inverse_sigmoid
from .errors import InvalidParameterError, SceneFormatError, ShapeMismatchError
from .rasterize import render_reference

THERMAL_MAX = 65535


# ---------------------------------------------------------------------------
# images

def write_rgb8(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path)


def read_rgb8(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_gray16(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    raw = np.round(arr * THERMAL_MAX).astype(np.uint16)
    Image.fromarray(raw).save(path)  # PIL maps uint16 to 16-bit grayscale


def read_gray16(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / THERMAL_MAX


def quantize_rgb8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def quantize_gray16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * THERMAL_MAX) / THERMAL_MAX


def normalize_thermal(raw: np.ndarray) -> np.ndarray:
    """Stored 16-bit values -> [0,1] normalized temperature."""
    return np.asarray(raw, dtype=np.float64) / THERMAL_MAX


def denormalize_thermal(norm: np.ndarray) -> np.ndarray:
    return np.round(np.clip(norm, 0.0, 1.0) * THERMAL_MAX).astype(np.uint16)


def temperature_of(norm: np.ndarray, thermal_range) -> np.ndarray:
    t_min, t_max = thermal_range
    return t_min + np.asarray(norm) * (t_max - t_min)


# ---------------------------------------------------------------------------
# scene containers

@dataclass
class InitialPoints:
    positions: np.ndarray            # (P,3)
    rgb: np.ndarray | None = None    # (P,3) channel values in [0,1]
    thermal: np.ndarray | None = None  # (P,)


@dataclass
class Frame:
    camera: Camera
    camera_id: str
    rgb: np.ndarray | None = None      # (H,W,3)
    thermal: np.ndarray | None = None  # (H,W)
    thermal_mask: np.ndarray | None = None
    rgb_path: str | None = None
    thermal_path: str | None = None

    def target(self, modality: Modality):
        return self.rgb if modality == Modality.RGB else self.thermal


@dataclass
class FrameSet:
    frames: list
    thermal_range: tuple = (0.0, 100.0)
    initial_points: InitialPoints | None = None
    root: str | None = None

    def __post_init__(self):
        t_min, t_max = self.thermal_range
        if not t_min < t_max:
            raise SceneFormatError(f"thermal range [{t_min}, {t_max}] is empty")

    def __len__(self):
        return len(self.frames)

    def modalities(self) -> frozenset:
        mods = set()
        if all(f.rgb is not None for f in self.frames):
            mods.add(Modality.RGB)
        if all(f.thermal is not None for f in self.frames):
            mods.add(Modality.THERMAL)
        return frozenset(mods)

    def scene_extent(self) -> float:
        centers = np.stack([f.camera.camera_center for f in self.frames])
        centroid = centers.mean(axis=0)
        radius = np.linalg.norm(centers - centroid, axis=1).max()
        return float(max(1.1 * radius, 1e-6))


# ---------------------------------------------------------------------------
# rig calibration and registration

@dataclass
class RigCalibration:
    """Intrinsics of both sensors and the thermal-to-RGB rigid transform."""

    K_rgb: np.ndarray
    K_th: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.K_rgb = np.asarray(self.K_rgb, dtype=np.float64)
        self.K_th = np.asarray(self.K_th, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.K_rgb.shape != (3, 3) or self.K_th.shape != (3, 3):
            raise InvalidParameterError("intrinsics must be 3x3")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-9:
            raise InvalidParameterError(f"rig rotation not orthonormal (err {err:.2e})")

    def inverse(self) -> "RigCalibration":
        return RigCalibration(
            K_rgb=self.K_th, K_th=self.K_rgb, R=self.R.T, t=-self.R.T @ self.t
        )


def map_thermal_pixel(u: float, v: float, depth: float, calib: RigCalibration):
    """Thermal pixel -> registered RGB pixel via full back-projection.

    Back-projects (u,v) to the plane z=depth in the thermal frame, transforms
    into the RGB frame and reprojects.  Returns None when the point lands
    behind the RGB camera (unmappable outcome).
    """
    if depth <= 0:
        raise InvalidParameterError("depth must be positive")
    ray = np.linalg.solve(calib.K_th, np.array([u, v, 1.0]))
    x_th = depth * ray
    x_rgb = calib.R @ x_th + calib.t
    if x_rgb[2] <= 0:
        return None
    p = calib.K_rgb @ x_rgb
    return (float(p[0] / p[2]), float(p[1] / p[2]))


def thermal_to_rgb_homography(calib: RigCalibration, depth: float) -> np.ndarray:
    """Homography induced by the frontoparallel plane z=depth (thermal frame)."""
    if depth <= 0:
        raise InvalidParameterError("depth must be positive")
    e3 = np.array([[0.0, 0.0, 1.0]])
    return calib.K_rgb @ (depth * calib.R @ np.linalg.inv(calib.K_th) + calib.t[:, None] @ e3)


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    h, w = img.shape[:2]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x = np.clip(xs, 0, w - 1)
    y = np.clip(ys, 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    out = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    return out, valid


def register_thermal_image(
    thermal: np.ndarray,
    calib: RigCalibration,
    depth: float | None = None,
    homography: np.ndarray | None = None,
    out_size: tuple | None = None,
):
    """Resample a thermal image onto the RGB pixel grid.

    Either a constant scene depth or an explicit thermal->RGB homography
    selects the warp.  Returns (resampled, valid_mask); pixels that map
    outside the source are invalid and must be excluded from losses.
    """
    t = np.asarray(thermal, dtype=np.float64)
    if homography is None:
        if depth is None:
            raise InvalidParameterError("need a depth or an explicit homography")
        homography = thermal_to_rgb_homography(calib, depth)
    h_inv = np.linalg.inv(homography)
    if out_size is None:
        out_h, out_w = t.shape[:2]
    else:
        out_w, out_h = out_size
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    ones = np.ones_like(xs, dtype=np.float64)
    src = np.einsum("ab,byx->ayx", h_inv, np.stack([xs.astype(np.float64), ys.astype(np.float64), ones]))
    sx = src[0] / src[2]
    sy = src[1] / src[2]
    out, valid = _bilinear_sample(t, sx, sy)
    out = np.where(valid, out, 0.0)
    return out, valid


# ---------------------------------------------------------------------------
# blending and MSX synthesis

def mix_images(rgb: np.ndarray, thermal: np.ndarray, beta: float) -> np.ndarray:
    """Opacity blend beta*thermal + (1-beta)*rgb, thermal broadcast to 3 channels."""
    if not 0.0 <= beta <= 1.0:
        raise InvalidParameterError(f"beta {beta} outside [0, 1]")
    rgb = np.asarray(rgb, dtype=np.float64)
    th = np.asarray(thermal, dtype=np.float64)
    if th.ndim == 2:
        th = th[:, :, None]
    if rgb.shape[:2] != th.shape[:2]:
        raise ShapeMismatchError(f"grids differ: {rgb.shape} vs {thermal.shape}")
    return beta * th + (1.0 - beta) * rgb


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with mirror-folded (edge-renormalized) borders.

    Folding out-of-range taps back inside keeps the operator doubly
    stochastic, so blurring preserves the image mean exactly.
    """
    if sigma <= 0:
        return np.asarray(img, dtype=np.float64).copy()
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    out = np.asarray(img, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + out.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return out


def msx_image(
    rgb: np.ndarray,
    thermal: np.ndarray,
    strength: float = 0.7,
    blur_sigma: float = 2.0,
) -> np.ndarray:
    """Overlay high-frequency luminance detail from the color image onto the
    registered thermal image (texture for feature matching)."""
    if strength < 0:
        raise InvalidParameterError("strength must be non-negative")
    rgb = np.asarray(rgb, dtype=np.float64)
    th = np.asarray(thermal, dtype=np.float64)
    if rgb.shape[:2] != th.shape[:2]:
        raise ShapeMismatchError(f"grids differ: {rgb.shape} vs {thermal.shape}")
    lum = luminance(rgb)
    highpass = lum - gaussian_blur(lum, blur_sigma)
    return np.clip(th + strength * highpass, 0.0, 1.0)


# ---------------------------------------------------------------------------
# manifest

def _camera_from_entry(entry, pose) -> Camera:
    return Camera.from_camera_to_world(
        fx=entry["fx"],
        fy=entry["fy"],
        cx=entry["cx"],
        cy=entry["cy"],
        width=entry["width"],
        height=entry["height"],
        pose=np.asarray(pose, dtype=np.float64),
    )


def load_scene(path) -> FrameSet:
    """Parse a scene.json manifest and load every referenced image."""
    manifest_path = path if str(path).endswith(".json") else os.path.join(path, "scene.json")
    root = os.path.dirname(os.path.abspath(manifest_path))
    if not os.path.exists(manifest_path):
        raise SceneFormatError(f"{manifest_path}: manifest not found")
    with open(manifest_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("cameras", "frames", "thermal_range"):
        if key not in doc:
            raise SceneFormatError(f"{manifest_path}: missing key {key!r}")
    if not doc["frames"]:
        raise SceneFormatError(f"{manifest_path}: scene has zero frames")
    cameras = {}
    for entry in doc["cameras"]:
        try:
            cameras[entry["id"]] = entry
        except KeyError as exc:
            raise SceneFormatError(f"{manifest_path}: camera without id") from exc

    frames = []
    grid = None
    for i, fr in enumerate(doc["frames"]):
        where = f"{manifest_path}: frames[{i}]"
        cam_id = fr.get("camera")
        if cam_id not in cameras:
            raise SceneFormatError(f"{where}: unknown camera {cam_id!r}")
        if "pose" not in fr:
            raise SceneFormatError(f"{where}: missing pose")
        cam = _camera_from_entry(cameras[cam_id], fr["pose"])
        rgb = thermal = mask = None
        if fr.get("rgb"):
            p = os.path.join(root, fr["rgb"])
            if not os.path.exists(p):
                raise SceneFormatError(f"{where}: missing image {p}")
            rgb = read_rgb8(p)
        if fr.get("thermal"):
            p = os.path.join(root, fr["thermal"])
            if not os.path.exists(p):
                raise SceneFormatError(f"{where}: missing image {p}")
            thermal = read_gray16(p)
        if fr.get("thermal_mask"):
            p = os.path.join(root, fr["thermal_mask"])
            if not os.path.exists(p):
                raise SceneFormatError(f"{where}: missing mask {p}")
            mask = read_gray16(p) > 0.5
        shapes = [a.shape[:2] for a in (rgb, thermal) if a is not None]
        if shapes and any(s != shapes[0] for s in shapes):
            raise SceneFormatError(f"{where}: RGB/thermal grids differ: {shapes}")
        if shapes:
            if grid is None:
                grid = shapes[0]
            elif shapes[0] != grid:
                raise SceneFormatError(f"{where}: frame grid {shapes[0]} != scene grid {grid}")
        frames.append(
            Frame(
                camera=cam,
                camera_id=cam_id,
                rgb=rgb,
                thermal=thermal,
                thermal_mask=mask,
                rgb_path=fr.get("rgb"),
                thermal_path=fr.get("thermal"),
            )
        )

    pts = None
    if doc.get("initial_points"):
        entries = doc["initial_points"]
        pos = np.array([e["position"] for e in entries], dtype=np.float64)
        rgb_v = (
            np.array([e["rgb"] for e in entries], dtype=np.float64)
            if all("rgb" in e for e in entries)
            else None
        )
        th_v = (
            np.array([e["thermal"] for e in entries], dtype=np.float64)
            if all("thermal" in e for e in entries)
            else None
        )
        pts = InitialPoints(positions=pos, rgb=rgb_v, thermal=th_v)

    t_range = tuple(doc["thermal_range"])
    return FrameSet(frames=frames, thermal_range=t_range, initial_points=pts, root=root)


def save_scene(frameset: FrameSet, out_dir) -> str:
    """Write images plus manifest; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    cams = []
    cam_ids = {}
    frames_doc = []
    for i, fr in enumerate(frameset.frames):
        cam = fr.camera
        key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
        if key not in cam_ids:
            cid = f"cam{len(cam_ids)}"
            cam_ids[key] = cid
            cams.append(
                {
                    "id": cid,
                    "fx": cam.fx,
                    "fy": cam.fy,
                    "cx": cam.cx,
                    "cy": cam.cy,
                    "width": cam.width,
                    "height": cam.height,
                }
            )
        entry = {"camera": cam_ids[key], "pose": cam.camera_to_world().tolist()}
        if fr.rgb is not None:
            rel = f"images/frame{i:04d}_rgb.png"
            write_rgb8(os.path.join(out_dir, rel), fr.rgb)
            entry["rgb"] = rel
        if fr.thermal is not None:
            rel = f"images/frame{i:04d}_thermal.png"
            write_gray16(os.path.join(out_dir, rel), fr.thermal)
            entry["thermal"] = rel
        frames_doc.append(entry)
    doc = {
        "thermal_range": list(frameset.thermal_range),
        "cameras": cams,
        "frames": frames_doc,
    }
    if frameset.initial_points is not None:
        pts = frameset.initial_points
        entries = []
        for j in range(pts.positions.shape[0]):
            e = {"position": pts.positions[j].tolist()}
            if pts.rgb is not None:
                e["rgb"] = pts.rgb[j].tolist()
            if pts.thermal is not None:
                e["thermal"] = float(pts.thermal[j])
            entries.append(e)
        doc["initial_points"] = entries
    manifest = os.path.join(out_dir, "scene.json")
    with open(manifest, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return manifest


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class SynthSpec:
    """Generator configuration for a desk-scale ground-truth RGBT scene."""

    n_gaussians: int = 50
    n_frames: int = 10
    width: int = 64
    height: int = 64
    ring_radius: float = 2.5
    focal: float | None = None
    seed: int = 0
    thermal_field: str = "smooth"      # smooth | contrast
    rgb_mode: str = "textured"         # textured | flat_region
    thermal_range: tuple = (0.0, 100.0)
    scale_range: tuple = (0.04, 0.11)
    opacity_range: tuple = (0.55, 0.95)
    init_keep: float = 1.0             # fraction of GT points exported as initial points
    init_jitter: float = 0.0           # stddev of positional noise on initial points
    thermal_noise: float = 0.0         # sensor noise stddev on stored thermal values

    def __post_init__(self):
        if self.n_gaussians < 1 or self.n_frames < 1:
            raise InvalidParameterError("need at least one Gaussian and one frame")
        if self.width < 8 or self.height < 8:
            raise InvalidParameterError("resolution too small")
        if self.thermal_field not in ("smooth", "contrast"):
            raise InvalidParameterError(f"unknown thermal field {self.thermal_field!r}")
        if self.rgb_mode not in ("textured", "flat_region"):
            raise InvalidParameterError(f"unknown rgb mode {self.rgb_mode!r}")


def _look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world pose looking from eye to target (+y down convention)."""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up_world = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_world) > 0.999:
        up_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_world)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def _smooth_field(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency spatial temperature field over positions (P,3) -> [0,1]."""
    freq = rng.uniform(0.6, 1.1, 3)
    phase = rng.uniform(0.0, 2.0 * np.pi, 3)
    vals = 0.5 + 0.22 * np.sin(2.0 * np.pi * freq[0] * p[:, 0] + phase[0]) * np.sin(
        2.0 * np.pi * freq[1] * p[:, 1] + phase[1]
    ) + 0.12 * np.sin(2.0 * np.pi * freq[2] * p[:, 2] + phase[2])
    return np.clip(vals, 0.08, 0.92)


def synth_scene(spec: SynthSpec, out_dir=None):
    """Sample a ground-truth cloud, place a camera ring, render every frame
    with the reference compositor and (optionally) write the scene to disk.

    Returns (FrameSet, ground-truth GaussianCloud).  The in-memory frame
    images carry the same 8/16-bit quantization as the on-disk PNGs.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_gaussians
    positions = rng.uniform(-0.5, 0.5, (n, 3))
    log_scales = rng.uniform(np.log(spec.scale_range[0]), np.log(spec.scale_range[1]), (n, 3))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity = rng.uniform(*spec.opacity_range, n)

    rgb_vals = rng.uniform(0.15, 0.85, (n, 3))
    thermal_vals = _smooth_field(positions, rng)
    if spec.thermal_field == "contrast":
        center = rng.uniform(-0.35, 0.35, 3)
        center[0] = rng.uniform(-0.4, -0.1)  # hot blob inside the flat-RGB half
        d2 = ((positions - center) ** 2).sum(axis=1)
        thermal_vals = np.clip(thermal_vals + 0.38 * np.exp(-d2 / (2 * 0.22 ** 2)), 0.05, 0.95)
    if spec.rgb_mode == "flat_region":
        flat = positions[:, 0] < 0.0
        base = rng.uniform(0.42, 0.52)
        rgb_vals[flat] = base + rng.uniform(-0.02, 0.02, (int(flat.sum()), 3))

    cloud = GaussianCloud(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=inverse_sigmoid(opacity),
        sh_rgb=np.concatenate(
            [channel_to_dc(rgb_vals)[:, None, :], np.zeros((n, 0, 3))], axis=1
        ),
        sh_thermal=channel_to_dc(thermal_vals)[:, None, None],
    )

    focal = spec.focal if spec.focal is not None else 1.1 * spec.width
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    frames = []
    for i in range(spec.n_frames):
        theta = 2.0 * np.pi * i / spec.n_frames
        eye = np.array(
            [
                spec.ring_radius * np.cos(theta),
                spec.ring_radius * np.sin(theta),
                0.45 * np.sin(theta * 2.0 + 0.7),
            ]
        )
        pose = _look_at(eye, np.zeros(3))
        cam = Camera.from_camera_to_world(
            focal, focal, cx, cy, spec.width, spec.height, pose
        )
        rgb = render_reference(cloud, cam, Modality.RGB).image
        thermal = render_reference(cloud, cam, Modality.THERMAL).image
        if spec.thermal_noise > 0:
            thermal = np.clip(
                thermal + spec.thermal_noise * rng.standard_normal(thermal.shape), 0.0, 1.0
            )
        frames.append(
            Frame(
                camera=cam,
                camera_id="cam0",
                rgb=quantize_rgb8(rgb),
                thermal=quantize_gray16(thermal),
            )
        )

    n_keep = max(1, int(round(spec.init_keep * n)))
    keep = rng.permutation(n)[:n_keep]
    init_pos = positions[keep] + (
        spec.init_jitter * rng.standard_normal((n_keep, 3)) if spec.init_jitter > 0 else 0.0
    )
    pts = InitialPoints(
        positions=init_pos,
        rgb=rgb_vals[keep],
        thermal=thermal_vals[keep],
    )
    frameset = FrameSet(
        frames=frames,
        thermal_range=spec.thermal_range,
        initial_points=pts,
    )
    if out_dir is not None:
        save_scene(frameset, out_dir)
    return frameset, cloud


# ---------------------------------------------------------------------------
# binary cloud format (splatting PLY layout, extended with thermal attributes)

_BASE_PROPS = ("x", "y", "z", "nx", "ny", "nz")


def _cloud_property_names(cloud: GaussianCloud) -> list:
    names = list(_BASE_PROPS)
    if cloud.sh_rgb is not None:
        names += ["f_dc_0", "f_dc_1", "f_dc_2"]
        n_rest = (cloud.sh_rgb.shape[1] - 1) * 3
        names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    if cloud.sh_thermal is not None:
        names += ["t_dc_0"]
        names += [f"t_rest_{i}" for i in range(cloud.sh_thermal.shape[1] - 1)]
    return names


def export_cloud(cloud: GaussianCloud, path) -> None:
    """Binary little-endian PLY, one float64 property per attribute.

    Layout per point: position(3), normal placeholder(3, zeros), RGB SH
    (f_dc_* then f_rest_*, channel-major like the common splat format),
    opacity logit, log scales(3), quaternion(4), then thermal SH (t_dc_0,
    t_rest_*) when present.
    """
    n = len(cloud)
    names = _cloud_property_names(cloud)
    cols = [cloud.positions, np.zeros((n, 3))]
    if cloud.sh_rgb is not None:
        cols.append(cloud.sh_rgb[:, 0, :])         # f_dc: (n,3)
        rest = cloud.sh_rgb[:, 1:, :]              # (n, k-1, 3)
        cols.append(np.swapaxes(rest, 1, 2).reshape(n, -1))  # channel-major
    cols.append(cloud.opacity_logits[:, None])
    cols.append(cloud.log_scales)
    cols.append(cloud.rotations)
    if cloud.sh_thermal is not None:
        cols.append(cloud.sh_thermal[:, :, 0])
    data = np.ascontiguousarray(np.concatenate(cols, axis=1), dtype="<f8")

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {p}" for p in names]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def import_cloud(path) -> GaussianCloud:
    """Read a cloud written by export_cloud; accepts RGB-only, thermal-only
    and dual layouts, float or double properties."""
    from .errors import CloudFormatError

    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise CloudFormatError(f"{path}: not a PLY file")
    header = blob[: end + len(b"end_header\n")].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n"):]
    n = None
    props = []
    fmt_ok = False
    for line in header:
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            fmt_ok = True
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] not in ("double", "float"):
                raise CloudFormatError(f"{path}: unsupported property type {parts[1]}")
            props.append((parts[2], "<f8" if parts[1] == "double" else "<f4"))
    if not fmt_ok or n is None:
        raise CloudFormatError(f"{path}: malformed header")
    dtype = np.dtype(props)
    if len(body) < n * dtype.itemsize:
        raise CloudFormatError(f"{path}: truncated body")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    cols = {name: rec[name].astype(np.float64) for name, _ in props}

    def grab(names_):
        try:
            return np.stack([cols[p] for p in names_], axis=1)
        except KeyError as exc:
            raise CloudFormatError(f"{path}: missing attribute {exc}") from exc

    positions = grab(["x", "y", "z"])
    opacity = cols.get("opacity")
    if opacity is None:
        raise CloudFormatError(f"{path}: missing attribute 'opacity'")
    log_scales = grab([f"scale_{i}" for i in range(3)])
    rotations = grab([f"rot_{i}" for i in range(4)])

    sh_rgb = None
    if "f_dc_0" in cols:
        dc = grab(["f_dc_0", "f_dc_1", "f_dc_2"])[:, None, :]
        rest_names = sorted(
            (p for p, _ in props if p.startswith("f_rest_")),
            key=lambda s: int(s.rsplit("_", 1)[1]),
        )
        if rest_names:
            k = len(rest_names) // 3
            rest = np.stack([cols[p] for p in rest_names], axis=1).reshape(n, 3, k)
            sh_rgb = np.concatenate([dc, np.swapaxes(rest, 1, 2)], axis=1)
        else:
            sh_rgb = dc
    sh_thermal = None
    if "t_dc_0" in cols:
        t_rest = sorted(
            (p for p, _ in props if p.startswith("t_rest_")),
            key=lambda s: int(s.rsplit("_", 1)[1]),
        )
        stack = [cols["t_dc_0"]] + [cols[p] for p in t_rest]
        sh_thermal = np.stack(stack, axis=1)[:, :, None]

    return GaussianCloud(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity,
        sh_rgb=sh_rgb,
        sh_thermal=sh_thermal,
    )


# ---------------------------------------------------------------------------
# SfM text import (cameras.txt / images.txt / points3D.txt triplet)

def import_sfm_text(directory, thermal_range=(0.0, 100.0)) -> dict:
    """Map the common SfM text export onto the scene manifest schema.

    Images are referenced by name only (no pixels loaded); point colors seed
    initial_points.  Returns the manifest as a dict ready to serialize.
    """
    def path(name):
        p = os.path.join(directory, name)
        if not os.path.exists(p):
            raise SceneFormatError(f"{p}: not found")
        return p

    cameras = {}
    with open(path("cameras.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            cam_id, model, w, h = parts[0], parts[1], int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
            if model == "PINHOLE":
                fx, fy, cx, cy = params[:4]
            elif model in ("SIMPLE_PINHOLE", "SIMPLE_RADIAL"):
                fx = fy = params[0]
                cx, cy = params[1], params[2]
            else:
                raise SceneFormatError(f"cameras.txt: unsupported model {model}")
            cameras[cam_id] = {
                "id": f"cam{cam_id}",
                "fx": fx,
                "fy": fy,
                "cx": cx,
                "cy": cy,
                "width": w,
                "height": h,
            }

    frames = []
    with open(path("images.txt")) as fh:
        lines = [l.strip() for l in fh if l.strip() and not l.startswith("#")]
    # images.txt alternates pose lines and 2D-point lines
    for line in lines[0::2]:
        parts = line.split()
        qw, qx, qy, qz = (float(v) for v in parts[1:5])
        tx, ty, tz = (float(v) for v in parts[5:8])
        cam_id, name = parts[8], parts[9]
        if cam_id not in cameras:
            raise SceneFormatError(f"images.txt: unknown camera {cam_id}")
        from .core import quat_to_rotmat

        R_wc = quat_to_rotmat(np.array([qw, qx, qy, qz]))
        t_wc = np.array([tx, ty, tz])
        pose = np.eye(4)
        pose[:3, :3] = R_wc.T
        pose[:3, 3] = -R_wc.T @ t_wc
        frames.append(
            {"camera": f"cam{cam_id}", "pose": pose.tolist(), "rgb": name}
        )

    points = []
    with open(path("points3D.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            xyz = [float(v) for v in parts[1:4]]
            rgb = [int(v) / 255.0 for v in parts[4:7]]
            points.append({"position": xyz, "rgb": rgb})

    doc = {
        "thermal_range": list(thermal_range),
        "cameras": list(cameras.values()),
        "frames": frames,
    }
    if points:
        doc["initial_points"] = points
    return doc
