"""Training strategies: single-modality baselines, fine-tuning (RGB then
thermal on retained geometry), two single-modal clouds under a joint
objective, and one dual-channel cloud with shared geometry."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .autograd import ParameterGradients, backward
from .core import (
    GaussianCloud,
    Modality,
    ModalityWeights,
    channel_to_dc,
    inverse_sigmoid,
    n_sh_coeffs,
)
from .densify import DensifyStats, densify_and_prune
from .errors import ConfigurationError, ModalityMismatchError
from .losses import (
    LossReport,
    joint_loss,
    modality_loss_terms,
    modality_loss_terms_and_grad,
    mr_gamma,
)
from .optim import LearningRates, OptimizerState, exponential_lr, optimizer_step
from .rasterize import render, render_channels
from .sceneio import FrameSet


class Strategy(str, Enum):
    SINGLE_RGB = "single_rgb"
    SINGLE_THERMAL = "single_thermal"
    MFTG = "mftg"
    MSMG = "msmg"
    OMMG = "ommg"


@dataclass
class TrainConfig:
    strategy: Strategy = Strategy.OMMG
    iterations: int = 30000
    lr: LearningRates = field(default_factory=LearningRates)
    densify_interval: int = 100
    densify_start: int = 500
    densify_end: int = 15000
    densify_grad_threshold: float = 0.0002
    prune_opacity_threshold: float = 0.005
    percent_dense: float = 0.01
    split_factor: float = 1.6
    use_mr: bool = False
    fixed_gamma: float | None = None
    lambda_dssim: float = 0.2
    lambda_smooth: float = 0.6
    sh_degree_rgb: int = 3
    sh_degree_thermal: int = 0
    sh_unlock_interval: int = 1000
    init_opacity: float = 0.1
    n_fallback_points: int = 10000
    seed: int = 0
    checkpoint_interval: int | None = None

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = Strategy(self.strategy)
        if self.iterations < 0:
            raise ConfigurationError("iterations must be non-negative")
        if self.densify_interval <= 0 or self.densify_grad_threshold <= 0:
            raise ConfigurationError("densification thresholds must be positive")
        if self.prune_opacity_threshold <= 0:
            raise ConfigurationError("prune threshold must be positive")
        if self.use_mr and self.strategy != Strategy.MSMG:
            raise ConfigurationError("multimodal regularization requires the MSMG strategy")
        if self.fixed_gamma is not None and not 0.0 <= self.fixed_gamma <= 1.0:
            raise ConfigurationError("fixed_gamma must lie in [0, 1]")
        if not 0 <= self.sh_degree_rgb <= 3 or not 0 <= self.sh_degree_thermal <= 3:
            raise ConfigurationError("SH degrees must lie in 0..3")

    def weights(self, gamma: float = 0.5) -> ModalityWeights:
        return ModalityWeights(
            gamma=gamma,
            lambda_dssim=self.lambda_dssim,
            lambda_smooth=self.lambda_smooth,
        )


@dataclass
class TrainResult:
    strategy: Strategy
    clouds: dict
    log: list

    def cloud_for(self, modality: Modality) -> GaussianCloud:
        if "multi" in self.clouds:
            return self.clouds["multi"]
        key = "rgb" if modality == Modality.RGB else "thermal"
        if key not in self.clouds:
            raise ModalityMismatchError(f"result has no {key} cloud")
        return self.clouds[key]


def _mean_nn_distance(positions: np.ndarray) -> np.ndarray:
    """Mean distance to the 3 nearest neighbors (scale initialization)."""
    n = positions.shape[0]
    if n < 2:
        return np.full(n, 0.1)
    try:
        from scipy.spatial import cKDTree

        k = min(4, n)
        d, _ = cKDTree(positions).query(positions, k=k)
        return d[:, 1:].mean(axis=1)
    except ImportError:
        diff = positions[:, None, :] - positions[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(d, np.inf)
        k = min(3, n - 1)
        return np.sort(d, axis=1)[:, :k].mean(axis=1)


def init_cloud(scene: FrameSet, modalities, cfg: TrainConfig, rng: np.random.Generator) -> GaussianCloud:
    """Cloud from the scene's initial points (SfM-style) or a random fallback."""
    pts = scene.initial_points
    if pts is not None:
        positions = np.asarray(pts.positions, dtype=np.float64).copy()
        n = positions.shape[0]
        rgb_vals = pts.rgb if pts.rgb is not None else np.full((n, 3), 0.5)
        th_vals = pts.thermal if pts.thermal is not None else np.full(n, 0.5)
    else:
        centers = np.stack([f.camera.camera_center for f in scene.frames])
        centroid = centers.mean(axis=0)
        half = max(float(np.abs(centers - centroid).max()) * 1.5, 1.0)
        n = cfg.n_fallback_points
        positions = centroid + rng.uniform(-half, half, (n, 3))
        rgb_vals = np.full((n, 3), 0.5)
        th_vals = np.full(n, 0.5)

    dist = np.clip(_mean_nn_distance(positions), 1e-7, None)
    log_scales = np.log(dist)[:, None].repeat(3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity = np.full(n, inverse_sigmoid(cfg.init_opacity))

    sh_rgb = None
    sh_thermal = None
    if Modality.RGB in modalities:
        k = n_sh_coeffs(cfg.sh_degree_rgb)
        sh_rgb = np.zeros((n, k, 3))
        sh_rgb[:, 0, :] = channel_to_dc(np.asarray(rgb_vals, dtype=np.float64))
    if Modality.THERMAL in modalities:
        k = n_sh_coeffs(cfg.sh_degree_thermal)
        sh_thermal = np.zeros((n, k, 1))
        sh_thermal[:, 0, 0] = channel_to_dc(np.asarray(th_vals, dtype=np.float64))
    return GaussianCloud(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity,
        sh_rgb=sh_rgb,
        sh_thermal=sh_thermal,
    )


def thermal_cloud_from_geometry(cloud: GaussianCloud, sh_degree_thermal: int) -> GaussianCloud:
    """Stage-2 fine-tuning cloud: retained geometry, thermal channels reset to
    mid-gray (DC coefficient zero renders 0.5)."""
    n = len(cloud)
    return GaussianCloud(
        positions=cloud.positions.copy(),
        log_scales=cloud.log_scales.copy(),
        rotations=cloud.rotations.copy(),
        opacity_logits=cloud.opacity_logits.copy(),
        sh_rgb=None,
        sh_thermal=np.zeros((n, n_sh_coeffs(sh_degree_thermal), 1)),
    )


# Deterministic per-cloud RNG streams: the RGB cloud, the thermal cloud and
# the MFTG fine-tuning stage each own a spawned child stream for density
# control, while frame selection always draws once per iteration from the
# root stream.  A cloud's trajectory therefore depends only on its own loss
# signal, so MSMG under the plain joint loss reproduces the single-modality
# baselines bit for bit.
STREAM_RGB = 0
STREAM_THERMAL = 1
STREAM_FINETUNE = 2


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[index])


class _CloudTrainer:
    """Optimizer + density-control bookkeeping for one cloud."""

    def __init__(self, cloud: GaussianCloud, cfg: TrainConfig, scene_extent: float, rng):
        self.cloud = cloud
        self.cfg = cfg
        self.extent = scene_extent
        self.rng = rng
        self.state = OptimizerState(cloud)
        self.stats = DensifyStats.zeros(len(cloud))

    def apply(self, grads: ParameterGradients, iteration: int):
        self.stats.accumulate(grads)
        pos_lr = self.extent * exponential_lr(
            self.cfg.lr.position, self.cfg.lr.position_final, iteration, self.cfg.iterations
        )
        optimizer_step(self.cloud, grads, self.state, self.cfg.lr, position_lr=pos_lr)

    def maybe_densify(self, iteration: int):
        cfg = self.cfg
        if (
            cfg.densify_start <= iteration <= cfg.densify_end
            and iteration % cfg.densify_interval == 0
        ):
            densify_and_prune(
                self.cloud,
                self.stats,
                self.state,
                grad_threshold=cfg.densify_grad_threshold,
                prune_opacity=cfg.prune_opacity_threshold,
                scene_extent=self.extent,
                percent_dense=cfg.percent_dense,
                split_factor=cfg.split_factor,
                rng=self.rng,
            )


def _active_degree(cfg: TrainConfig, modality: Modality, iteration: int) -> int:
    stored = cfg.sh_degree_rgb if modality == Modality.RGB else cfg.sh_degree_thermal
    if cfg.sh_unlock_interval <= 0:
        return stored
    return min(stored, iteration // cfg.sh_unlock_interval)


def _pass(cloud, frame, modality, weights, coef, active_degree):
    """Render one modality, compute its loss terms and (scaled) gradients."""
    target = frame.target(modality)
    mask = frame.thermal_mask if modality == Modality.THERMAL else None
    if coef != 0.0:
        out = render(cloud, frame.camera, modality, active_degree=active_degree)
        terms, grad = modality_loss_terms_and_grad(
            out.image, target, weights, modality, mask
        )
        pg = backward(cloud, frame.camera, modality, coef * grad, out)
    else:
        out = render(cloud, frame.camera, modality, active_degree=active_degree, retain=False)
        terms = modality_loss_terms(out.image, target, weights, modality, mask)
        pg = ParameterGradients.zeros_like(cloud)
    return terms, pg


def _checkpoint(out_dir, iteration, clouds: dict):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    from .sceneio import export_cloud

    for key, cloud in clouds.items():
        export_cloud(cloud, os.path.join(out_dir, f"ckpt_{iteration:06d}_{key}.ply"))


def _pick_frame(scene: FrameSet, rng) -> object:
    return scene.frames[int(rng.integers(len(scene.frames)))]


def _require(scene: FrameSet, modalities):
    have = scene.modalities()
    for m in modalities:
        if m not in have:
            raise ModalityMismatchError(f"scene lacks {m.value} images")


def train_single(scene: FrameSet, cfg: TrainConfig, modality: Modality, out_dir=None) -> TrainResult:
    """Standard single-modality training (the ablation baseline)."""
    _require(scene, [modality])
    rng = np.random.default_rng(cfg.seed)
    cloud = init_cloud(scene, [modality], cfg, rng)
    stream = STREAM_RGB if modality == Modality.RGB else STREAM_THERMAL
    trainer = _CloudTrainer(cloud, cfg, scene.scene_extent(), _stream(cfg.seed, stream))
    weights = cfg.weights()
    log = []
    key = "rgb" if modality == Modality.RGB else "thermal"
    for it in range(1, cfg.iterations + 1):
        frame = _pick_frame(scene, rng)
        terms, pg = _pass(cloud, frame, modality, weights, 1.0, _active_degree(cfg, modality, it))
        trainer.apply(pg, it)
        trainer.maybe_densify(it)
        l1, ds, smooth, total = terms
        rec = LossReport(iteration=it, total=total)
        if modality == Modality.RGB:
            rec.l1_rgb, rec.dssim_rgb, rec.loss_rgb = l1, ds, total
            rec.n_rgb = len(cloud)
        else:
            rec.l1_thermal, rec.dssim_thermal, rec.smooth_thermal = l1, ds, smooth
            rec.loss_thermal = total
            rec.n_thermal = len(cloud)
        log.append(rec)
        if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            _checkpoint(out_dir, it, {key: cloud})
    return TrainResult(strategy=cfg.strategy, clouds={key: cloud}, log=log)


def train_mftg(scene: FrameSet, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Two stages: train RGB for geometry, then swap channels to thermal and
    fine-tune (geometry stays trainable)."""
    _require(scene, [Modality.RGB, Modality.THERMAL])
    stage1 = train_single(
        scene, replace(cfg, strategy=Strategy.SINGLE_RGB), Modality.RGB, out_dir
    )
    rgb_cloud = stage1.clouds["rgb"]
    cloud = thermal_cloud_from_geometry(rgb_cloud, cfg.sh_degree_thermal)
    rng = _stream(cfg.seed, STREAM_FINETUNE)  # shared by frame picks and splits
    trainer = _CloudTrainer(cloud, cfg, scene.scene_extent(), rng)
    weights = cfg.weights()
    log = list(stage1.log)
    for it in range(1, cfg.iterations + 1):
        frame = _pick_frame(scene, rng)
        terms, pg = _pass(
            cloud, frame, Modality.THERMAL, weights, 1.0,
            _active_degree(cfg, Modality.THERMAL, it),
        )
        trainer.apply(pg, it)
        trainer.maybe_densify(it)
        l1, ds, smooth, total = terms
        log.append(
            LossReport(
                iteration=cfg.iterations + it,
                total=total,
                l1_thermal=l1,
                dssim_thermal=ds,
                smooth_thermal=smooth,
                loss_thermal=total,
                n_thermal=len(cloud),
            )
        )
        if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            _checkpoint(out_dir, cfg.iterations + it, {"thermal": cloud})
    return TrainResult(
        strategy=Strategy.MFTG, clouds={"thermal": cloud, "rgb": rgb_cloud}, log=log
    )


def train_msmg(scene: FrameSet, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Two single-modal clouds from shared initial points, optimized under the
    joint (optionally gamma-weighted) objective; no gradient crosses clouds."""
    _require(scene, [Modality.RGB, Modality.THERMAL])
    rng = np.random.default_rng(cfg.seed)
    rgb_cloud = init_cloud(scene, [Modality.RGB], cfg, rng)
    th_cloud = init_cloud(scene, [Modality.THERMAL], cfg, rng)
    extent = scene.scene_extent()
    rgb_tr = _CloudTrainer(rgb_cloud, cfg, extent, _stream(cfg.seed, STREAM_RGB))
    th_tr = _CloudTrainer(th_cloud, cfg, extent, _stream(cfg.seed, STREAM_THERMAL))
    log = []
    for it in range(1, cfg.iterations + 1):
        frame = _pick_frame(scene, rng)
        if cfg.use_mr:
            gamma = mr_gamma(len(th_cloud), len(rgb_cloud))
        else:
            gamma = cfg.fixed_gamma
        coef_rgb = 1.0 if gamma is None else gamma
        coef_th = 1.0 if gamma is None else 1.0 - gamma
        weights = cfg.weights(0.5 if gamma is None else gamma)
        (l1r, dsr, _, lossr), pg_rgb = _pass(
            rgb_cloud, frame, Modality.RGB, weights, coef_rgb,
            _active_degree(cfg, Modality.RGB, it),
        )
        (l1t, dst, smt, losst), pg_th = _pass(
            th_cloud, frame, Modality.THERMAL, weights, coef_th,
            _active_degree(cfg, Modality.THERMAL, it),
        )
        rgb_tr.apply(pg_rgb, it)
        th_tr.apply(pg_th, it)
        rgb_tr.maybe_densify(it)
        th_tr.maybe_densify(it)
        log.append(
            LossReport(
                iteration=it,
                total=joint_loss(lossr, losst, gamma),
                l1_rgb=l1r,
                dssim_rgb=dsr,
                loss_rgb=lossr,
                l1_thermal=l1t,
                dssim_thermal=dst,
                smooth_thermal=smt,
                loss_thermal=losst,
                gamma=gamma,
                n_rgb=len(rgb_cloud),
                n_thermal=len(th_cloud),
            )
        )
        if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            _checkpoint(out_dir, it, {"rgb": rgb_cloud, "thermal": th_cloud})
    return TrainResult(
        strategy=Strategy.MSMG, clouds={"rgb": rgb_cloud, "thermal": th_cloud}, log=log
    )


def train_ommg(scene: FrameSet, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """One cloud carrying both channel sets over shared geometry; the
    densification statistic sums both modalities' positional gradients."""
    _require(scene, [Modality.RGB, Modality.THERMAL])
    rng = np.random.default_rng(cfg.seed)
    cloud = init_cloud(scene, [Modality.RGB, Modality.THERMAL], cfg, rng)
    trainer = _CloudTrainer(cloud, cfg, scene.scene_extent(), _stream(cfg.seed, STREAM_RGB))
    log = []
    gamma = cfg.fixed_gamma
    coef_rgb = 1.0 if gamma is None else gamma
    coef_th = 1.0 if gamma is None else 1.0 - gamma
    both = (Modality.RGB, Modality.THERMAL)
    for it in range(1, cfg.iterations + 1):
        frame = _pick_frame(scene, rng)
        weights = cfg.weights(0.5 if gamma is None else gamma)
        degrees = {m: _active_degree(cfg, m, it) for m in both}
        # Both channel sets share one projection/compositing pass (same
        # geometry by construction), then one joint backward.
        out = render_channels(cloud, frame.camera, both, degrees)
        img_rgb = out.image[:, :, 0:3]
        img_th = out.image[:, :, 3]
        (l1r, dsr, _, lossr), grad_rgb = modality_loss_terms_and_grad(
            img_rgb, frame.rgb, weights, Modality.RGB
        )
        (l1t, dst, smt, losst), grad_th = modality_loss_terms_and_grad(
            img_th, frame.thermal, weights, Modality.THERMAL, frame.thermal_mask
        )
        upstream = np.concatenate(
            [coef_rgb * grad_rgb, coef_th * grad_th[:, :, None]], axis=2
        )
        pg = backward(cloud, frame.camera, both, upstream, out)
        trainer.apply(pg, it)
        trainer.maybe_densify(it)
        log.append(
            LossReport(
                iteration=it,
                total=joint_loss(lossr, losst, gamma),
                l1_rgb=l1r,
                dssim_rgb=dsr,
                loss_rgb=lossr,
                l1_thermal=l1t,
                dssim_thermal=dst,
                smooth_thermal=smt,
                loss_thermal=losst,
                gamma=gamma,
                n_rgb=len(cloud),
                n_thermal=len(cloud),
            )
        )
        if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            _checkpoint(out_dir, it, {"multi": cloud})
    return TrainResult(strategy=Strategy.OMMG, clouds={"multi": cloud}, log=log)


def train(scene: FrameSet, cfg: TrainConfig, out_dir=None) -> TrainResult:
    if cfg.strategy == Strategy.SINGLE_RGB:
        return train_single(scene, cfg, Modality.RGB, out_dir)
    if cfg.strategy == Strategy.SINGLE_THERMAL:
        return train_single(scene, cfg, Modality.THERMAL, out_dir)
    if cfg.strategy == Strategy.MFTG:
        return train_mftg(scene, cfg, out_dir)
    if cfg.strategy == Strategy.MSMG:
        return train_msmg(scene, cfg, out_dir)
    if cfg.strategy == Strategy.OMMG:
        return train_ommg(scene, cfg, out_dir)
    raise ConfigurationError(f"unknown strategy {cfg.strategy}")
