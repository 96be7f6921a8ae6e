import numpy as np
import numpy.testing as npt
import pytest

from rgbtsplat.core import Modality
from rgbtsplat.errors import ConfigurationError, ModalityMismatchError
from rgbtsplat.metrics import evaluate, psnr
from rgbtsplat.rasterize import render
from rgbtsplat.sceneio import SynthSpec, synth_scene
from rgbtsplat.train import (
    Strategy,
    TrainConfig,
    init_cloud,
    thermal_cloud_from_geometry,
    train,
    train_mftg,
    train_msmg,
    train_ommg,
    train_single,
)


def _toy_scene(seed=0, n=20, frames=6, size=24, **kw):
    return synth_scene(
        SynthSpec(n_gaussians=n, n_frames=frames, width=size, height=size, seed=seed, **kw)
    )


def _fast_cfg(strategy, iterations, seed=0, **kw):
    from rgbtsplat.optim import LearningRates

    defaults = dict(
        strategy=strategy,
        iterations=iterations,
        seed=seed,
        sh_degree_rgb=1,
        sh_degree_thermal=0,
        densify_start=200,
        densify_end=10000,
        init_opacity=0.5,
        lr=LearningRates(rotation=1e-2, scale=1e-2),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestConfig:
    def test_mr_requires_msmg(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(strategy=Strategy.OMMG, use_mr=True)

    def test_gamma_range_validated(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(fixed_gamma=1.5)

    def test_defaults_match_reference_practice(self):
        cfg = TrainConfig()
        assert cfg.iterations == 30000
        assert cfg.densify_interval == 100
        assert cfg.densify_start == 500
        assert cfg.densify_end == 15000
        assert cfg.densify_grad_threshold == 0.0002
        assert cfg.prune_opacity_threshold == 0.005
        assert cfg.lambda_dssim == 0.2
        assert cfg.lambda_smooth == 0.6


class TestSingle:
    def test_zero_iterations_returns_initialization(self):
        scene, _ = _toy_scene()
        cfg = _fast_cfg(Strategy.SINGLE_RGB, 0)
        res = train_single(scene, cfg, Modality.RGB)
        rng = np.random.default_rng(cfg.seed)
        init = init_cloud(scene, [Modality.RGB], cfg, rng)
        npt.assert_array_equal(res.clouds["rgb"].positions, init.positions)
        npt.assert_array_equal(res.clouds["rgb"].sh_rgb, init.sh_rgb)
        assert res.log == []

    def test_fallback_points_when_scene_has_none(self):
        scene, _ = _toy_scene()
        scene.initial_points = None
        cfg = _fast_cfg(Strategy.SINGLE_RGB, 1, n_fallback_points=50)
        rng = np.random.default_rng(cfg.seed)
        cloud = init_cloud(scene, [Modality.RGB], cfg, rng)
        assert len(cloud) == 50
        # random points fill the scaled camera bounding box around its centroid
        centers = np.stack([f.camera.camera_center for f in scene.frames])
        half = max(float(np.abs(centers - centers.mean(axis=0)).max()) * 1.5, 1.0)
        assert np.all(np.abs(cloud.positions - centers.mean(axis=0)) <= half + 1e-9)
        res = train_single(scene, cfg, Modality.RGB)
        assert len(res.log) == 1

    def test_missing_modality_rejected(self):
        scene, _ = _toy_scene()
        for f in scene.frames:
            f.thermal = None
        with pytest.raises(ModalityMismatchError):
            train_single(scene, _fast_cfg(Strategy.SINGLE_THERMAL, 5), Modality.THERMAL)

    def test_rgb_overfit_reaches_35db_train_psnr(self):
        scene, _ = _toy_scene(seed=4, n=25, frames=5, size=24)
        cfg = _fast_cfg(Strategy.SINGLE_RGB, 1400, seed=4, densify_grad_threshold=1e9)
        res = train_single(scene, cfg, Modality.RGB)
        rep = evaluate({Modality.RGB: res.clouds["rgb"]}, scene.frames)
        assert rep.mean["rgb"]["psnr"] > 35.0

    def test_loss_log_counts_present(self):
        scene, _ = _toy_scene()
        res = train_single(scene, _fast_cfg(Strategy.SINGLE_THERMAL, 3), Modality.THERMAL)
        assert len(res.log) == 3
        for rec in res.log:
            assert rec.n_thermal is not None and rec.n_rgb is None
            assert rec.smooth_thermal is not None

    def test_determinism_bit_identical_logs(self):
        scene, _ = _toy_scene()
        cfg = _fast_cfg(Strategy.SINGLE_RGB, 25, seed=7)
        log1 = train_single(scene, cfg, Modality.RGB).log
        log2 = train_single(scene, cfg, Modality.RGB).log
        assert [r.to_json_line() for r in log1] == [r.to_json_line() for r in log2]


class TestMftg:
    def test_stage2_initial_render_is_midgray_through_geometry(self):
        scene, _ = _toy_scene()
        cfg = _fast_cfg(Strategy.MFTG, 60)
        stage1 = train_single(scene, cfg, Modality.RGB)
        cloud = thermal_cloud_from_geometry(stage1.clouds["rgb"], 0)
        out = render(cloud, scene.frames[0].camera, Modality.THERMAL)
        npt.assert_allclose(out.image, 0.5 * out.accum_alpha, atol=1e-12)

    def test_stage2_loss_decreases(self):
        scene, _ = _toy_scene(seed=3)
        cfg = _fast_cfg(Strategy.MFTG, 500, seed=3)
        res = train_mftg(scene, cfg)
        stage2 = [r for r in res.log if r.iteration > cfg.iterations]
        assert stage2[0].total >= stage2[-1].total
        assert res.clouds["thermal"].sh_rgb is None
        assert res.clouds["rgb"].sh_thermal is None

    def test_single_frame_scene_overfits(self):
        scene, _ = _toy_scene(seed=6, n=15, frames=1, size=24)
        cfg = _fast_cfg(Strategy.MFTG, 800, seed=6, densify_grad_threshold=1e9)
        res = train_mftg(scene, cfg)
        out = render(res.clouds["thermal"], scene.frames[0].camera, Modality.THERMAL)
        assert psnr(out.image, scene.frames[0].thermal) > 40.0


class TestMsmg:
    def test_mr_gamma_logged_from_live_counts(self):
        scene, _ = _toy_scene()
        cfg = _fast_cfg(Strategy.MSMG, 5, use_mr=True)
        res = train_msmg(scene, cfg)
        # equal counts at iteration 0 (shared initial points)
        assert res.log[0].gamma == 0.5
        for rec in res.log:
            assert rec.gamma is not None
            assert rec.n_rgb is not None and rec.n_thermal is not None

    def test_gamma_one_freezes_thermal_cloud(self):
        scene, _ = _toy_scene()
        cfg = _fast_cfg(Strategy.MSMG, 40, fixed_gamma=1.0)
        res = train_msmg(scene, cfg)
        th = res.clouds["thermal"]
        # bit-identical: zero coefficient means zero gradients, zero updates
        ref = init_cloud(scene, [Modality.THERMAL], cfg, np.random.default_rng(cfg.seed))
        npt.assert_array_equal(th.sh_thermal, ref.sh_thermal)
        npt.assert_array_equal(th.positions, ref.positions)
        npt.assert_array_equal(th.opacity_logits, ref.opacity_logits)
        npt.assert_array_equal(th.rotations, ref.rotations)

    def test_gamma_zero_freezes_rgb_cloud(self):
        scene, _ = _toy_scene()
        cfg = _fast_cfg(Strategy.MSMG, 40, fixed_gamma=0.0)
        res = train_msmg(scene, cfg)
        ref = init_cloud(scene, [Modality.RGB], cfg, np.random.default_rng(cfg.seed))
        npt.assert_array_equal(res.clouds["rgb"].sh_rgb, ref.sh_rgb)
        npt.assert_array_equal(res.clouds["rgb"].positions, ref.positions)


class TestOmmg:
    def test_carries_both_channel_sets(self):
        scene, _ = _toy_scene()
        res = train_ommg(scene, _fast_cfg(Strategy.OMMG, 10))
        cloud = res.clouds["multi"]
        assert cloud.modality_mask == {Modality.RGB, Modality.THERMAL}
        for rec in res.log:
            assert rec.n_rgb == rec.n_thermal  # one shared cloud

    def test_both_losses_co_descend_when_thermal_is_luminance(self):
        from rgbtsplat.sceneio import luminance

        scene, _ = _toy_scene(seed=9, n=20, frames=6, size=24)
        for f in scene.frames:
            f.thermal = luminance(f.rgb)
        res = train_ommg(scene, _fast_cfg(Strategy.OMMG, 500, seed=9))
        first, last = res.log[0], res.log[-1]
        assert last.loss_rgb < first.loss_rgb
        assert last.loss_thermal < first.loss_thermal


class TestDispatcher:
    @pytest.mark.parametrize(
        "strategy,keys",
        [
            (Strategy.SINGLE_RGB, {"rgb"}),
            (Strategy.SINGLE_THERMAL, {"thermal"}),
            (Strategy.MSMG, {"rgb", "thermal"}),
            (Strategy.OMMG, {"multi"}),
        ],
    )
    def test_result_clouds_keyed_by_strategy(self, strategy, keys):
        scene, _ = _toy_scene()
        res = train(scene, _fast_cfg(strategy, 2))
        assert set(res.clouds) == keys

    def test_checkpoints_written(self, tmp_path):
        scene, _ = _toy_scene()
        cfg = _fast_cfg(Strategy.SINGLE_RGB, 4, checkpoint_interval=2)
        train(scene, cfg, out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert "ckpt_000002_rgb.ply" in names and "ckpt_000004_rgb.ply" in names
