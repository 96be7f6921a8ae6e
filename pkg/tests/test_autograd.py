import numpy as np
import numpy.testing as npt
import pytest

from conftest import make_camera, random_cloud
from rgbtsplat import losses
from rgbtsplat.autograd import backward, finite_difference_oracle, gradients_as_dict
from rgbtsplat.core import (
    GaussianCloud,
    Modality,
    ModalityWeights,
    SH_C0,
    channel_to_dc,
)
from rgbtsplat.errors import OracleInvalidError, StateError
from rgbtsplat.rasterize import render, render_channels


def _joint_loss_fn(cam, target_rgb, target_th, weights):
    def fn(cloud):
        out_r = render(cloud, cam, Modality.RGB, retain=False)
        out_t = render(cloud, cam, Modality.THERMAL, retain=False)
        lr = losses.modality_loss(out_r.image, target_rgb, weights, Modality.RGB)
        lt = losses.modality_loss(out_t.image, target_th, weights, Modality.THERMAL)
        return losses.joint_loss(lr, lt, weights.gamma)

    return fn


def _joint_backward(cloud, cam, target_rgb, target_th, weights):
    out_r = render(cloud, cam, Modality.RGB)
    out_t = render(cloud, cam, Modality.THERMAL)
    g_r = losses.modality_loss_grad(out_r.image, target_rgb, weights, Modality.RGB)
    g_t = losses.modality_loss_grad(out_t.image, target_th, weights, Modality.THERMAL)
    pg = backward(cloud, cam, Modality.RGB, weights.gamma * g_r, out_r)
    pg.add_(backward(cloud, cam, Modality.THERMAL, (1 - weights.gamma) * g_t, out_t))
    return pg


class TestFiniteDifferenceOracle:
    def test_quadratic_probe(self):
        cloud = random_cloud(np.random.default_rng(0), n=1)
        cloud.positions[0, 0] = 3.0

        def loss(c):
            return c.positions[0, 0] ** 2

        g = finite_difference_oracle(loss, cloud, "position", 1e-5)
        npt.assert_allclose(g[0, 0], 6.0, atol=1e-8)

    def test_constant_function_zero(self):
        cloud = random_cloud(np.random.default_rng(0), n=2)
        g = finite_difference_oracle(lambda c: 1.25, cloud, "opacity_logit", 1e-5)
        npt.assert_array_equal(g, 0.0)

    def test_nondeterministic_loss_rejected(self):
        cloud = random_cloud(np.random.default_rng(0), n=1)
        state = {"n": 0}

        def noisy(c):
            state["n"] += 1
            return float(state["n"])

        with pytest.raises(OracleInvalidError):
            finite_difference_oracle(noisy, cloud, "position")

    def test_restores_cloud(self, rng):
        cloud = random_cloud(rng, n=2)
        before = cloud.positions.copy()
        finite_difference_oracle(lambda c: float(c.positions.sum()), cloud, "position")
        npt.assert_array_equal(cloud.positions, before)


class TestBackward:
    def test_zero_upstream_zero_gradients(self, rng):
        cloud = random_cloud(rng, n=8)
        cam = make_camera()
        out = render(cloud, cam, Modality.RGB)
        pg = backward(cloud, cam, Modality.RGB, np.zeros((32, 32, 3)), out)
        for name, g in gradients_as_dict(pg).items():
            npt.assert_array_equal(g, 0.0, err_msg=name)

    def test_single_gaussian_dc_gradient(self):
        # one Gaussian, unit upstream on one pixel/channel:
        # d(pixel)/d(dc) = alpha * T * Y00 at that pixel (T=1, single splat)
        cloud = GaussianCloud(
            positions=np.array([[0.0, 0.0, 0.0]]),
            log_scales=np.full((1, 3), np.log(0.2)),
            rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
            opacity_logits=np.array([0.3]),
            sh_rgb=np.array([[[channel_to_dc(0.6)] * 3]]),
        )
        cam = make_camera(size=17, z=1.2)
        out = render(cloud, cam, Modality.RGB)
        up = np.zeros((17, 17, 3))
        up[8, 8, 1] = 1.0
        pg = backward(cloud, cam, Modality.RGB, up, out)

        from rgbtsplat.rasterize import project_cloud

        proj = project_cloud(cloud, cam, (Modality.RGB,))
        d = np.array([8.0, 8.0]) - proj.mean2d[0]
        lam = np.linalg.inv(proj.cov2d[0])
        alpha = min(0.99, proj.alpha_base[0] * np.exp(-0.5 * d @ lam @ d))
        npt.assert_allclose(pg.sh_rgb[0, 0, 1], alpha * SH_C0, rtol=1e-10)
        # finite-difference agreement on the same quantity
        def probe(c):
            return float(render(c, cam, Modality.RGB, retain=False).image[8, 8, 1])

        fd = finite_difference_oracle(probe, cloud, "sh_rgb", 1e-5)
        npt.assert_allclose(pg.sh_rgb, fd, atol=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_pipeline_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed + 100)
        cloud = random_cloud(rng, n=10, deg_rgb=1, deg_th=0)
        cam = make_camera(size=24, z=1.4)
        w = ModalityWeights(gamma=0.55, lambda_dssim=0.2, lambda_smooth=0.6)
        target_rgb = rng.uniform(0.1, 0.9, (24, 24, 3))
        target_th = rng.uniform(0.1, 0.9, (24, 24))
        pg = _joint_backward(cloud, cam, target_rgb, target_th, w)
        loss_fn = _joint_loss_fn(cam, target_rgb, target_th, w)
        for name, a in gradients_as_dict(pg).items():
            fd = finite_difference_oracle(loss_fn, cloud, name, 1e-5)
            denom = np.maximum(np.abs(a), np.abs(fd))
            mask = denom > 1e-8
            rel = np.abs(a - fd)[mask] / denom[mask]
            assert rel.max() <= 1e-4, f"{name}: max rel err {rel.max():.2e}"

    def test_gradient_linearity_in_upstream(self, rng):
        cloud = random_cloud(rng, n=8)
        cam = make_camera()
        out = render(cloud, cam, Modality.RGB)
        u = rng.normal(size=(32, 32, 3))
        v = rng.normal(size=(32, 32, 3))
        a, b = 1.7, -0.6
        g_combo = gradients_as_dict(backward(cloud, cam, Modality.RGB, a * u + b * v, out))
        g_u = gradients_as_dict(backward(cloud, cam, Modality.RGB, u, out))
        g_v = gradients_as_dict(backward(cloud, cam, Modality.RGB, v, out))
        for name in g_combo:
            npt.assert_allclose(
                g_combo[name], a * g_u[name] + b * g_v[name], atol=1e-10, err_msg=name
            )

    def test_culled_gaussians_have_zero_gradients(self, rng):
        cloud = random_cloud(rng, n=6)
        cloud.positions[2] = [0.0, 0.0, -5.0]   # behind the camera
        cloud.positions[4] = [40.0, 0.0, 1.0]   # far off-screen
        cloud.touch()
        cam = make_camera()
        out = render(cloud, cam, Modality.RGB)
        up = rng.normal(size=(32, 32, 3))
        pg = backward(cloud, cam, Modality.RGB, up, out)
        assert not pg.visible[2] and not pg.visible[4]
        for name, g in gradients_as_dict(pg).items():
            npt.assert_array_equal(g[2], 0.0, err_msg=name)
            npt.assert_array_equal(g[4], 0.0, err_msg=name)

    def test_rotation_gradient_tangent_to_unit_sphere(self, rng):
        cloud = random_cloud(rng, n=8)
        # stored quaternions here are unit norm
        cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
        cloud.touch()
        cam = make_camera()
        out = render(cloud, cam, Modality.RGB)
        pg = backward(cloud, cam, Modality.RGB, rng.normal(size=(32, 32, 3)), out)
        dots = np.sum(pg.rotation * cloud.rotations, axis=1)
        npt.assert_allclose(dots, 0.0, atol=1e-9)

    def test_stale_buffers_rejected(self, rng):
        cloud = random_cloud(rng, n=4)
        cam = make_camera()
        out = render(cloud, cam, Modality.RGB)
        cloud.positions[0, 0] += 0.1
        cloud.touch()
        with pytest.raises(StateError):
            backward(cloud, cam, Modality.RGB, np.zeros((32, 32, 3)), out)

    def test_missing_buffers_rejected(self, rng):
        cloud = random_cloud(rng, n=4)
        cam = make_camera()
        out = render(cloud, cam, Modality.RGB, retain=False)
        with pytest.raises(StateError):
            backward(cloud, cam, Modality.RGB, np.zeros((32, 32, 3)), out)

    def test_joint_backward_additivity(self, rng):
        # zeroing one modality's upstream in the fused pass reproduces the
        # other modality's gradients exactly
        cloud = random_cloud(rng, n=8)
        cam = make_camera()
        both = (Modality.RGB, Modality.THERMAL)
        out = render_channels(cloud, cam, both)
        up_rgb = rng.normal(size=(32, 32, 3))
        fused_up = np.concatenate([up_rgb, np.zeros((32, 32, 1))], axis=2)
        pg_fused = backward(cloud, cam, both, fused_up, out)

        out_rgb = render(cloud, cam, Modality.RGB)
        pg_rgb = backward(cloud, cam, Modality.RGB, up_rgb, out_rgb)
        npt.assert_array_equal(pg_fused.sh_rgb, pg_rgb.sh_rgb)
        npt.assert_array_equal(pg_fused.sh_thermal, 0.0)

    def test_background_gradients_match_fd(self):
        # non-black background attenuated by the final transmittance
        rng = np.random.default_rng(5)  # scene away from skip thresholds
        cloud = random_cloud(rng, n=8)
        cam = make_camera(size=24, z=1.4)
        bg = 0.3
        target = rng.uniform(0.1, 0.9, (24, 24, 3))
        out = render(cloud, cam, Modality.RGB, background=bg)

        def loss_fn(c):
            o = render(c, cam, Modality.RGB, retain=False, background=bg)
            return losses.l1_loss(o.image, target)

        pg = backward(cloud, cam, Modality.RGB, losses.l1_grad(out.image, target), out)
        for name, a in gradients_as_dict(pg).items():
            fd = finite_difference_oracle(loss_fn, cloud, name, 1e-5)
            denom = np.maximum(np.abs(a), np.abs(fd))
            mask = denom > 1e-8
            if mask.any():
                rel = (np.abs(a - fd)[mask] / denom[mask]).max()
                assert rel <= 1e-4, f"{name}: {rel:.2e}"

    def test_all_finite_after_backward(self, rng):
        cloud = random_cloud(rng, n=20, opacity_lo=-3, opacity_hi=4)
        cam = make_camera()
        out = render(cloud, cam, Modality.THERMAL)
        pg = backward(cloud, cam, Modality.THERMAL, rng.normal(size=(32, 32)), out)
        assert pg.all_finite()
