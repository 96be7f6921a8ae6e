import numpy as np
import numpy.testing as npt
import pytest

from rgbtsplat.core import (
    Gaussian3D,
    GaussianCloud,
    Modality,
    ModalityWeights,
    SH_C0,
    activate_parameters,
    covariance_from_factors,
    gaussian_density,
    n_sh_coeffs,
    sh_basis,
    sh_basis_grad,
    sh_evaluate,
)
from rgbtsplat.errors import (
    ConfigurationError,
    DegenerateCovarianceError,
    InvalidParameterError,
)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


class TestCovarianceFromFactors:
    def test_axis_aligned_scaling(self):
        cov = covariance_from_factors(np.array([np.log(2.0), 0.0, 0.0]), IDENTITY_Q)
        npt.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), rtol=0, atol=1e-12)

    def test_unit_scale_any_rotation_is_identity(self, rng):
        for _ in range(5):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            cov = covariance_from_factors(np.zeros(3), q)
            npt.assert_allclose(cov, np.eye(3), atol=1e-12)

    def test_quarter_turn_about_z_matches_matrix_product(self):
        # independent oracle: explicit R S S^T R^T with the known 90-degree matrix
        q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
        log_scale = np.array([np.log(2.0), 0.0, 0.0])
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        s = np.diag(np.exp(log_scale))
        expected = rot @ s @ s.T @ rot.T
        cov = covariance_from_factors(log_scale, q)
        npt.assert_allclose(cov, expected, atol=1e-9)
        npt.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-9)

    def test_symmetric_and_positive_definite(self, rng):
        for _ in range(10):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            cov = covariance_from_factors(rng.uniform(-2, 1, 3), q)
            npt.assert_allclose(cov, cov.T, atol=1e-12)
            assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_quaternion_sign_flip_invariance(self, rng):
        for _ in range(10):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            s = rng.uniform(-2, 1, 3)
            npt.assert_array_equal(
                covariance_from_factors(s, q), covariance_from_factors(s, -q)
            )

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidParameterError):
            covariance_from_factors(np.array([np.nan, 0, 0]), IDENTITY_Q)
        with pytest.raises(InvalidParameterError):
            covariance_from_factors(np.zeros(3), np.array([np.inf, 0, 0, 0]))


class TestGaussianDensity:
    def test_peak_at_mean(self):
        assert gaussian_density(np.zeros(3), np.zeros(3), np.eye(3)) == 1.0

    def test_unit_isotropic(self):
        val = gaussian_density(np.array([1.0, 0, 0]), np.zeros(3), np.eye(3))
        npt.assert_allclose(val, np.exp(-0.5), rtol=1e-12)

    def test_anisotropic_mahalanobis_one(self):
        val = gaussian_density(
            np.array([2.0, 0, 0]), np.zeros(3), np.diag([4.0, 1.0, 1.0])
        )
        npt.assert_allclose(val, np.exp(-0.5), rtol=1e-12)

    def test_rotation_invariance(self, rng):
        from rgbtsplat.core import quat_to_rotmat

        for _ in range(10):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            rot = quat_to_rotmat(q)
            delta = rng.normal(size=3)
            cov = covariance_from_factors(rng.uniform(-1, 0.5, 3), IDENTITY_Q)
            v1 = gaussian_density(delta, np.zeros(3), cov)
            v2 = gaussian_density(rot @ delta, np.zeros(3), rot @ cov @ rot.T)
            npt.assert_allclose(v1, v2, atol=1e-10)

    def test_singular_covariance_rejected(self):
        with pytest.raises(DegenerateCovarianceError):
            gaussian_density(np.zeros(3), np.zeros(3), np.diag([1.0, 1.0, 0.0]))

    def test_in_unit_interval(self, rng):
        for _ in range(10):
            cov = covariance_from_factors(rng.uniform(-1, 0.5, 3), IDENTITY_Q)
            v = gaussian_density(rng.normal(size=3), rng.normal(size=3), cov)
            assert 0.0 < v <= 1.0


class TestShEvaluate:
    def test_dc_only(self, rng):
        k = 0.7
        coeffs = np.array([[k]])
        for _ in range(5):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            val = sh_evaluate(coeffs, d, 0)
            npt.assert_allclose(val, k * 0.2820948 + 0.5, atol=1e-6)

    def test_all_zero_coeffs(self, rng):
        coeffs = np.zeros((4, 2))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        npt.assert_array_equal(sh_evaluate(coeffs, d, 1), [0.5, 0.5])

    def test_opposite_directions_differ_by_twice_degree1(self, rng):
        # direct basis evaluation oracle for the degree-1 contribution
        c1 = 0.4886025119029199
        coeffs = rng.uniform(-0.1, 0.1, (4, 1))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        v_plus = sh_evaluate(coeffs, d, 1)
        v_minus = sh_evaluate(coeffs, -d, 1)
        deg1 = (
            -c1 * d[1] * coeffs[1, 0]
            + c1 * d[2] * coeffs[2, 0]
            - c1 * d[0] * coeffs[3, 0]
        )
        npt.assert_allclose(v_plus - v_minus, 2.0 * deg1, atol=1e-12)

    def test_degree0_view_independent(self, rng):
        coeffs = rng.uniform(-1, 1, (1, 3))
        vals = []
        for _ in range(8):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            vals.append(sh_evaluate(coeffs, d, 0))
        for v in vals[1:]:
            npt.assert_array_equal(v, vals[0])

    def test_degree_exceeding_storage_rejected(self):
        with pytest.raises(ConfigurationError):
            sh_evaluate(np.zeros((4, 3)), np.array([0.0, 0.0, 1.0]), 2)

    def test_clamped_non_negative(self):
        coeffs = np.array([[-10.0]])
        val = sh_evaluate(coeffs, np.array([0.0, 0.0, 1.0]), 0)
        npt.assert_array_equal(val, [0.0])


class TestShBasisGradients:
    @pytest.mark.parametrize("degree", [1, 2, 3])
    def test_matches_finite_differences(self, degree, rng):
        h = 1e-6
        for _ in range(4):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            grad = sh_basis_grad(d, degree)
            for axis in range(3):
                dp = d.copy()
                dm = d.copy()
                dp[axis] += h
                dm[axis] -= h
                fd = (sh_basis(dp, degree) - sh_basis(dm, degree)) / (2 * h)
                npt.assert_allclose(grad[:, axis], fd, atol=1e-7)


class TestActivation:
    def test_opacity_midpoint(self):
        g = Gaussian3D(np.zeros(3), np.zeros(3), IDENTITY_Q, 0.0, sh_rgb=np.zeros((1, 3)))
        assert activate_parameters(g).opacity == 0.5

    def test_unit_scale(self):
        g = Gaussian3D(np.zeros(3), np.zeros(3), IDENTITY_Q, 0.0, sh_rgb=np.zeros((1, 3)))
        npt.assert_array_equal(activate_parameters(g).scale, np.ones(3))

    def test_quaternion_normalized(self):
        g = Gaussian3D(
            np.zeros(3), np.zeros(3), np.array([2.0, 0, 0, 0]), 0.0, sh_rgb=np.zeros((1, 3))
        )
        npt.assert_array_equal(activate_parameters(g).rotation, IDENTITY_Q)


class TestCloud:
    def test_requires_a_modality(self, rng):
        with pytest.raises(ConfigurationError):
            GaussianCloud(
                positions=np.zeros((2, 3)),
                log_scales=np.zeros((2, 3)),
                rotations=np.tile(IDENTITY_Q, (2, 1)),
                opacity_logits=np.zeros(2),
            )

    def test_requires_at_least_one_gaussian(self):
        with pytest.raises(InvalidParameterError):
            GaussianCloud(
                positions=np.zeros((0, 3)),
                log_scales=np.zeros((0, 3)),
                rotations=np.zeros((0, 4)),
                opacity_logits=np.zeros(0),
                sh_rgb=np.zeros((0, 1, 3)),
            )

    def test_modality_mask_and_degrees(self, rng):
        from conftest import random_cloud

        c = random_cloud(rng, n=3, deg_rgb=2, deg_th=1)
        assert c.modality_mask == {Modality.RGB, Modality.THERMAL}
        assert c.sh_degree_rgb == 2
        assert c.sh_degree_thermal == 1

    def test_roundtrip_through_gaussian_list(self, rng):
        from conftest import random_cloud

        c = random_cloud(rng, n=4)
        rebuilt = GaussianCloud.from_gaussians([c[i] for i in range(len(c))])
        npt.assert_array_equal(rebuilt.positions, c.positions)
        npt.assert_array_equal(rebuilt.sh_rgb, c.sh_rgb)
        npt.assert_array_equal(rebuilt.opacity_logits, c.opacity_logits)


class TestModalityWeights:
    def test_validation(self):
        ModalityWeights(gamma=0.0, lambda_dssim=1.0, lambda_smooth=0.0)
        with pytest.raises(ConfigurationError):
            ModalityWeights(gamma=1.5)
        with pytest.raises(ConfigurationError):
            ModalityWeights(lambda_smooth=-0.1)

    def test_defaults_match_training_setup(self):
        w = ModalityWeights()
        assert w.lambda_dssim == 0.2
        assert w.lambda_smooth == 0.6


def test_n_sh_coeffs():
    assert [n_sh_coeffs(d) for d in range(4)] == [1, 4, 9, 16]


def test_sh_dc_constant():
    npt.assert_allclose(SH_C0, 0.2820948, atol=1e-7)
