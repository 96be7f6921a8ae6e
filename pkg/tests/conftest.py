import numpy as np
import pytest

from rgbtsplat.cameras import Camera
from rgbtsplat.core import GaussianCloud


def random_cloud(
    rng,
    n=10,
    deg_rgb=1,
    deg_th=0,
    rgb=True,
    thermal=True,
    box=0.4,
    scale_lo=0.05,
    scale_hi=0.16,
    opacity_lo=-1.0,
    opacity_hi=1.0,
):
    """Seeded random cloud sized for 24-32 px test frames."""
    kr = (deg_rgb + 1) ** 2
    kt = (deg_th + 1) ** 2
    return GaussianCloud(
        positions=rng.uniform(-box, box, (n, 3)),
        log_scales=rng.uniform(np.log(scale_lo), np.log(scale_hi), (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(opacity_lo, opacity_hi, n),
        sh_rgb=rng.uniform(-0.25, 0.25, (n, kr, 3)) if rgb else None,
        sh_thermal=rng.uniform(-0.25, 0.25, (n, kt, 1)) if thermal else None,
    )


def make_camera(size=32, fx=None, z=1.5):
    fx = fx if fx is not None else 1.25 * size
    return Camera(
        fx=fx,
        fy=fx,
        cx=(size - 1) / 2.0,
        cy=(size - 1) / 2.0,
        width=size,
        height=size,
        R=np.eye(3),
        t=np.array([0.0, 0.0, z]),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
