"""Multimodal (RGB + thermal) 3D Gaussian splatting engine, CPU-only.

Jointly reconstructs color and thermal radiance from posed image pairs via
depth-sorted alpha splatting with handwritten analytic gradients, three
multimodal training strategies, a thermal smoothness objective and
count-based multimodal regularization.
"""

from .cameras import Camera
from .core import (
    ActivatedGaussian,
    Gaussian3D,
    GaussianCloud,
    Modality,
    ModalityWeights,
    activate_parameters,
    covariance_from_factors,
    gaussian_density,
    sh_evaluate,
)
from .autograd import ParameterGradients, backward, finite_difference_oracle
from .losses import (
    LossReport,
    dssim_loss,
    joint_loss,
    l1_loss,
    modality_loss,
    mr_gamma,
    smooth_loss,
    ssim_value,
)
from .rasterize import (
    RenderOutput,
    Splat2D,
    composite_tile,
    project_gaussian,
    render,
    render_channels,
    render_reference,
)
from .metrics import EvalReport, evaluate, psnr, split_frames, ssim
from .sceneio import (
    FrameSet,
    RigCalibration,
    SynthSpec,
    export_cloud,
    import_cloud,
    load_scene,
    map_thermal_pixel,
    mix_images,
    msx_image,
    register_thermal_image,
    save_scene,
    synth_scene,
)
from .train import Strategy, TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "ActivatedGaussian",
    "Camera",
    "EvalReport",
    "FrameSet",
    "Gaussian3D",
    "GaussianCloud",
    "LossReport",
    "Modality",
    "ModalityWeights",
    "ParameterGradients",
    "RenderOutput",
    "RigCalibration",
    "Splat2D",
    "Strategy",
    "SynthSpec",
    "TrainConfig",
    "TrainResult",
    "activate_parameters",
    "backward",
    "composite_tile",
    "covariance_from_factors",
    "dssim_loss",
    "evaluate",
    "export_cloud",
    "finite_difference_oracle",
    "gaussian_density",
    "import_cloud",
    "joint_loss",
    "l1_loss",
    "load_scene",
    "map_thermal_pixel",
    "mix_images",
    "modality_loss",
    "mr_gamma",
    "msx_image",
    "project_gaussian",
    "psnr",
    "register_thermal_image",
    "render",
    "render_channels",
    "render_reference",
    "save_scene",
    "sh_evaluate",
    "smooth_loss",
    "split_frames",
    "ssim",
    "ssim_value",
    "synth_scene",
    "train",
]
