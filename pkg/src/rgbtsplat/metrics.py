"""Image quality metrics and held-out-view evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import Modality
from .errors import ShapeMismatchError
from .losses import ssim_value
from .rasterize import render
from .sceneio import FrameSet, quantize_gray16, quantize_rgb8

TEST_EVERY = 8  # every 8th frame held out


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """10*log10(1/MSE) on [0,1] values; identical images give math.inf."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(rendered: np.ndarray, target: np.ndarray) -> float:
    """Windowed SSIM; shares the statistics with the D-SSIM loss, so
    ssim == 1 - 2 * dssim_loss holds exactly."""
    return ssim_value(rendered, target)


def split_frames(scene: FrameSet):
    """Held-out split: every 8th frame (0, 8, 16, ...) is a test view."""
    train_frames = [f for i, f in enumerate(scene.frames) if i % TEST_EVERY != 0]
    test_frames = [f for i, f in enumerate(scene.frames) if i % TEST_EVERY == 0]
    make = lambda frames: FrameSet(
        frames=frames,
        thermal_range=scene.thermal_range,
        initial_points=scene.initial_points,
        root=scene.root,
    )
    return make(train_frames), make(test_frames)


def _enc_float(x):
    if x is None:
        return None
    if math.isinf(x):
        return "inf"
    return x


def _dec_float(x):
    if x == "inf":
        return math.inf
    return x


@dataclass
class EvalReport:
    """Per-view and mean quality per modality, plus model-level facts."""

    per_view: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    model_size_bytes: int | None = None
    timings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "per_view": [
                {
                    "view": v["view"],
                    **{
                        mod: {k: _enc_float(val) for k, val in v[mod].items()}
                        for mod in v
                        if mod != "view"
                    },
                }
                for v in self.per_view
            ],
            "mean": {
                mod: {k: _enc_float(val) for k, val in stats.items()}
                for mod, stats in self.mean.items()
            },
            "counts": self.counts,
            "model_size_bytes": self.model_size_bytes,
            "timings": self.timings,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        per_view = [
            {
                "view": v["view"],
                **{
                    mod: {k: _dec_float(val) for k, val in v[mod].items()}
                    for mod in v
                    if mod != "view"
                },
            }
            for v in doc["per_view"]
        ]
        mean = {
            mod: {k: _dec_float(val) for k, val in stats.items()}
            for mod, stats in doc["mean"].items()
        }
        return cls(
            per_view=per_view,
            mean=mean,
            counts=doc.get("counts", {}),
            model_size_bytes=doc.get("model_size_bytes"),
            timings=doc.get("timings", {}),
        )


def evaluate(
    clouds: dict,
    frames,
    quantize: bool = True,
    model_size_bytes: int | None = None,
) -> EvalReport:
    """Render each view with the matching cloud and score PSNR/SSIM.

    clouds: {Modality: GaussianCloud}; rendered images are quantized to the
    ground truth's stored bit depth (8-bit RGB, 16-bit thermal) before
    scoring, matching what an on-disk consumer would see.
    """
    report = EvalReport()
    t0 = time.perf_counter()
    sums: dict = {}
    for i, frame in enumerate(frames):
        entry = {"view": i}
        for modality, cloud in clouds.items():
            target = frame.target(modality)
            if target is None or cloud is None:
                continue
            img = render(cloud, frame.camera, modality, retain=False).image
            if quantize:
                img = quantize_rgb8(img) if modality == Modality.RGB else quantize_gray16(img)
            stats = {"psnr": psnr(img, target), "ssim": ssim(img, target)}
            entry[modality.value] = stats
            s = sums.setdefault(modality.value, {"psnr": [], "ssim": []})
            s["psnr"].append(stats["psnr"])
            s["ssim"].append(stats["ssim"])
        report.per_view.append(entry)
    for mod, s in sums.items():
        report.mean[mod] = {
            "psnr": sum(s["psnr"]) / len(s["psnr"]),
            "ssim": sum(s["ssim"]) / len(s["ssim"]),
        }
    report.counts = {m.value: len(c) for m, c in clouds.items() if c is not None}
    report.model_size_bytes = model_size_bytes
    report.timings = {"eval_seconds": time.perf_counter() - t0}
    return report
