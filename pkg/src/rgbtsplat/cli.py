"""Command-line surface: scene synthesis, training, rendering, evaluation,
image preprocessing, pixel mapping and cloud file round-trips.

Report paths (train, eval) write matplotlib figures next to their delimited
outputs (JSONL loss log / JSON report) unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from .core import Modality
from .errors import ConfigurationError, InvalidParameterError, SplatError
from .metrics import evaluate, split_frames
from .rasterize import render
from .sceneio import (
    RigCalibration,
    SynthSpec,
    export_cloud,
    import_cloud,
    import_sfm_text,
    load_scene,
    map_thermal_pixel,
    mix_images,
    msx_image,
    read_rgb8,
    synth_scene,
    write_gray16,
    write_rgb8,
)
from .train import Strategy, TrainConfig, train


def _read_gray_any(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I"):
            return np.asarray(im, dtype=np.float64) / 65535.0
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _write_gray8(path, img) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="run seed (deterministic)")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rgbtsplat",
        description="Multimodal RGB+thermal Gaussian splatting toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGBT scene")
    p.add_argument("--out", required=True)
    p.add_argument("--n-gaussians", type=int, default=50)
    p.add_argument("--n-frames", type=int, default=10)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--ring-radius", type=float, default=2.5)
    p.add_argument("--thermal-field", choices=["smooth", "contrast"], default="smooth")
    p.add_argument("--rgb-mode", choices=["textured", "flat_region"], default="textured")
    p.add_argument("--init-keep", type=float, default=1.0)
    p.add_argument("--init-jitter", type=float, default=0.0)
    p.add_argument("--thermal-range", type=float, nargs=2, default=[0.0, 100.0])
    _add_seed(p)

    p = sub.add_parser("train", help="optimize a scene with one strategy")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--strategy",
        choices=[s.value for s in Strategy],
        default=Strategy.OMMG.value,
    )
    p.add_argument("--iterations", type=int, default=30000)
    p.add_argument("--use-mr", action="store_true")
    p.add_argument("--fixed-gamma", type=float, default=None)
    p.add_argument("--lambda-dssim", type=float, default=0.2)
    p.add_argument("--lambda-smooth", type=float, default=0.6)
    p.add_argument("--sh-degree-rgb", type=int, default=3)
    p.add_argument("--sh-degree-thermal", type=int, default=0)
    p.add_argument("--densify-interval", type=int, default=100)
    p.add_argument("--densify-start", type=int, default=500)
    p.add_argument("--densify-end", type=int, default=15000)
    p.add_argument("--densify-grad-threshold", type=float, default=0.0002)
    p.add_argument("--prune-opacity", type=float, default=0.005)
    p.add_argument("--checkpoint-interval", type=int, default=None)
    p.add_argument(
        "--split",
        choices=["train", "all"],
        default="train",
        help="train on the training split (every 8th view held out) or on all views",
    )
    p.add_argument("--no-figures", action="store_true")
    _add_seed(p)

    p = sub.add_parser("render", help="render a trained cloud from a scene view")
    p.add_argument("--scene", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--modality", choices=["rgb", "thermal"], default="rgb")
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("eval", help="evaluate clouds on held-out views")
    p.add_argument("--scene", required=True)
    p.add_argument("--rgb-cloud")
    p.add_argument("--thermal-cloud")
    p.add_argument("--multi-cloud")
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--no-figures", action="store_true")
    _add_seed(p)

    p = sub.add_parser("mix", help="opacity-blend registered RGB and thermal images")
    p.add_argument("--rgb", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("msx", help="overlay high-frequency color detail onto thermal")
    p.add_argument("--rgb", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--strength", type=float, default=0.7)
    p.add_argument("--blur-sigma", type=float, default=2.0)
    p.add_argument("--bits", type=int, choices=[8, 16], default=8)
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("map-pixel", help="map a thermal pixel onto the RGB image")
    p.add_argument("--calib", required=True, help="JSON with K_rgb, K_th, R, t")
    p.add_argument("--u", type=float, required=True)
    p.add_argument("--v", type=float, required=True)
    p.add_argument("--depth", type=float, required=True)
    _add_seed(p)

    p = sub.add_parser("export", help="rewrite a cloud file in the canonical layout")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("import", help="read a cloud file and print a summary")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", help="optionally re-export to this path")
    _add_seed(p)

    p = sub.add_parser("import-sfm", help="convert SfM text output to a scene manifest")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thermal-range", type=float, nargs=2, default=[0.0, 100.0])
    _add_seed(p)

    return ap


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        n_gaussians=args.n_gaussians,
        n_frames=args.n_frames,
        width=args.width,
        height=args.height,
        ring_radius=args.ring_radius,
        seed=args.seed,
        thermal_field=args.thermal_field,
        rgb_mode=args.rgb_mode,
        thermal_range=tuple(args.thermal_range),
        init_keep=args.init_keep,
        init_jitter=args.init_jitter,
    )
    _, gt = synth_scene(spec, args.out)
    export_cloud(gt, os.path.join(args.out, "ground_truth.ply"))
    print(os.path.join(args.out, "scene.json"))
    return 0


def _cmd_train(args) -> int:
    scene = load_scene(args.scene)
    if args.split == "train":
        scene, _ = split_frames(scene)
    cfg = TrainConfig(
        strategy=Strategy(args.strategy),
        iterations=args.iterations,
        use_mr=args.use_mr,
        fixed_gamma=args.fixed_gamma,
        lambda_dssim=args.lambda_dssim,
        lambda_smooth=args.lambda_smooth,
        sh_degree_rgb=args.sh_degree_rgb,
        sh_degree_thermal=args.sh_degree_thermal,
        densify_interval=args.densify_interval,
        densify_start=args.densify_start,
        densify_end=args.densify_end,
        densify_grad_threshold=args.densify_grad_threshold,
        prune_opacity_threshold=args.prune_opacity,
        seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
    )
    os.makedirs(args.out, exist_ok=True)
    result = train(scene, cfg, out_dir=args.out)
    log_path = os.path.join(args.out, "loss_log.jsonl")
    with open(log_path, "w") as fh:
        for rec in result.log:
            fh.write(rec.to_json_line() + "\n")
    for key, cloud in result.clouds.items():
        export_cloud(cloud, os.path.join(args.out, f"cloud_{key}.ply"))
    if not args.no_figures and result.log:
        from .report import save_loss_curves

        save_loss_curves(result.log, os.path.join(args.out, "loss_curves.png"))
    counts = {k: len(c) for k, c in result.clouds.items()}
    print(json.dumps({"loss_log": log_path, "clouds": counts}, sort_keys=True))
    return 0


def _load_clouds(args) -> dict:
    clouds = {}
    if getattr(args, "multi_cloud", None):
        c = import_cloud(args.multi_cloud)
        clouds[Modality.RGB] = c
        clouds[Modality.THERMAL] = c
    if getattr(args, "rgb_cloud", None):
        clouds[Modality.RGB] = import_cloud(args.rgb_cloud)
    if getattr(args, "thermal_cloud", None):
        clouds[Modality.THERMAL] = import_cloud(args.thermal_cloud)
    if not clouds:
        raise ConfigurationError("no cloud given (use --rgb-cloud/--thermal-cloud/--multi-cloud)")
    return clouds


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    if not 0 <= args.frame < len(scene.frames):
        raise ConfigurationError(f"frame {args.frame} outside 0..{len(scene.frames) - 1}")
    cloud = import_cloud(args.cloud)
    modality = Modality(args.modality)
    out = render(cloud, scene.frames[args.frame].camera, modality, retain=False,
                 background=args.background)
    if modality == Modality.RGB:
        write_rgb8(args.out, out.image)
    else:
        write_gray16(args.out, out.image)
    print(args.out)
    return 0


def _cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    train_fs, test_fs = split_frames(scene)
    frames = {"test": test_fs, "train": train_fs, "all": scene}[args.split].frames
    clouds = _load_clouds(args)
    size = 0
    for p in (args.multi_cloud, args.rgb_cloud, args.thermal_cloud):
        if p:
            size += os.path.getsize(p)
    report = evaluate(clouds, frames, model_size_bytes=size)
    with open(args.out, "w") as fh:
        fh.write(report.to_json())
    if not args.no_figures:
        from .report import save_comparison, save_eval_bars

        base = os.path.splitext(args.out)[0]
        save_eval_bars(report, base + "_psnr.png")
        if frames:
            for modality, cloud in clouds.items():
                target = frames[0].target(modality)
                if target is None:
                    continue
                img = render(cloud, frames[0].camera, modality, retain=False).image
                save_comparison(
                    img, target, f"{base}_view0_{modality.value}.png",
                    title=f"{modality.value} view 0",
                )
    print(report.to_json())
    return 0


def _cmd_mix(args) -> int:
    rgb = read_rgb8(args.rgb)
    th = _read_gray_any(args.thermal)
    out = mix_images(rgb, th, args.beta)
    write_rgb8(args.out, out)
    print(args.out)
    return 0


def _cmd_msx(args) -> int:
    rgb = read_rgb8(args.rgb)
    th = _read_gray_any(args.thermal)
    out = msx_image(rgb, th, strength=args.strength, blur_sigma=args.blur_sigma)
    if args.bits == 8:
        _write_gray8(args.out, out)
    else:
        write_gray16(args.out, out)
    print(args.out)
    return 0


def _cmd_map_pixel(args) -> int:
    with open(args.calib) as fh:
        doc = json.load(fh)
    calib = RigCalibration(
        K_rgb=np.asarray(doc["K_rgb"], dtype=np.float64),
        K_th=np.asarray(doc["K_th"], dtype=np.float64),
        R=np.asarray(doc.get("R", np.eye(3).tolist()), dtype=np.float64),
        t=np.asarray(doc.get("t", [0.0, 0.0, 0.0]), dtype=np.float64),
    )
    result = map_thermal_pixel(args.u, args.v, args.depth, calib)
    if result is None:
        print(json.dumps({"unmappable": True}))
    else:
        print(json.dumps({"u": result[0], "v": result[1]}))
    return 0


def _cmd_export(args) -> int:
    export_cloud(import_cloud(args.cloud), args.out)
    print(args.out)
    return 0


def _cmd_import(args) -> int:
    cloud = import_cloud(args.cloud)
    summary = {
        "count": len(cloud),
        "modalities": sorted(m.value for m in cloud.modality_mask),
        "sh_degree_rgb": cloud.sh_degree_rgb,
        "sh_degree_thermal": cloud.sh_degree_thermal,
    }
    if args.out:
        export_cloud(cloud, args.out)
        summary["exported"] = args.out
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_import_sfm(args) -> int:
    doc = import_sfm_text(args.dir, thermal_range=tuple(args.thermal_range))
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    print(args.out)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "mix": _cmd_mix,
    "msx": _cmd_msx,
    "map-pixel": _cmd_map_pixel,
    "export": _cmd_export,
    "import": _cmd_import,
    "import-sfm": _cmd_import_sfm,
}


def main(argv=None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SplatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
