import json
import math
import os
import subprocess
import sys

import numpy as np
import numpy.testing as npt
import pytest

from rgbtsplat.cli import main
from rgbtsplat.metrics import EvalReport
from rgbtsplat.sceneio import read_rgb8, write_gray16, write_rgb8


@pytest.fixture(scope="module")
def tiny_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    rc = main(
        [
            "synth", "--out", str(out), "--seed", "3",
            "--n-gaussians", "12", "--n-frames", "9",
            "--width", "24", "--height", "24",
        ]
    )
    assert rc == 0
    return out


def test_synth_writes_scene_and_ground_truth(tiny_scene):
    assert (tiny_scene / "scene.json").exists()
    assert (tiny_scene / "ground_truth.ply").exists()
    assert (tiny_scene / "images" / "frame0000_rgb.png").exists()
    assert (tiny_scene / "images" / "frame0000_thermal.png").exists()


def test_eval_ground_truth_cloud_is_infinite(tiny_scene, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    rc = main(
        [
            "eval", "--scene", str(tiny_scene),
            "--multi-cloud", str(tiny_scene / "ground_truth.ply"),
            "--split", "all", "--out", str(report_path), "--no-figures",
        ]
    )
    assert rc == 0
    rep = EvalReport.from_json(report_path.read_text())
    for view in rep.per_view:
        assert view["rgb"]["psnr"] == math.inf
        assert view["thermal"]["psnr"] == math.inf
    assert rep.mean["rgb"]["psnr"] == math.inf
    assert rep.model_size_bytes == os.path.getsize(tiny_scene / "ground_truth.ply")


def test_train_msmg_with_mr_logs_gamma_and_figures(tiny_scene, tmp_path):
    out = tmp_path / "run"
    rc = main(
        [
            "train", "--scene", str(tiny_scene), "--out", str(out),
            "--strategy", "msmg", "--use-mr", "--iterations", "6",
            "--sh-degree-rgb", "1", "--seed", "5",
        ]
    )
    assert rc == 0
    lines = (out / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == 6
    for line in lines:
        rec = json.loads(line)
        assert rec["gamma"] is not None
        assert rec["n_rgb"] is not None and rec["n_thermal"] is not None
    assert (out / "cloud_rgb.ply").exists()
    assert (out / "cloud_thermal.ply").exists()
    assert (out / "loss_curves.png").exists()  # report-path figure


def test_train_determinism_byte_identical_artifacts(tiny_scene, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(
            [
                "train", "--scene", str(tiny_scene), "--out", str(out),
                "--strategy", "ommg", "--iterations", "5",
                "--sh-degree-rgb", "1", "--seed", "11", "--no-figures",
            ]
        )
        assert rc == 0
        outs.append(out)
    for fname in ("loss_log.jsonl", "cloud_multi.ply"):
        a = (outs[0] / fname).read_bytes()
        b = (outs[1] / fname).read_bytes()
        assert a == b, fname


def test_render_writes_image(tiny_scene, tmp_path):
    out_png = tmp_path / "view.png"
    rc = main(
        [
            "render", "--scene", str(tiny_scene),
            "--cloud", str(tiny_scene / "ground_truth.ply"),
            "--frame", "0", "--modality", "rgb", "--out", str(out_png),
        ]
    )
    assert rc == 0
    rendered = read_rgb8(out_png)
    stored = read_rgb8(tiny_scene / "images" / "frame0000_rgb.png")
    npt.assert_array_equal(rendered, stored)


def test_mix_half_blend(tmp_path):
    rgb = np.zeros((8, 8, 3))
    rgb[:, :, 0] = 0.2
    th = np.full((8, 8), 0.6)
    write_rgb8(tmp_path / "rgb.png", rgb)
    write_gray16(tmp_path / "th.png", th)
    out = tmp_path / "mix.png"
    rc = main(
        [
            "mix", "--rgb", str(tmp_path / "rgb.png"), "--thermal", str(tmp_path / "th.png"),
            "--beta", "0.5", "--out", str(out),
        ]
    )
    assert rc == 0
    img = read_rgb8(out)
    npt.assert_allclose(img[:, :, 0], 0.4, atol=1 / 255)
    npt.assert_allclose(img[:, :, 1], 0.3, atol=1 / 255)


def test_mix_invalid_beta_exits_2(tmp_path):
    rgb = np.zeros((4, 4, 3))
    write_rgb8(tmp_path / "rgb.png", rgb)
    write_gray16(tmp_path / "th.png", np.zeros((4, 4)))
    rc = main(
        [
            "mix", "--rgb", str(tmp_path / "rgb.png"), "--thermal", str(tmp_path / "th.png"),
            "--beta", "1.5", "--out", str(tmp_path / "out.png"),
        ]
    )
    assert rc == 2


def test_msx_zero_strength_identity(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.uniform(0, 1, (8, 8, 3))
    th = rng.uniform(0.2, 0.8, (8, 8))
    write_rgb8(tmp_path / "rgb.png", rgb)
    write_gray16(tmp_path / "th.png", th)
    out = tmp_path / "msx.png"
    rc = main(
        [
            "msx", "--rgb", str(tmp_path / "rgb.png"), "--thermal", str(tmp_path / "th.png"),
            "--strength", "0", "--bits", "16", "--out", str(out),
        ]
    )
    assert rc == 0
    from rgbtsplat.sceneio import read_gray16

    npt.assert_allclose(read_gray16(out), th, atol=2 / 65535)


def test_map_pixel_identity_rig(tmp_path, capsys):
    calib = {
        "K_rgb": [[80, 0, 32], [0, 80, 24], [0, 0, 1]],
        "K_th": [[80, 0, 32], [0, 80, 24], [0, 0, 1]],
        "R": np.eye(3).tolist(),
        "t": [0, 0, 0],
    }
    p = tmp_path / "calib.json"
    p.write_text(json.dumps(calib))
    rc = main(["map-pixel", "--calib", str(p), "--u", "17.5", "--v", "9.25", "--depth", "2.0"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip())
    assert out == {"u": 17.5, "v": 9.25}


def test_map_pixel_unmappable(tmp_path, capsys):
    calib = {
        "K_rgb": [[80, 0, 32], [0, 80, 24], [0, 0, 1]],
        "K_th": [[80, 0, 32], [0, 80, 24], [0, 0, 1]],
        "R": np.eye(3).tolist(),
        "t": [0, 0, -10.0],
    }
    p = tmp_path / "calib.json"
    p.write_text(json.dumps(calib))
    rc = main(["map-pixel", "--calib", str(p), "--u", "32", "--v", "24", "--depth", "1.0"])
    assert rc == 0
    assert json.loads(capsys.readouterr().out.strip()) == {"unmappable": True}


def test_export_import_roundtrip(tiny_scene, tmp_path, capsys):
    src = tiny_scene / "ground_truth.ply"
    dst = tmp_path / "copy.ply"
    assert main(["export", "--cloud", str(src), "--out", str(dst)]) == 0
    assert dst.read_bytes() == src.read_bytes()  # canonical layout is stable
    capsys.readouterr()
    assert main(["import", "--cloud", str(dst)]) == 0
    summary = json.loads(capsys.readouterr().out.strip())
    assert summary["count"] == 12
    assert summary["modalities"] == ["rgb", "thermal"]


def test_import_sfm_subcommand(tmp_path):
    (tmp_path / "cameras.txt").write_text("1 PINHOLE 64 48 70.0 71.0 32.0 24.0\n")
    (tmp_path / "images.txt").write_text("1 1 0 0 0 0 0 2 1 f.png\n\n")
    (tmp_path / "points3D.txt").write_text("1 0 0 0 255 255 255 0.0\n")
    out = tmp_path / "scene.json"
    rc = main(["import-sfm", "--dir", str(tmp_path), "--out", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["cameras"][0]["width"] == 64


def test_missing_scene_exits_nonzero(tmp_path):
    rc = main(
        ["eval", "--scene", str(tmp_path / "nope"), "--multi-cloud", "x.ply",
         "--out", str(tmp_path / "r.json")]
    )
    assert rc == 1


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus-flag", "1"])
    assert exc.value.code == 2


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "rgbtsplat.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "synth" in proc.stdout and "eval" in proc.stdout
