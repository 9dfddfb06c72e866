import json

import numpy as np
import pytest

from blockworld.cli import _weights, build_parser, main
from blockworld.dataio import load_dataset, load_points, read_image
from blockworld.scene import load_checkpoint

TINY_SPEC = {
    "blocks": [{"t": [0.0, -0.5, 0.0], "scale": [1.2, 1.2, 1.2], "shape": [0.5, 0.5],
                "color": [0.8, 0.2, 0.1]}],
    "ground_y": -0.9, "ground_color": [0.45, 0.4, 0.35], "dome_color": [0.7, 0.8, 0.9],
    "cameras": {"n": 4, "radius": 3.2, "height": 1.6, "target": [0.0, -0.5, 0.0],
                "fov_deg": 45.0, "width": 24, "height_px": 24},
}


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(TINY_SPEC))
    assert main(["synth", str(spec), "--out", str(root / "data"), "--n-points", "400"]) == 0
    assert main(["fit", str(root / "data" / "manifest.json"), "--k-max", "2", "--iters", "20",
                 "--runs", "2", "--out", str(root / "fit")]) == 0
    return root


def test_synth_outputs(fitted):
    ds = load_dataset(fitted / "data" / "manifest.json")
    assert len(ds) == 4 and ds.images[0].shape == (24, 24, 3)
    assert load_points(fitted / "data" / "gt_points.xyz").shape == (400, 3)
    scene = load_checkpoint(fitted / "data" / "gt.ckpt")[0]
    assert scene.K == 1


def test_fit_outputs(fitted, capsys):
    out = fitted / "fit"
    for name in ("best.ckpt", "runs.tsv", "loss_curves.png", "run_losses.png", "renders.png"):
        assert (out / name).exists(), name
    rows = (out / "runs.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["run", "seed", "render_loss", "primitives"]
    assert len(rows) == 3
    assert (out / "run_00" / "metrics.tsv").exists()
    header = load_checkpoint(out / "best.ckpt")[2]
    assert header["extra"]["seed"] in (0, 1)


def test_render_orbit_and_index(fitted, capsys):
    ckpt = str(fitted / "fit" / "best.ckpt")
    assert main(["render", ckpt, "orbit", "--frames", "3", "--size", "16",
                 "--out", str(fitted / "orbit")]) == 0
    frames = sorted((fitted / "orbit").glob("frame_*.png"))
    assert len(frames) == 3 and read_image(frames[0]).shape == (16, 16, 3)
    # The checkpoint remembers its manifest, so a bare view index works.
    assert main(["render", ckpt, "2", "--out", str(fitted / "view")]) == 0
    assert read_image(fitted / "view" / "frame_0000.png").shape == (24, 24, 3)


def test_render_camera_json(fitted):
    ds = load_dataset(fitted / "data" / "manifest.json")
    cam = fitted / "cam.json"
    cam.write_text(json.dumps(ds.cameras[1].to_dict()))
    assert main(["render", str(fitted / "data" / "gt.ckpt"), str(cam), "--out",
                 str(fitted / "camjson")]) == 0
    img = read_image(fitted / "camjson" / "frame_0000.png")
    assert np.abs(img - ds.images[1]).mean() < 0.02


def test_eval_report(fitted, capsys):
    report = fitted / "eval" / "report.json"
    assert main(["eval", str(fitted / "data" / "gt.ckpt"), str(fitted / "data" / "gt_points.xyz"),
                 "--manifest", str(fitted / "data" / "manifest.json"), "--n-points", "400",
                 "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["primitive_count"] == 1
    assert data["chamfer"] < 0.05
    assert data["psnr"] > 30
    assert report.with_suffix(".png").exists()
    assert "chamfer" in capsys.readouterr().out


def test_export(fitted):
    assert main(["export", str(fitted / "data" / "gt.ckpt"), "--out", str(fitted / "obj"),
                 "--name", "gt"]) == 0
    assert (fitted / "obj" / "gt.obj").exists()
    assert (fitted / "obj" / "gt.mtl").exists()


def test_errors_exit_2(tmp_path, capsys):
    assert main(["fit", str(tmp_path / "missing.json"), "--iters", "1"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"blocks": []}')
    assert main(["synth", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err


def test_config_file_weights(tmp_path, fitted):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"weights": {"parsi": 0.5, "tv": 0.0}}')
    argv = ["fit", str(fitted / "data" / "manifest.json"), "--k-max", "1", "--iters", "3",
            "--runs", "1", "--config", str(cfg), "--lambda-tv", "0.2", "--out", str(tmp_path / "f")]
    w = _weights(build_parser().parse_args(argv))
    assert (w.parsi, w.tv, w.over) == (0.5, 0.2, 1.0)
    assert main(argv) == 0
