import json

import numpy as np
import pytest
import torch
from PIL import Image

from blockworld.dataio import (Camera, Dataset, DatasetError, export_scene_obj, load_dataset,
                               load_points, look_at, project_point, read_obj, save_dataset,
                               save_points)
from blockworld.geometry import scene_parts
from blockworld.scene import scene_from_blocks


def _cam(fx=400.0, cx=200.0):
    return Camera(fx, fx, cx, 150.0, np.eye(3), np.zeros(3), 400, 300)


def test_project_examples():
    px, z, behind = project_point(np.array([0, 0, 1.0]), _cam())
    np.testing.assert_allclose(px, [200, 150])
    assert z == 1 and not behind
    px, z, _ = project_point(np.array([0.5, 0, 2.0]), _cam())
    assert px[0] == pytest.approx(300) and z == 2
    a, _, _ = project_point(np.array([0.3, 0.1, 2.0]), _cam(400))
    b, _, _ = project_point(np.array([0.3, 0.1, 2.0]), _cam(800))
    assert (b[0] - 200) == pytest.approx(2 * (a[0] - 200))
    _, _, behind = project_point(np.array([0, 0, -1.0]), _cam())
    assert behind


def test_project_homogeneous():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3)) + [0, 0, 5]
    p1, z1, _ = project_point(x, _cam())
    p2, z2, _ = project_point(3.0 * x, _cam())
    np.testing.assert_allclose(p1, p2, atol=1e-10)
    np.testing.assert_allclose(z2, 3 * z1)


def test_look_at_centers_target():
    cam = look_at((3, 1, 2), (0.1, -0.2, 0.3), 64, 48)
    px, z, _ = project_point(np.array([0.1, -0.2, 0.3]), cam)
    np.testing.assert_allclose(px, [31.5, 23.5], atol=1e-9)
    assert z > 0
    np.testing.assert_allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-12)


def _tiny_dataset(n=2):
    rng = np.random.default_rng(0)
    imgs = [np.round(rng.random((6, 8, 3)) * 255).astype(np.float32) / 255 for _ in range(n)]
    cams = [look_at((3 * np.cos(a), 1, 3 * np.sin(a)), (0, 0, 0), 8, 6) for a in range(n)]
    return Dataset(imgs, cams, {"scene_scale": 1.0})


def test_dataset_roundtrip(tmp_path):
    ds = _tiny_dataset()
    m = save_dataset(ds, tmp_path)
    ds2 = load_dataset(m)
    assert len(ds2) == 2
    for a, b in zip(ds.images, ds2.images):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(ds.cameras, ds2.cameras):
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)
        assert (a.fx, a.cy) == (b.fx, b.cy)


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing.json")
    m = save_dataset(_tiny_dataset(), tmp_path)
    data = json.loads(m.read_text())
    bad = json.loads(m.read_text())
    w2c = np.array(bad["views"][0]["world_to_camera"])
    w2c[:3, :3] *= 1.05  # |R^T R - I| ~ 0.1
    bad["views"][0]["world_to_camera"] = w2c.tolist()
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(DatasetError, match="orthonormal"):
        load_dataset(tmp_path / "bad.json")
    data["views"][1]["width"] = 9
    (tmp_path / "dim.json").write_text(json.dumps(data))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "dim.json")
    data["views"][1]["image"] = "nope.png"
    (tmp_path / "img.json").write_text(json.dumps(data))
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "img.json")
    with pytest.raises(DatasetError):
        _tiny_dataset(1)


def test_world_transform(tmp_path):
    ds = _tiny_dataset()
    m = save_dataset(ds, tmp_path)
    data = json.loads(m.read_text())
    # cameras expressed in a world that is the canonical frame scaled by 2 and shifted
    s, t = 2.0, np.array([1.0, -2.0, 0.5])
    for v, cam in zip(data["views"], ds.cameras):
        w2c = np.eye(4)
        w2c[:3, :3] = cam.R
        w2c[:3, 3] = s * cam.t - cam.R @ t
        v["world_to_camera"] = w2c.tolist()
    data["world"]["transform"] = {"scale": s, "translation": t.tolist()}
    (tmp_path / "tr.json").write_text(json.dumps(data))
    ds2 = load_dataset(tmp_path / "tr.json")
    for a, b in zip(ds.cameras, ds2.cameras):
        np.testing.assert_allclose(b.t, a.t, atol=1e-12)


def test_points_roundtrip(tmp_path):
    p = np.random.default_rng(0).normal(size=(20, 3))
    save_points(tmp_path / "p.xyz", p)
    np.testing.assert_allclose(load_points(tmp_path / "p.xyz"), p, atol=1e-8)


def test_export_obj(tmp_path):
    blocks = [{"t": [i * 0.4, 0, 0], "scale": [1, 1, 1], "color": [0.1 * i, 0.5, 0.9], "alpha": 1.0} for i in range(3)]
    blocks.append({"t": [0, 0.5, 0], "scale": [1, 1, 1], "alpha": 0.3})
    sc = scene_from_blocks(blocks, dtype=torch.float64)
    obj = export_scene_obj(sc, tmp_path)
    v, f, groups = read_obj(obj)
    assert groups == ["dome", "ground", "block_00", "block_01", "block_02"]
    expected = sum(len(t.vertices) for n, _, t, _, b in scene_parts(sc) if b < 3)
    assert len(v) == expected
    img = np.asarray(Image.open(tmp_path / "scene_block_01.png"))
    want = np.round(torch.sigmoid(sc.textures[3]).detach().numpy() * 255)
    np.testing.assert_array_equal(img, want)
    assert "map_Kd scene_block_02.png" in (tmp_path / "scene.mtl").read_text()
