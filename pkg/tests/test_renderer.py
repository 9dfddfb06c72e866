import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from blockworld.core import backward
from blockworld.dataio import Camera, look_at
from blockworld.geometry import SceneMesh
from blockworld.renderer import (RenderSettings, alpha_composite, compositing_weights,
                                 gather_fragments, render_mesh, render_view, render_views,
                                 soft_occupancy)
from blockworld.scene import SceneModel, scene_from_blocks

from conftest import two_block_scene


def test_soft_occupancy_examples():
    assert soft_occupancy(0.01, 0.7, 1e-4) == pytest.approx(0.7)
    assert soft_occupancy(0.0, 1.0, 1e-4) == pytest.approx(1.0)
    assert soft_occupancy(-1e-4, 1.0, 1e-4) == pytest.approx(0.36788, abs=1e-5)


def test_composite_examples():
    c = np.array([[0.2, 0.4, 0.6]])
    rgb, acc = alpha_composite(np.array([1.0]), c)
    np.testing.assert_allclose(rgb, c[0])
    rgb, _ = alpha_composite(np.array([0.5, 1.0]), np.array([[1, 1, 1.0], [0, 0, 0.0]]))
    np.testing.assert_allclose(rgb, [0.5, 0.5, 0.5])
    rgb, _ = alpha_composite(np.array([1.0, 0.7, 0.3]), np.array([[0.1, 0.2, 0.3], [1, 1, 1], [1, 0, 0.0]]))
    np.testing.assert_allclose(rgb, [0.1, 0.2, 0.3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=16), st.integers(0, 15), st.floats(0, 1))
def test_composite_monotone(o, i, bump):
    o = np.array(o)
    i = i % len(o)
    w = compositing_weights(o)
    o2 = o.copy()
    o2[i] = o[i] + (1 - o[i]) * bump
    w2 = compositing_weights(o2)
    assert w2[i] >= w[i] - 1e-15
    assert (w2[i + 1:] <= w[i + 1:] + 1e-15).all()
    assert w.sum() <= 1 + 1e-12


def test_sort_idempotence():
    rng = np.random.default_rng(0)
    depth = rng.random(10)
    o, c = rng.random(10), rng.random((10, 3))
    order = np.argsort(depth, kind="stable")
    a = alpha_composite(o[order], c[order])[0]
    order2 = np.argsort(depth[order], kind="stable")
    b = alpha_composite(o[order][order2], c[order][order2])[0]
    np.testing.assert_array_equal(a, b)


def _tri_mesh(z_list, uv=None, dtype=torch.float64):
    verts, faces = [], []
    for i, z in enumerate(z_list):
        verts += [[-3, -3, z], [3, -3, z], [0, 3, z]]
        faces.append([3 * i, 3 * i + 1, 3 * i + 2])
    n = len(z_list)
    uv = np.array([[[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]]] * n) if uv is None else uv
    return SceneMesh(torch.tensor(verts, dtype=dtype), np.array(faces, dtype=np.int64).reshape(-1, 3),
                     uv, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64) - 1, np.zeros(n),
                     [("tri", 0, n)])


CAM16 = Camera(8, 8, 7.5, 7.5, np.eye(3), np.zeros(3), 16, 16)


def test_gather_empty():
    m = SceneMesh(torch.zeros(0, 3, dtype=torch.float64), np.zeros((0, 3), np.int64), np.zeros((0, 3, 2)),
                  np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), [])
    fs = gather_fragments(m, CAM16)
    assert fs.count.sum() == 0


def test_gather_single_opaque():
    fs = gather_fragments(_tri_mesh([2.0]), CAM16)
    assert fs.count[8, 8] == 1
    assert float(fs.occupancy[8, 8, 0]) == 1.0
    np.testing.assert_allclose(fs.color[8, 8, 0].numpy(), 0.5)


def test_gather_truncates_to_nearest():
    z = np.linspace(5.0, 2.0, 17)  # listed far to near
    m = _tri_mesh(list(z))
    fa = torch.full((17,), 0.5, dtype=torch.float64)
    fs = gather_fragments(m, CAM16, layers=16, face_alpha=fa)
    assert fs.count[8, 8] == 16
    np.testing.assert_allclose(fs.depth[8, 8], np.sort(z)[:16])
    assert 0 not in fs.face[8, 8]  # the farthest face (index 0) was dropped


def test_clipped_barycentric_color_range():
    # texture is a horizontal ramp; fringe colors must stay within the triangle's UV range
    tex = torch.linspace(0, 1, 32, dtype=torch.float64)[None, None, :, None].expand(1, 32, 32, 3).contiguous()
    v = torch.tensor([[-0.5, -0.5, 2.0], [0.5, -0.5, 2.0], [0.0, 0.5, 2.0]], dtype=torch.float64)
    uv = np.array([[[0.3, 0.3], [0.6, 0.3], [0.45, 0.6]]])
    m = SceneMesh(v, np.array([[0, 1, 2]]), uv, np.zeros(1, np.int64), np.zeros(1, np.int64) - 1,
                  np.zeros(1), [("t", 0, 1)])
    cam = Camera(30, 30, 15.5, 15.5, np.eye(3), np.zeros(3), 32, 32)
    fs = gather_fragments(m, cam, sigma=1e-2, textures=tex)
    col = fs.color[..., 0, 0].numpy()[fs.count > 0]
    # bilinear ramp value at u is about u (within half a texel)
    assert col.min() >= 0.3 - 1 / 32 and col.max() <= 0.6 + 1 / 32
    assert (fs.count > 0).sum() > 40


def test_dome_only_constant():
    sc = scene_from_blocks([], dome_color=(0.25, 0.5, 0.75), ground_color=(1, 0, 0), dtype=torch.float64)
    cam = look_at((0, 0, 0), (0, 5, 0.01), 24, 24, 60, up=(0, 0, 1))
    img = render_view(sc, cam).image.detach().numpy()
    np.testing.assert_allclose(img, np.broadcast_to([0.25, 0.5, 0.75], img.shape), atol=1e-5)


def test_determinism(camera48):
    sc = two_block_scene()
    a = render_view(sc, camera48).image.detach().numpy()
    b = render_view(sc, camera48).image.detach().numpy()
    assert a.tobytes() == b.tobytes()


def test_opacity_bounds(camera48):
    out = render_view(two_block_scene(), camera48)
    acc = out.opacity.detach().numpy()
    assert acc.max() <= 1 + 1e-9
    # the closed dome ends every ray unless the stack was truncated at L layers
    full = out.fragments.count < 16
    assert full.mean() > 0.99
    np.testing.assert_allclose(acc[full], 1.0, atol=1e-6)


def test_alpha_gradient_flow(camera48):
    sc = two_block_scene()
    out = render_view(sc, camera48)
    g = backward(out.image.sum(), sc.parameters())
    assert (g["block_alpha"].abs() > 0).all()
    assert float(g["block_t"].abs().sum()) > 0
    assert float(g["textures"][2:].abs().sum()) > 0


def test_compiled_matches_torch_reference(camera48):
    sc = two_block_scene()
    settings = RenderSettings(sigma=1e-3)
    cams = [camera48, look_at((-2, 1.0, 2.0), (0, -0.5, 0), 48, 48, 45)]
    outs = {}
    for be in ("compiled", "torch"):
        o = render_views(sc, cams, settings, backend=be)
        loss = sum((x.image ** 2).sum() for x in o)
        outs[be] = (torch.stack([x.image for x in o]).detach(), backward(loss, sc.parameters()))
    np.testing.assert_allclose(outs["compiled"][0], outs["torch"][0], atol=1e-10)
    for n in sc.parameters():
        np.testing.assert_allclose(outs["compiled"][1][n], outs["torch"][1][n], atol=1e-8, rtol=1e-6)
