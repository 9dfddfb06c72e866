import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from blockworld.core import backward
from blockworld.losses import (LossWeights, block_boxes, gradient_difference_loss, loss_mse,
                               loss_overlap, loss_parsimony, loss_tv, objective, occupancy_3d,
                               perceptual_hook, register_perceptual, sample_pool)
from blockworld.scene import scene_from_blocks

D = torch.float64


def _scene(ts, alpha=1.0, shape=(1.0, 1.0)):
    return scene_from_blocks([{"t": t, "scale": [1, 1, 1], "shape": shape, "alpha": alpha} for t in ts],
                             dtype=D)


def test_weights_validation():
    LossWeights()
    with pytest.raises(ValueError):
        LossWeights(parsi=-1)
    with pytest.raises(ValueError):
        LossWeights(overlap_cap=0.9)


def test_mse_examples():
    z, o = torch.zeros(4, 4, 3), torch.ones(4, 4, 3)
    assert float(loss_mse(z, z)) == 0
    assert float(loss_mse(z, o)) == 1.0
    half = z.clone()
    half[:2] = 0.5
    assert float(loss_mse(half, z)) == pytest.approx(0.125)


def test_tv_examples():
    assert float(loss_tv(torch.full((5, 5, 3), 0.3))) == 0
    cb = torch.tensor([[0.0, 1.0], [1.0, 0.0]])[..., None].expand(2, 2, 3)
    assert float(loss_tv(cb)) == pytest.approx(3.0)
    t = torch.rand(6, 6, 3, generator=torch.Generator().manual_seed(0), dtype=D)
    m = t.mean()
    assert float(loss_tv(m + 2 * (t - m))) == pytest.approx(4 * float(loss_tv(t)))


def test_tv_hand_sum():
    t = np.random.default_rng(0).random((3, 4, 3))
    ref = 0.0
    for u in range(3):
        for v in range(4):
            if u + 1 < 3:
                ref += ((t[u + 1, v] - t[u, v]) ** 2).sum()
            if v + 1 < 4:
                ref += ((t[u, v + 1] - t[u, v]) ** 2).sum()
    assert float(loss_tv(torch.as_tensor(t))) == pytest.approx(ref / 12)


def test_parsimony_examples():
    assert loss_parsimony(np.ones(7)) == 1.0
    assert loss_parsimony(np.zeros(3)) == 0.0
    assert loss_parsimony(np.array([0.25, 0, 0, 0])) == pytest.approx(0.125)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6), st.integers(0, 5), st.floats(1e-3, 0.5))
def test_parsimony_increasing(a, i, d):
    a = np.array(a)
    i = i % len(a)
    b = a.copy()
    b[i] = min(1.0, a[i] + d)
    assert loss_parsimony(b) > loss_parsimony(a)


def test_occupancy_examples():
    sc = _scene([[0, 0, 0]], alpha=0.8)
    surf = torch.tensor([[0.25, 0, 0]], dtype=D)  # unit scale times ratio 0.25
    np.testing.assert_allclose(occupancy_3d(surf, sc, 0).detach(), [0.4], atol=1e-6)
    sc1 = _scene([[0, 0, 0]], alpha=1.0)
    np.testing.assert_allclose(occupancy_3d(torch.zeros(1, 3, dtype=D), sc1, 0).detach(), [1.0], atol=1e-6)
    far = torch.tensor([[0.25 * np.sqrt(10), 0, 0]], dtype=D)  # psi = 10
    assert float(occupancy_3d(far, sc1, 0).detach()) < 1e-12


def test_overlap_examples():
    rng = np.random.default_rng(0)
    disjoint = _scene([[-2, 0, 0], [2, 0, 0]])
    pool = rng.uniform(-0.5, 0.5, size=(100, 3))
    assert float(loss_overlap(disjoint, pool).detach()) == pytest.approx(1.95, abs=1e-6)
    inner = rng.uniform(-0.05, 0.05, size=(100, 3))
    same = _scene([[0, 0, 0], [0, 0, 0]])
    assert float(loss_overlap(same, inner).detach()) == pytest.approx(2.0, abs=1e-6)
    one = _scene([[0, 0, 0]])
    assert float(loss_overlap(one, inner).detach()) == pytest.approx(1.95, abs=1e-6)


def test_overlap_touching_no_gradient():
    sc = _scene([[-0.3, 0, 0], [0.3, 0, 0]])
    pool = sample_pool(sc, 1000, np.random.default_rng(0))
    loss = loss_overlap(sc, pool)
    assert float(loss.detach()) == pytest.approx(1.95)
    g = backward(loss, sc.parameters())
    assert float(g["block_alpha"].abs().max()) == 0


def test_sample_pool_region():
    sc = _scene([[-0.5, 0, 0], [0.5, 0.2, 0]])
    pool = sample_pool(sc, 1000, np.random.default_rng(1))
    assert pool.shape == (1000, 3)
    boxes = block_boxes(sc)
    inside = ((pool[:, None] >= boxes[None, :, 0]) & (pool[:, None] <= boxes[None, :, 1])).all(-1).any(1)
    assert inside.all()


def test_overlap_mc_stability():
    sc = _scene([[0, 0, 0], [0.1, 0, 0]], shape=(0.5, 0.5))
    rng = np.random.default_rng(0)
    vals = [float(loss_overlap(sc, sample_pool(sc, 1000, rng)).detach()) for _ in range(100)]
    assert np.std(vals) < 0.05 * np.mean(vals)


def test_objective_examples():
    sc = _scene([[0, 0, 0]])
    with torch.no_grad():
        sc.textures.zero_()
    img = torch.rand(2, 4, 4, 3, dtype=D)
    pool = np.random.default_rng(0).uniform(-0.1, 0.1, (50, 3))
    with torch.no_grad():
        total, terms = objective(img, img, sc, LossWeights(), pool, alphas=torch.zeros(1, dtype=D))
    assert float(total) == pytest.approx(1.95)
    w = LossWeights(parsi=0, tv=0, over=0, perc=0)
    target = torch.zeros_like(img)
    with torch.no_grad():
        total, terms = objective(img, target, sc, w, pool)
    assert float(total) == pytest.approx(float(loss_mse(img, target)))
    assert float(terms["render"]) == float(terms["mse"])


def test_objective_finetune_drops_terms():
    sc = _scene([[0, 0, 0]])
    img = torch.rand(1, 4, 4, 3, dtype=D)
    with torch.no_grad():
        _, terms = objective(img, img * 0, sc, LossWeights(), np.zeros((5, 3)), finetune=True)
    assert float(terms["parsi"]) == 0 and float(terms["over"]) == 0
    total = float(terms["mse"]) + 0.01 * float(terms["tv"])
    assert float(terms["total"]) == pytest.approx(total)


def test_perceptual_hook():
    a = torch.rand(1, 5, 5, 3)
    assert float(perceptual_hook(a, a)) == 0
    assert float(perceptual_hook(a, 1 - a)) == 0
    register_perceptual(gradient_difference_loss)
    try:
        assert float(perceptual_hook(a, a)) == 0
        assert float(perceptual_hook(a, 1 - a)) > 0
    finally:
        register_perceptual(None)
