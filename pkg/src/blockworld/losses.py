"""Training objective: rendering loss plus parsimony, texture TV and overlap terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
import torch

from .geometry import log_inside_outside


@dataclass
class LossWeights:
    parsi: float = 0.01
    tv: float = 0.1
    over: float = 1.0
    perc: float = 0.1
    overlap_cap: float = 1.95
    tau: float = 0.005
    n_samples: int = 1000

    def __post_init__(self):
        for name in ("parsi", "tv", "over", "perc", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.overlap_cap < 1:
            raise ValueError("overlap cap must be >= 1")
        if self.n_samples < 1:
            raise ValueError("need at least one overlap sample")


# -- perceptual extension point -----------------------------------------------
_perceptual: Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = None


def register_perceptual(fn: Optional[Callable]) -> None:
    """Install an image-dissimilarity ``fn(pred, target) -> scalar`` (``None`` to reset)."""
    global _perceptual
    _perceptual = fn


def perceptual_hook(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if _perceptual is None:
        return pred.new_zeros(())
    return _perceptual(pred, target)


def gradient_difference_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared difference of image gradients; a cheap stand-in perceptual term."""
    def grads(x):
        return x[..., 1:, :, :] - x[..., :-1, :, :], x[..., :, 1:, :] - x[..., :, :-1, :]
    (py, px), (ty, tx) = grads(pred), grads(target)
    return ((py - ty) ** 2).mean() + ((px - tx) ** 2).mean()


# -- image / texture terms -------------------------------------------------------

def loss_mse(pred, target):
    if isinstance(pred, torch.Tensor):
        return ((pred - torch.as_tensor(target, dtype=pred.dtype)) ** 2).mean()
    return float(np.mean((np.asarray(pred, float) - np.asarray(target, float)) ** 2))


def loss_tv(tex):
    """Texture total variation for ``(..., U, V, 3)``; neighbours past the border are dropped."""
    t = tex if isinstance(tex, torch.Tensor) else torch.as_tensor(np.asarray(tex, float))
    U, V = t.shape[-3], t.shape[-2]
    du = ((t[..., 1:, :, :] - t[..., :-1, :, :]) ** 2).sum(dim=(-3, -2, -1))
    dv = ((t[..., :, 1:, :] - t[..., :, :-1, :]) ** 2).sum(dim=(-3, -2, -1))
    out = (du + dv) / (U * V)
    return out if isinstance(tex, torch.Tensor) else out.numpy()


def total_tv(scene) -> torch.Tensor:
    """TV summed over background, ground and live block textures."""
    rgb = torch.sigmoid(scene.textures)
    keep = np.concatenate([[True, True], scene.alive])
    per = loss_tv(rgb)
    return per[torch.as_tensor(keep)].sum()


def loss_parsimony(alpha, K: Optional[int] = None):
    """``sum(sqrt(alpha)) / K``."""
    if isinstance(alpha, torch.Tensor):
        K = K or alpha.numel()
        return torch.sqrt(alpha).sum() / K if alpha.numel() else alpha.new_zeros(())
    a = np.asarray(alpha, float)
    K = K or a.size
    return float(np.sqrt(a).sum() / K) if a.size else 0.0


def scene_parsimony(scene, alphas: torch.Tensor) -> torch.Tensor:
    alive = torch.as_tensor(scene.alive)
    return loss_parsimony(alphas[alive], scene.K)


# -- 3D overlap ------------------------------------------------------------------

def _to_block_frames(scene, x: torch.Tensor, ks) -> torch.Tensor:
    R = scene.block_rotations()[ks]
    t = scene.block_t[ks]
    rel = x[None, :, :] - t[:, None, :]
    return torch.einsum("kji,kmj->kmi", R, rel) / scene.config.block_scale_ratio


def occupancy_3d(x, scene, k: Optional[int] = None, alphas: Optional[torch.Tensor] = None,
                 tau: float = 0.005):
    """Soft occupancy ``alpha_k * sigmoid((1 - psi_k(x)) / tau)``.

    ``x`` is ``(M, 3)`` world points; returns ``(M,)`` for block ``k`` or
    ``(K_alive, M)`` for all live blocks when ``k`` is None.
    """
    x = torch.as_tensor(x, dtype=scene.dtype)
    alphas = scene.alphas() if alphas is None else alphas
    ks = [k] if k is not None else list(np.nonzero(scene.alive)[0])
    if not ks:
        return torch.zeros(0, x.shape[0], dtype=scene.dtype)
    local = _to_block_frames(scene, x, ks)
    scales = scene.block_scales()[ks][:, None, :]
    shapes = scene.block_shapes()[ks][:, None, :]
    logpsi = torch.clamp(log_inside_outside(local, scales, shapes), max=40.0)
    occ = alphas[ks][:, None] * torch.sigmoid((1.0 - torch.exp(logpsi)) / tau)
    return occ[0] if k is not None else occ


def block_boxes(scene, inflate: float = 1.1) -> np.ndarray:
    """World-space axis-aligned boxes ``(K_alive, 2, 3)`` of live blocks, inflated about their centres."""
    with torch.no_grad():
        ks = np.nonzero(scene.alive)[0]
        if len(ks) == 0:
            return np.zeros((0, 2, 3))
        R = scene.block_rotations()[ks].double().numpy()
        half = (scene.block_scales()[ks].double().numpy() * scene.config.block_scale_ratio)
        t = scene.block_t[ks].double().numpy()
    ext = np.einsum("kij,kj->ki", np.abs(R), half) * inflate
    return np.stack([t - ext, t + ext], axis=1)


def sample_pool(scene, M: int, rng: np.random.Generator) -> np.ndarray:
    """``M`` points uniform over the union of the inflated live-block boxes."""
    boxes = block_boxes(scene)
    if len(boxes) == 0:
        return np.zeros((0, 3))
    size = boxes[:, 1] - boxes[:, 0]
    vol = np.prod(size, axis=1)
    prob = vol / vol.sum()
    out = []
    n = 0
    while n < M:
        k = rng.choice(len(boxes), size=2 * M, p=prob)
        pts = boxes[k, 0] + rng.random((2 * M, 3)) * size[k]
        inside = ((pts[:, None, :] >= boxes[None, :, 0]) & (pts[:, None, :] <= boxes[None, :, 1])).all(-1)
        keep = rng.random(2 * M) < 1.0 / inside.sum(1)
        out.append(pts[keep])
        n += int(keep.sum())
    return np.concatenate(out)[:M]


def loss_overlap(scene, pool, alphas: Optional[torch.Tensor] = None, cap: float = 1.95,
                 tau: float = 0.005) -> torch.Tensor:
    """Mean over samples of ``max(sum_k O_k(x), cap)``."""
    pool = torch.as_tensor(np.asarray(pool), dtype=scene.dtype)
    if pool.shape[0] == 0:
        return torch.tensor(cap, dtype=scene.dtype)
    occ = occupancy_3d(pool, scene, alphas=alphas, tau=tau)
    total = occ.sum(0) if occ.shape[0] else torch.zeros(pool.shape[0], dtype=scene.dtype)
    return torch.clamp(total, min=cap).mean()


def objective(pred, target, scene, weights: LossWeights, pool=None,
              alphas: Optional[torch.Tensor] = None, finetune: bool = False):
    """Total training loss and its terms.

    In finetune mode the transparency terms are dropped and the TV and
    perceptual weights are divided by 10.
    """
    alphas = scene.alphas() if alphas is None else alphas
    target = torch.as_tensor(target, dtype=pred.dtype)
    terms: Dict[str, torch.Tensor] = {}
    terms["mse"] = loss_mse(pred, target)
    div = 10.0 if finetune else 1.0
    zero = pred.new_zeros(())
    terms["perc"] = perceptual_hook(pred, target) if weights.perc > 0 else zero
    terms["render"] = terms["mse"] + weights.perc / div * terms["perc"]
    terms["tv"] = total_tv(scene) if weights.tv > 0 else zero
    if finetune:
        terms["parsi"] = zero
        terms["over"] = zero
    else:
        terms["parsi"] = scene_parsimony(scene, alphas) if weights.parsi > 0 else zero
        if weights.over > 0 and pool is not None:
            terms["over"] = loss_overlap(scene, pool, alphas, weights.overlap_cap, weights.tau)
        else:
            terms["over"] = zero
    w_parsi = 0.0 if finetune else weights.parsi
    w_over = 0.0 if finetune else weights.over
    terms["total"] = (terms["render"] + w_parsi * terms["parsi"] + weights.tv / div * terms["tv"]
                      + w_over * terms["over"])
    return terms["total"], terms
