"""Adam and the three-stage training schedule (curriculum, full resolution, binarized finetune)."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .core import NonFiniteError, all_finite, backward
from .losses import LossWeights, loss_mse, objective, sample_pool
from .renderer import LAYERS, SIGMA_FINETUNE, SIGMA_TRAIN, THRESHOLD, RenderSettings, render_views
from .scene import (KILL_THRESHOLD, SceneConfig, SceneModel, binarize_transparencies, init_scene,
                    kill_dead_blocks, save_checkpoint)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iter", "stage", "mse", "perc", "parsi", "tv", "over", "total", "n_alive")


@dataclass
class AdamState:
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _adam_update(p, g, m, v, rate, b1, b2, c1, c2, eps):
    m.mul_(b1).add_(g, alpha=1 - b1)
    v.mul_(b2).addcmul_(g, g, value=1 - b2)
    denom = (v / c2).sqrt_().add_(eps)
    p.addcdiv_(m, denom, value=-rate / c1)


def adam_step(params: Dict[str, torch.Tensor], grads, state: AdamState, lr,
              masks: Optional[Dict[str, torch.Tensor]] = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``lr`` is a float or a per-name mapping; ``masks`` (broadcastable 0/1
    tensors) freeze entries, which then keep both value and moments.
    """
    for name, g in grads.items():
        if not all_finite(g):
            raise NonFiniteError(name, f"non-finite gradient for {name!r}; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            rate = lr[name] if isinstance(lr, dict) else lr
            if rate == 0:
                continue
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            keep = None if masks is None or name not in masks else masks[name]
            if keep is None or bool((keep != 0).all()):
                _adam_update(p, g, m, v, rate, b1, b2, c1, c2, state.eps)
            elif keep.dim() == p.dim() and all(n == 1 for n in keep.shape[1:]):
                # Row mask: update the live rows only.
                rows = torch.nonzero(keep.reshape(-1) != 0).reshape(-1)
                if len(rows):
                    pr, mr, vr = p[rows], m[rows], v[rows]
                    _adam_update(pr, g[rows], mr, vr, rate, b1, b2, c1, c2, state.eps)
                    p[rows], m[rows], v[rows] = pr, mr, vr
            else:
                keep = keep.to(p.dtype)
                new_m = b1 * m + (1 - b1) * g
                new_v = b2 * v + (1 - b2) * g * g
                upd = rate * (new_m / c1) / (torch.sqrt(new_v / c2) + state.eps)
                m.copy_(keep * new_m + (1 - keep) * m)
                v.copy_(keep * new_v + (1 - keep) * v)
                p.sub_(upd * keep)
    return state


@dataclass
class Schedule:
    iters: int = 25000
    curriculum_end: int = 10000
    full_end: int = 20000
    lr_texture: float = 0.05
    lr_other: float = 0.005
    decay_window: int = 2000
    batch_size: int = 4
    texture_downscale: int = 8
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not 0 <= self.curriculum_end <= self.full_end <= self.iters:
            raise ValueError("stage boundaries must be increasing")
        if self.lr_texture <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def scaled(cls, iters: int, **kw) -> "Schedule":
        """The default 10k/10k/5k split and 2k decay window, scaled to ``iters`` total."""
        f = iters / 25000
        return cls(iters=iters, curriculum_end=round(10000 * f), full_end=round(20000 * f),
                   decay_window=round(2000 * f), checkpoint_every=max(1, round(1000 * f)), **kw)

    def stage(self, it: int) -> int:
        if it < self.curriculum_end:
            return 1
        return 2 if it < self.full_end else 3

    def learning_rates(self, it: int) -> Dict[str, float]:
        f = 0.1 if self.full_end - self.decay_window <= it < self.full_end else 1.0
        other = self.lr_other * f
        return {"textures": self.lr_texture * f, "block_r": other, "block_t": other,
                "block_scale": other, "block_shape": other, "block_alpha": other,
                "ground_r": other, "ground_t": other}


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=Schedule)
    sigma: float = SIGMA_TRAIN
    sigma_finetune: float = SIGMA_FINETUNE
    alpha_noise: float = 0.5
    kill_threshold: float = KILL_THRESHOLD
    layers: int = LAYERS
    threshold: float = THRESHOLD
    k_max: int = 10

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    scene: SceneModel
    metrics: List[dict]
    render_loss: float
    seed: int = 0


def _block_masks(scene: SceneModel, finetune: bool) -> Dict[str, torch.Tensor]:
    alive = torch.as_tensor(scene.alive, dtype=scene.dtype)
    tex = torch.cat([torch.ones(2, dtype=scene.dtype), alive])
    masks = {n: alive[:, None] for n in ("block_r", "block_t", "block_scale", "block_shape")}
    masks["block_alpha"] = torch.zeros_like(alive) if finetune else alive
    masks["textures"] = tex[:, None, None, None]
    return masks


def dataset_render_loss(scene: SceneModel, dataset, sigma: float, layers: int = LAYERS,
                        batch: int = 4) -> float:
    """Eval-mode MSE over every view of ``dataset``."""
    settings = RenderSettings(sigma=sigma, layers=layers)
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(dataset), batch):
            outs = render_views(scene, dataset.cameras[i:i + batch], settings)
            for o, img in zip(outs, dataset.images[i:i + batch]):
                total += float(loss_mse(o.image.double(), torch.as_tensor(img, dtype=torch.float64)))
    return total / len(dataset)


def write_metrics(path, metrics: List[dict]) -> None:
    lines = ["\t".join(METRIC_FIELDS)]
    for m in metrics:
        lines.append("\t".join(_fmt(m[k]) for k in METRIC_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path) -> List[dict]:
    rows = Path(path).read_text().splitlines()
    head = rows[0].split("\t")
    out = []
    for r in rows[1:]:
        vals = r.split("\t")
        out.append({k: (int(v) if k in ("iter", "stage", "n_alive") else float(v))
                    for k, v in zip(head, vals)})
    return out


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def train(dataset, scene: SceneModel, config: TrainConfig, seed: int = 0,
          out_dir=None, callback: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Optimize ``scene`` in place against ``dataset``.

    Stage 1 renders with textures average-pooled by ``texture_downscale``;
    stage 2 uses full textures; at the finetune boundary transparencies are
    binarized and frozen, the transparency losses dropped and sigma lowered.
    Transparency noise and block killing are active in stages 1 and 2.
    """
    sched, weights = config.schedule, config.weights
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    state = AdamState()
    metrics: List[dict] = []
    order: List[int] = []
    n_views = len(dataset)
    targets = [torch.as_tensor(im, dtype=scene.dtype) for im in dataset.images]
    params = scene.parameters()

    def checkpoint(name: str, it: int) -> None:
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoints" / f"{name}.ckpt", scene, rng,
                            extra={"iter": it, "seed": seed})

    for it in range(sched.iters):
        stage = sched.stage(it)
        finetune = stage == 3
        if finetune and not scene.binarized:
            checkpoint(f"stage2_end_{it:06d}", it)
            binarize_transparencies(scene)
        elif it > 0 and it == sched.curriculum_end:
            checkpoint(f"stage1_end_{it:06d}", it)
        if len(order) < sched.batch_size:
            order += rng.permutation(n_views).tolist()
        batch, order = order[:sched.batch_size], order[sched.batch_size:]
        settings = RenderSettings(sigma=config.sigma_finetune if finetune else config.sigma,
                                  layers=config.layers, threshold=config.threshold,
                                  texture_downscale=sched.texture_downscale if stage == 1 else 1)
        noise = 0.0 if finetune else config.alpha_noise
        alphas = scene.alphas(noise, training=True, rng=rng)
        outs = render_views(scene, [dataset.cameras[i] for i in batch], settings, alphas=alphas)
        pred = torch.stack([o.image for o in outs])
        target = torch.stack([targets[i] for i in batch])
        pool = None
        if not finetune and weights.over > 0:
            pool = sample_pool(scene, weights.n_samples, rng)
        total, terms = objective(pred, target, scene, weights, pool, alphas, finetune)
        grads = backward(total, params)
        adam_step(params, grads, state, sched.learning_rates(it), _block_masks(scene, finetune))
        if not finetune:
            kill_dead_blocks(scene, config.kill_threshold)
        row = {"iter": it, "stage": stage, "n_alive": scene.n_alive}
        row.update({k: float(torch.as_tensor(terms[k]).detach()) for k in ("mse", "perc", "parsi", "tv", "over", "total")})
        metrics.append(row)
        if callback is not None:
            callback(it, row)
        if (it + 1) % sched.checkpoint_every == 0:
            checkpoint(f"iter_{it + 1:06d}", it + 1)
        if it % 500 == 0:
            log.info("seed %d iter %d stage %d total %.5f mse %.5f alive %d", seed, it, stage,
                     row["total"], row["mse"], row["n_alive"])
    if sched.iters == sched.full_end and not scene.binarized:
        binarize_transparencies(scene)
    final_sigma = config.sigma_finetune if scene.binarized else config.sigma
    render_loss = dataset_render_loss(scene, dataset, final_sigma, config.layers)
    if out_dir is not None:
        checkpoint("final", sched.iters)
        write_metrics(out_dir / "metrics.tsv", metrics)
    return TrainResult(scene, metrics, render_loss, seed)


def multi_run_select(dataset, config: TrainConfig, n_runs: int = 5, seed: int = 0,
                     scene_config: Optional[SceneConfig] = None, out_dir=None,
                     dtype=torch.float32) -> tuple:
    """Train ``n_runs`` seeds (``seed + i``) and keep the lowest final rendering loss.

    Returns ``(best, all_results)``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    scene_config = scene_config or SceneConfig(scene_scale=dataset.scene_scale)
    results = []
    for i in range(n_runs):
        s = seed + i
        scene = init_scene(s, config.k_max, scene_config, dtype)
        run_dir = Path(out_dir) / f"run_{i:02d}" if out_dir is not None else None
        results.append(train(dataset, scene, config, s, run_dir))
        log.info("run %d (seed %d): render loss %.6f, #P %d", i, s, results[-1].render_loss,
                 int((results[-1].scene.eval_alphas() > 0.5).sum()))
    best = min(results, key=lambda r: r.render_loss)
    return best, results
