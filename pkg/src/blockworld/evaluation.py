"""Chamfer distance, image metrics, primitive counting and synthetic test scenes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .dataio import Dataset, look_at
from .geometry import inside_outside, scene_parts
from .scene import REPORT_THRESHOLD, SceneConfig, SceneModel, count_primitives, scene_from_blocks

SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_CAP = 99.0


class ChamferError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    source: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class EvalReport:
    chamfer: Optional[float]
    psnr: Optional[float]
    ssim: Optional[float]
    primitive_count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        def f(v, fmt):
            return "n/a" if v is None else format(v, fmt)
        return (f"chamfer\t{f(self.chamfer, '.6f')}\npsnr\t{f(self.psnr, '.3f')}\n"
                f"ssim\t{f(self.ssim, '.4f')}\nprimitives\t{self.primitive_count}")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def _triangles_area_sample(tris: np.ndarray, n: int, rng: np.random.Generator):
    a = tris[:, 1] - tris[:, 0]
    b = tris[:, 2] - tris[:, 0]
    area = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
    if area.sum() <= 0:
        raise ValueError("mesh has zero area")
    idx = rng.choice(len(tris), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w0, w1, w2 = 1 - s, s * (1 - r2), s * r2
    pts = w0[:, None] * tris[idx, 0] + w1[:, None] * tris[idx, 1] + w2[:, None] * tris[idx, 2]
    return pts, idx


def project_to_superquadric(local: np.ndarray, scale: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """Radially move block-frame points onto the surface, using psi(l*x) = l**(2/eps1) * psi(x)."""
    psi = inside_outside(local, scale, shape)
    return local * np.maximum(psi, 1e-300)[:, None] ** (-shape[0] / 2)


def sample_surface_points(mesh, n: int, seed: int = 0, include_ground: bool = False,
                          threshold: float = REPORT_THRESHOLD, exact: bool = True) -> PointCloud:
    """Area-uniform surface samples.

    ``mesh`` is a :class:`~blockworld.geometry.TriangleMesh`, an ``(F, 3, 3)``
    triangle array, or a scene (blocks with transparency above ``threshold``,
    plus the ground when ``include_ground``; the dome is never sampled).
    For scenes, ``exact`` pushes block samples from the mesh facets onto the
    analytic superquadric. ``source`` holds the block index per point (-1 for ground).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(mesh, SceneModel):
        alpha = mesh.eval_alphas()
        tris, src = [], []
        with torch.no_grad():
            for name, v, tmpl, _, blk in scene_parts(mesh):
                if name == "dome" or (name == "ground" and not include_ground):
                    continue
                if blk >= 0 and not alpha[blk] > threshold:
                    continue
                t = v.double().numpy()[tmpl.faces]
                tris.append(t)
                src.append(np.full(len(t), blk))
        if not tris:
            raise ValueError("scene has no surface to sample")
        tris = np.concatenate(tris)
        src = np.concatenate(src)
        pts, idx = _triangles_area_sample(tris, n, rng)
        src = src[idx]
        if exact:
            with torch.no_grad():
                R = mesh.block_rotations().double().numpy()
                t = mesh.block_t.double().numpy()
                sc = mesh.block_scales().double().numpy() * mesh.config.block_scale_ratio
                sh = mesh.block_shapes().double().numpy()
            for k in np.unique(src[src >= 0]):
                m = src == k
                local = project_to_superquadric((pts[m] - t[k]) @ R[k], sc[k], sh[k])
                pts[m] = local @ R[k].T + t[k]
        return PointCloud(pts, src)
    if hasattr(mesh, "faces"):
        if len(mesh.faces) == 0:
            raise ValueError("empty mesh")
        tris = np.asarray(mesh.vertices, float)[mesh.faces]
    else:
        tris = np.asarray(mesh, float).reshape(-1, 3, 3)
        if len(tris) == 0:
            raise ValueError("empty mesh")
    pts, _ = _triangles_area_sample(tris, n, rng)
    return PointCloud(pts)


def _pts(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, float).reshape(-1, 3)


def nearest_distances(query, ref) -> np.ndarray:
    return cKDTree(_pts(ref)).query(_pts(query), k=1)[0]


def chamfer_filtered(recon, gt, max_dist: float = 0.2, return_terms: bool = False):
    """Mean of accuracy (recon->gt, far recon points dropped) and completeness (gt->recon)."""
    r, g = _pts(recon), _pts(gt)
    if len(r) == 0 or len(g) == 0:
        raise ChamferError("both clouds must be non-empty")
    acc_d = nearest_distances(r, g)
    keep = acc_d <= max_dist
    if not keep.any():
        raise ChamferError("every reconstruction point was filtered out")
    acc = float(acc_d[keep].mean())
    comp = float(nearest_distances(g, r[keep]).mean())
    cd = 0.5 * (acc + comp)
    return (cd, acc, comp) if return_terms else cd


def psnr(pred, target) -> float:
    mse = float(np.mean((np.asarray(pred, float) - np.asarray(target, float)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (11x11, std 1.5) averaged over pixels and channels."""
    x = np.asarray(pred, float)
    y = np.asarray(target, float)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(x.shape[-1]):
        a, b = x[..., ch], y[..., ch]
        filt = lambda im: ndimage.gaussian_filter(im, SSIM_SIGMA, truncate=3.5, mode="reflect")
        mu_a, mu_b = filt(a), filt(b)
        saa = filt(a * a) - mu_a ** 2
        sbb = filt(b * b) - mu_b ** 2
        sab = filt(a * b) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
        pad = 5  # half window; border pixels are excluded like the usual reference implementation
        vals.append(s[pad:-pad, pad:-pad].mean() if min(s.shape) > 2 * pad else s.mean())
    return float(np.mean(vals))


# -- synthetic scenes ------------------------------------------------------------------

def _q(c):
    """Snap colors to 8-bit levels so stored images hold them exactly."""
    return tuple(float(v) for v in np.round(np.asarray(c, float) * 255) / 255)


DEFAULT_SYNTH_SPEC = {
    # Three disjoint blocks resting on the ground and filling the central unit
    # cube, where initial blocks are drawn.
    "blocks": [
        {"t": [-0.5, -0.45, -0.1], "scale": [1.8, 1.8, 1.8], "shape": [0.2, 0.2],
         "rotation_y_deg": 20, "color": [0.85, 0.2, 0.15]},
        {"t": [0.4, -0.2, 0.35], "scale": [1.2, 2.8, 1.2], "shape": [0.3, 1.0],
         "color": [0.15, 0.55, 0.9]},
        {"t": [0.3, -0.5, -0.6], "scale": [1.6, 1.6, 1.6], "shape": [1.0, 1.0],
         "color": [0.95, 0.8, 0.1]},
    ],
    "ground_y": -0.9,
    "ground_color": [0.45, 0.4, 0.35],
    "dome_color": [0.7, 0.8, 0.9],
    "cameras": {"n": 24, "radius": 3.2, "height": 1.6, "target": [0.0, -0.3, 0.0],
                "fov_deg": 45.0, "width": 128, "height_px": 128, "jitter_height": 0.5},
}


def _rot_y(deg: float) -> np.ndarray:
    a = np.radians(deg)
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])


def ring_cameras(spec: dict):
    cam = spec
    n = int(cam["n"])
    out = []
    for i in range(n):
        a = 2 * np.pi * i / n
        h = cam["height"] + cam.get("jitter_height", 0.0) * (0.5 if i % 2 else -0.5)
        eye = (cam["radius"] * np.cos(a), h, cam["radius"] * np.sin(a))
        out.append(look_at(eye, cam["target"], int(cam["width"]), int(cam["height_px"]),
                           cam["fov_deg"]))
    return out


def _validate_spec(spec: dict) -> None:
    if "blocks" not in spec or "cameras" not in spec:
        raise ValueError("synthetic spec needs 'blocks' and 'cameras'")
    for i, b in enumerate(spec["blocks"]):
        if "t" not in b or "scale" not in b:
            raise ValueError(f"block {i}: needs 't' and 'scale'")
        if np.any(np.asarray(b["scale"], float) < 0.2):
            raise ValueError(f"block {i}: scale below the 0.2 minimum")
        e = np.asarray(b.get("shape", (1, 1)), float)
        if np.any(e < 0.1) or np.any(e > 1.9):
            raise ValueError(f"block {i}: shape exponents must be in [0.1, 1.9]")
    if int(spec["cameras"]["n"]) < 2:
        raise ValueError("need at least 2 cameras")


def build_synthetic_scene(spec: dict, dtype=torch.float32) -> SceneModel:
    blocks = []
    for b in spec["blocks"]:
        rot = np.asarray(b["rotation"], float) if "rotation" in b else _rot_y(b.get("rotation_y_deg", 0.0))
        blocks.append({"t": b["t"], "scale": b["scale"], "shape": b.get("shape", (1, 1)),
                       "rotation": rot, "color": _q(b.get("color", (0.5, 0.5, 0.5))), "alpha": 1.0})
    scene = scene_from_blocks(blocks, SceneConfig(), texture_size=8,
                              dome_color=_q(spec.get("dome_color", (0.7, 0.8, 0.9))),
                              ground_color=_q(spec.get("ground_color", (0.45, 0.4, 0.35))),
                              ground_position=(0.0, spec.get("ground_y", -0.9), 0.0), dtype=dtype)
    scene.binarized = True
    return scene


def generate_synthetic_scene(spec: Optional[dict] = None, seed: int = 0, n_points: int = 10000,
                             sigma: float = 1e-7):
    """Ground-truth scene, its rendered views (near-hard, opaque) and a GT surface cloud."""
    from .renderer import RenderSettings, render_views

    spec = spec or DEFAULT_SYNTH_SPEC
    _validate_spec(spec)
    scene = build_synthetic_scene(spec)
    cams = ring_cameras(spec["cameras"])
    images = []
    settings = RenderSettings(sigma=sigma)
    with torch.no_grad():
        for i in range(0, len(cams), 4):
            for o in render_views(scene, cams[i:i + 4], settings):
                images.append(o.image.double().numpy().astype(np.float32))
    ds = Dataset(images, cams, {"scene_scale": 1.0})
    cloud = sample_surface_points(scene, n_points, seed=seed)
    return scene, ds, cloud


def evaluate(scene: SceneModel, gt_points=None, dataset: Optional[Dataset] = None,
             max_dist: Optional[float] = None, n_points: int = 10000, seed: int = 0,
             sigma: float = 1e-7, include_ground: bool = False):
    """Full report; returns ``(EvalReport, renders or None)``."""
    from .renderer import RenderSettings, render_views

    cd = None
    if gt_points is not None:
        max_dist = 0.2 * scene.config.scene_scale if max_dist is None else max_dist
        try:
            recon = sample_surface_points(scene, n_points, seed=seed, include_ground=include_ground)
            cd = chamfer_filtered(recon, gt_points, max_dist)
        except (ValueError, ChamferError):
            cd = None
    p = s = None
    renders = None
    if dataset is not None:
        renders = []
        with torch.no_grad():
            for i in range(0, len(dataset), 4):
                renders += [o.image.double().numpy() for o in
                            render_views(scene, dataset.cameras[i:i + 4], RenderSettings(sigma=sigma))]
        p = float(np.mean([psnr(r, t) for r, t in zip(renders, dataset.images)]))
        s = float(np.mean([ssim(r, t) for r, t in zip(renders, dataset.images)]))
    return EvalReport(cd, p, s, count_primitives(scene)), renders
