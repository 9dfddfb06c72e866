"""Soft rasterization of transparent textured faces and front-to-back compositing.

Occupancy of face j at pixel u is ``alpha_j * exp(min(delta / sigma, 0))`` where
``delta`` is the signed squared Euclidean distance from u to the projected face
in normalized device coordinates (the shorter image side spans [-1, 1]).
Fragments above a small threshold are depth-sorted, truncated to ``L`` layers
and alpha-composited.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import _raster
from .dataio import NEAR_EPS, Camera
from .geometry import SceneMesh, assemble_scene_mesh

LAYERS = 16
THRESHOLD = 1e-4
SIGMA_TRAIN = 1e-4
SIGMA_FINETUNE = 5e-6


@dataclass
class RenderSettings:
    sigma: float = SIGMA_TRAIN
    layers: int = LAYERS
    threshold: float = THRESHOLD
    texture_downscale: int = 1


@dataclass
class FragmentStack:
    """Per-pixel fragments sorted by increasing depth, ``(..., L)`` with face -1 for empty slots."""

    face: np.ndarray
    depth: np.ndarray
    occupancy: torch.Tensor
    color: torch.Tensor

    @property
    def count(self) -> np.ndarray:
        return (self.face >= 0).sum(-1)

    def signature(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.face).tobytes()).hexdigest()


class DepthOrder:
    """Per-pixel face order of one or more stacks, compared up to fragments entering or leaving.

    Two orders are equal when every pixel lists the faces the two share in the
    same relative order; that is, no perturbation reordered the depth sort.
    With ``face_source`` (e.g. the block of each face) only the order of the
    sources is compared, so swaps between faces of one flat-colored source,
    which cannot change the composite, are not counted; a source entering or
    leaving a full stack (truncation pushing it out) does count.
    """

    def __init__(self, stacks: Sequence[FragmentStack], face_source: Optional[np.ndarray] = None):
        self.faces = [np.asarray(s.face).reshape(-1, np.asarray(s.face).shape[-1]) for s in stacks]
        self.source = None if face_source is None else np.asarray(face_source)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DepthOrder) or len(self.faces) != len(other.faces):
            return NotImplemented
        for a, b in zip(self.faces, other.faces):
            if a.shape[0] != b.shape[0]:
                return False
            L = max(a.shape[1], b.shape[1])
            a = np.pad(a, ((0, 0), (0, L - a.shape[1])), constant_values=-1)
            b = np.pad(b, ((0, 0), (0, L - b.shape[1])), constant_values=-1)
            for p in np.nonzero((a != b).any(1))[0]:
                fa, fb = a[p][a[p] >= 0], b[p][b[p] >= 0]
                if self.source is not None and not np.array_equal(
                        np.unique(self.source[fa]), np.unique(self.source[fb])):
                    return False
                fa, fb = fa[np.isin(fa, fb)], fb[np.isin(fb, fa)]
                if self.source is not None:
                    fa, fb = self.source[fa], self.source[fb]
                if not np.array_equal(fa, fb):
                    return False
        return True


@dataclass
class RenderOutput:
    image: torch.Tensor
    opacity: torch.Tensor
    fragments: FragmentStack

    def signature(self) -> str:
        return self.fragments.signature()


def soft_occupancy(delta, alpha, sigma: float):
    """``alpha * exp(min(delta / sigma, 0))``; ``delta >= 0`` inside the face."""
    if isinstance(delta, torch.Tensor):
        return alpha * torch.exp(torch.clamp(delta / sigma, max=0.0))
    return alpha * np.exp(np.minimum(np.asarray(delta, float) / sigma, 0.0))


def compositing_weights(occupancy):
    """Layer weights ``O_l * prod_{p<l} (1 - O_p)`` along the last axis."""
    if isinstance(occupancy, torch.Tensor):
        trans = torch.cumprod(1.0 - occupancy, dim=-1)
        trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
        return occupancy * trans
    o = np.asarray(occupancy, float)
    trans = np.cumprod(1.0 - o, axis=-1)
    trans = np.concatenate([np.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    return o * trans


def alpha_composite(occupancy, color):
    """Blend depth-sorted layers; returns ``(rgb, accumulated opacity)``.

    Whatever weight is left after the last layer multiplies black.
    """
    w = compositing_weights(occupancy)
    if isinstance(w, torch.Tensor):
        return (w[..., None] * color).sum(-2), w.sum(-1)
    return (w[..., None] * np.asarray(color, float)).sum(-2), w.sum(-1)


def ndc_factor(camera: Camera) -> float:
    """Squared pixel-to-NDC scale."""
    return (2.0 / min(camera.width, camera.height)) ** 2


def project_vertices(vertices: torch.Tensor, camera: Camera):
    R = torch.as_tensor(camera.R, dtype=vertices.dtype)
    t = torch.as_tensor(camera.t, dtype=vertices.dtype)
    xc = vertices @ R.T + t
    z = xc[:, 2]
    zs = torch.where(z > NEAR_EPS, z, torch.ones_like(z))
    px = torch.stack([camera.fx * xc[:, 0] / zs + camera.cx,
                      camera.fy * xc[:, 1] / zs + camera.cy], dim=-1)
    return px, z


def sample_texture(tex: torch.Tensor, slot: torch.Tensor, uv: torch.Tensor, pad: torch.Tensor):
    """Bilinear lookup in stacked textures ``(T, H, W, 3)``.

    ``pad > 0`` marks a horizontally padded atlas whose padding is a circular
    copy of the texture, so columns wrap; otherwise coordinates clamp.
    """
    T, H, W, _ = tex.shape
    u = uv[:, 0] * (1 + 2 * pad) - pad
    x = u * W - 0.5
    y = uv[:, 1] * H - 0.5
    x0f = torch.floor(x.detach())
    y0f = torch.floor(y.detach())
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    wrap = pad > 0
    cols = []
    for xi in (x0, x0 + 1):
        cols.append(torch.where(wrap, torch.remainder(xi, W), xi.clamp(0, W - 1)))
    rows = [y0.clamp(0, H - 1), (y0 + 1).clamp(0, H - 1)]
    base = slot * (H * W)
    idx = torch.stack([base + rows[0] * W + cols[0], base + rows[0] * W + cols[1],
                       base + rows[1] * W + cols[0], base + rows[1] * W + cols[1]], 1)
    taps = tex.reshape(-1, 3).index_select(0, idx.reshape(-1)).reshape(-1, 4, 3)
    w = torch.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], 1)
    return (taps * w[:, :, None]).sum(1)


def _fragment_values(px, z, _unused, pix, inside_hint, W, ndc2, sigma, alpha, uv, slot, pad, tex):
    """Differentiable occupancy and color for kept fragments.

    ``px`` (N, 3, 2) and ``z`` (N, 3) are the projected corners of each
    fragment's face, ``pix`` its flat pixel index. ``inside_hint`` comes from
    the compiled search; only the other fragments need edge distances.
    """
    dtype = px.dtype
    p = torch.stack([torch.as_tensor(pix % W, dtype=dtype),
                     torch.as_tensor(pix // W, dtype=dtype)], -1)
    a, b, c = px[:, 0], px[:, 1], px[:, 2]

    def cross(u, w):
        return u[..., 0] * w[..., 1] - u[..., 1] * w[..., 0]

    area = cross(b - a, c - a)
    w0 = cross(c - b, p - b) / area
    w1 = cross(a - c, p - c) / area
    bary = torch.stack([w0, w1, 1.0 - w0 - w1], -1)
    dist2 = torch.zeros_like(w0)
    out = np.nonzero(~inside_hint)[0]
    if len(out):
        oi = torch.as_tensor(out)
        po, ao, bo, co = p[oi], a[oi], b[oi], c[oi]
        starts = torch.stack([ao, bo, co], 1)
        edges = torch.stack([bo - ao, co - bo, ao - co], 1)
        rel = po[:, None, :] - starts
        t = ((rel * edges).sum(-1) / ((edges * edges).sum(-1) + 1e-30)).clamp(0.0, 1.0)
        d = rel - t[..., None] * edges
        d2 = (d * d).sum(-1)
        best = torch.argmin(d2.detach(), dim=-1)
        tb = t.gather(1, best[:, None])[:, 0]
        zero = torch.zeros_like(tb)
        eb = torch.stack([
            torch.stack([1 - tb, tb, zero], -1),
            torch.stack([zero, 1 - tb, tb], -1),
            torch.stack([tb, zero, 1 - tb], -1)], 1)
        eb = eb[torch.arange(len(tb)), best]
        bary = bary.index_put((oi,), eb)
        dist2 = dist2.index_put((oi,), d2.gather(1, best[:, None])[:, 0])
    occ = soft_occupancy(-dist2 * ndc2, alpha, sigma)
    q = bary / z
    bp = q / q.sum(-1, keepdim=True)
    uvp = (bp[:, :, None] * uv).sum(1)
    color = sample_texture(tex, slot, uvp, pad)
    return occ, color


def face_alphas(mesh: SceneMesh, block_alpha: torch.Tensor) -> torch.Tensor:
    fb = torch.as_tensor(mesh.face_block)
    ones = torch.ones(len(fb), dtype=block_alpha.dtype)
    if block_alpha.numel() == 0:
        return ones
    return torch.where(fb >= 0, block_alpha[fb.clamp(min=0)], ones)


def _composite_sparse(occ, color, gpix, lay, n_pix):
    """Front-to-back compositing over fragments given as flat arrays.

    Walks the layers in order, carrying each pixel's transmittance to the
    (shrinking) set of pixels that still have a deeper fragment.
    """
    order = np.lexsort((gpix, lay))
    gpix_s, lay_s = gpix[order], lay[order]
    order_t = torch.as_tensor(order)
    occ_s, col_s = occ[order_t], color[order_t]
    bounds = np.searchsorted(lay_s, np.arange(lay_s.max() + 2 if len(lay_s) else 1))
    weights = []
    trans = None
    prev_pix = None
    for l in range(len(bounds) - 1):
        lo, hi = bounds[l], bounds[l + 1]
        if lo == hi:
            break
        o = occ_s[lo:hi]
        if trans is None:
            t_l = torch.ones_like(o)
        else:
            pos = torch.as_tensor(np.searchsorted(prev_pix, gpix_s[lo:hi]))
            t_l = trans[pos]
        weights.append(t_l * o)
        trans = t_l * (1.0 - o)
        prev_pix = gpix_s[lo:hi]
    w = torch.cat(weights)
    idx = torch.as_tensor(gpix_s)
    rgb = torch.zeros(n_pix, 3, dtype=occ.dtype).index_add(0, idx, w[:, None] * col_s)
    acc = torch.zeros(n_pix, dtype=occ.dtype).index_add(0, idx, w)
    return rgb, acc


class _ShadeComposite(torch.autograd.Function):
    """Compiled shading + compositing with hand-written adjoints.

    Inputs are projected vertices per view, per-face transparencies and the
    realized textures; ``ctx_data`` carries the fragment lists and mesh arrays.
    """

    @staticmethod
    def forward(ctx, px_all, z_all, face_alpha, tex, ctx_data):
        mesh, per_view, H, W, ndc2, sigma = ctx_data
        nv = len(per_view)
        pxn = px_all.detach().double().numpy()
        zn = z_all.detach().double().numpy()
        fa = face_alpha.detach().double().numpy()
        # Textures keep their dtype (the kernels compile per dtype); no copy.
        tx = np.ascontiguousarray(tex.detach().numpy())
        rgb = np.zeros((nv, H * W, 3))
        acc = np.zeros((nv, H * W))
        saved = []
        for v, (face, inside) in enumerate(per_view):
            L = face.shape[1]
            occ = np.zeros((H * W, L))
            col = np.zeros((H * W, L, 3))
            _raster.shade_kernel(face, inside, pxn[v], zn[v], mesh.faces, mesh.face_uv,
                                 mesh.face_texture, mesh.face_pad, fa, tx, W, ndc2, sigma,
                                 occ, col, rgb[v], acc[v])
            saved.append((occ, col))
        ctx.data = (ctx_data, pxn, zn, fa, tx, saved)
        ctx.dtypes = (px_all.dtype, z_all.dtype, face_alpha.dtype, tex.dtype)
        dtype = px_all.dtype
        return (torch.as_tensor(rgb.reshape(nv, H, W, 3), dtype=dtype),
                torch.as_tensor(acc.reshape(nv, H, W), dtype=dtype))

    @staticmethod
    def backward(ctx, g_rgb, g_acc):
        (mesh, per_view, H, W, ndc2, sigma), pxn, zn, fa, tx, saved = ctx.data
        nv = len(per_view)
        g_rgb = g_rgb.detach().double().reshape(nv, H * W, 3).numpy()
        g_acc = g_acc.detach().double().reshape(nv, H * W).numpy()
        d_px = np.zeros_like(pxn)
        d_z = np.zeros_like(zn)
        d_alpha = np.zeros_like(fa)
        d_tex = np.zeros_like(tx)
        for v, (face, inside) in enumerate(per_view):
            occ, col = saved[v]
            _raster.shade_backward_kernel(face, inside, pxn[v], zn[v], mesh.faces, mesh.face_uv,
                                          mesh.face_texture, mesh.face_pad, fa, tx, W, ndc2, sigma,
                                          occ, col, g_rgb[v], g_acc[v], d_px[v], d_z[v],
                                          d_alpha, d_tex)
        dt = ctx.dtypes
        return (torch.as_tensor(d_px, dtype=dt[0]), torch.as_tensor(d_z, dtype=dt[1]),
                torch.as_tensor(d_alpha, dtype=dt[2]), torch.from_numpy(d_tex), None)


def _rasterize(mesh: SceneMesh, cameras: Sequence[Camera], face_alpha: torch.Tensor,
               textures: torch.Tensor, sigma: float, layers: int, threshold: float,
               cull_opaque: bool = True, dense: bool = True, backend: str = "compiled"):
    """Fragments for several same-sized views in one differentiable pass.

    Returns dense :class:`FragmentStack` objects, or with ``dense=False`` the
    composited ``(rgb, opacity)`` tensors plus fragment-only stacks.
    """
    dtype = mesh.vertices.dtype
    H, W = cameras[0].height, cameras[0].width
    if any((c.height, c.width) != (H, W) for c in cameras):
        raise ValueError("all cameras in a batch must share a resolution")
    ndc2 = ndc_factor(cameras[0])
    fa_np = face_alpha.detach().numpy()
    faces_t = torch.as_tensor(mesh.faces)
    per_view, px_all, z_all = [], [], []
    for cam in cameras:
        px, z = project_vertices(mesh.vertices, cam)
        px_all.append(px)
        z_all.append(z)
        if mesh.n_faces:
            fz = z.detach().numpy()[mesh.faces]
            fpx = px.detach().numpy()[mesh.faces]
            valid = (fz > NEAR_EPS).all(1)
            face, depth, inside = _raster.gather(fpx, fz, valid, fa_np, H, W, ndc2, sigma,
                                                 threshold, layers, cull_opaque)
        else:
            face = np.full((H * W, layers), -1, dtype=np.int64)
            depth = np.full((H * W, layers), np.inf)
            inside = np.zeros((H * W, layers), dtype=bool)
        per_view.append((face, depth, inside))
    Lm = max(1, max(int((f >= 0).sum(1).max()) for f, _, _ in per_view))
    nv = len(cameras)
    if not dense and backend == "compiled":
        stacks = [FragmentStack(f[:, :Lm].reshape(H, W, Lm), d[:, :Lm].reshape(H, W, Lm), None, None)
                  for f, d, _ in per_view]
        frags = [(np.ascontiguousarray(f[:, :Lm]), np.ascontiguousarray(i[:, :Lm]))
                 for f, _, i in per_view]
        rgb, acc = _ShadeComposite.apply(torch.stack(px_all), torch.stack(z_all), face_alpha,
                                         textures, (mesh, frags, H, W, ndc2, sigma))
        return (rgb, acc), stacks
    views, pixs, lays, pfs, ins = [], [], [], [], []
    for v, (face, _, inside) in enumerate(per_view):
        pix, lay = np.nonzero(face[:, :Lm] >= 0)
        views.append(np.full(len(pix), v))
        pixs.append(pix)
        lays.append(lay)
        pfs.append(face[pix, lay])
        ins.append(inside[pix, lay])
    view, pix, lay, pf, inside = (np.concatenate(x) for x in (views, pixs, lays, pfs, ins))
    occ = color = None
    if len(pf):
        nvert = mesh.vertices.shape[0]
        gidx = torch.as_tensor(view[:, None] * nvert) + faces_t[torch.as_tensor(pf)]
        px_f = torch.cat(px_all, 0)[gidx]
        z_f = torch.cat(z_all, 0)[gidx]
        pft = torch.as_tensor(pf)
        occ, color = _fragment_values(
            px_f, z_f, None, pix, inside, W, ndc2, sigma, face_alpha[pft],
            torch.as_tensor(mesh.face_uv[pf], dtype=dtype),
            torch.as_tensor(mesh.face_texture[pf]),
            torch.as_tensor(mesh.face_pad[pf], dtype=dtype), textures)
    if not dense:
        stacks = [FragmentStack(f[:, :Lm].reshape(H, W, Lm), d[:, :Lm].reshape(H, W, Lm), None, None)
                  for f, d, _ in per_view]
        if occ is None:
            return (torch.zeros(nv, H, W, 3, dtype=dtype), torch.zeros(nv, H, W, dtype=dtype)), stacks
        rgb, acc = _composite_sparse(occ, color, view * (H * W) + pix, lay, nv * H * W)
        return (rgb.reshape(nv, H, W, 3), acc.reshape(nv, H, W)), stacks
    occ_d = torch.zeros(nv, H * W, Lm, dtype=dtype)
    col_d = torch.zeros(nv, H * W, Lm, 3, dtype=dtype)
    if occ is not None:
        idx = (torch.as_tensor(view), torch.as_tensor(pix), torch.as_tensor(lay))
        occ_d = occ_d.index_put(idx, occ)
        col_d = col_d.index_put(idx, color)
    stacks = []
    for v, (face, depth, _) in enumerate(per_view):
        stacks.append(FragmentStack(face[:, :Lm].reshape(H, W, Lm), depth[:, :Lm].reshape(H, W, Lm),
                                    occ_d[v].reshape(H, W, Lm), col_d[v].reshape(H, W, Lm, 3)))
    return stacks


def gather_fragments(mesh: SceneMesh, camera: Camera, sigma: float = SIGMA_TRAIN,
                     layers: int = LAYERS, threshold: float = THRESHOLD,
                     face_alpha: Optional[torch.Tensor] = None,
                     textures: Optional[torch.Tensor] = None,
                     cull_opaque: bool = False) -> FragmentStack:
    """Per-pixel depth-sorted fragments of ``mesh`` seen from ``camera``.

    With ``cull_opaque`` the stack stops at the first fully opaque constant
    fragment (the composite is unchanged).
    """
    dtype = mesh.vertices.dtype
    if face_alpha is None:
        face_alpha = torch.ones(mesh.n_faces, dtype=dtype)
    if textures is None:
        n = int(mesh.face_texture.max()) + 1 if mesh.n_faces else 1
        textures = torch.full((n, 1, 1, 3), 0.5, dtype=dtype)
    return _rasterize(mesh, [camera], face_alpha, textures, sigma, layers, threshold, cull_opaque)[0]


def render_mesh(mesh: SceneMesh, cameras: Sequence[Camera], face_alpha: torch.Tensor,
                textures: torch.Tensor, settings: Optional[RenderSettings] = None,
                backend: str = "compiled") -> List[RenderOutput]:
    """Render a batch of views. ``backend="torch"`` uses plain torch autograd (slow reference)."""
    settings = settings or RenderSettings()
    (rgb, acc), stacks = _rasterize(mesh, cameras, face_alpha, textures, settings.sigma,
                                    settings.layers, settings.threshold, dense=False,
                                    backend=backend)
    return [RenderOutput(rgb[v], acc[v], fr) for v, fr in enumerate(stacks)]


def render_views(scene, cameras: Sequence[Camera], settings: Optional[RenderSettings] = None,
                 alphas: Optional[torch.Tensor] = None, backend: str = "compiled") -> List[RenderOutput]:
    """Render several views sharing one mesh assembly and texture realization."""
    settings = settings or RenderSettings()
    mesh = assemble_scene_mesh(scene)
    if alphas is None:
        alphas = scene.alphas()
    tex = scene.texture_rgb(settings.texture_downscale)
    return render_mesh(mesh, cameras, face_alphas(mesh, alphas), tex, settings, backend)


def render_view(scene, camera: Camera, sigma: float = SIGMA_TRAIN, layers: int = LAYERS,
                settings: Optional[RenderSettings] = None,
                alphas: Optional[torch.Tensor] = None) -> RenderOutput:
    """Render one view of ``scene``; differentiable w.r.t. all scene parameters."""
    settings = settings or RenderSettings(sigma=sigma, layers=layers)
    return render_views(scene, [camera], settings, alphas)[0]
