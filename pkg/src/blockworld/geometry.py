"""Icospheres, the superquadric surface map, UV atlases and scene-mesh assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import torch

MIN_SCALE = 0.2
SHAPE_MIN, SHAPE_MAX = 0.1, 1.9
# Seam-crossing UV triangles overhang past u=1 by less than this (checked at build time).
UV_PAD = 0.25
_ZERO = 1e-12


@dataclass
class TriangleMesh:
    """Vertices, faces and per-corner UVs of one mesh.

    ``uv_pad`` is the fraction of horizontally wrapped texture padding the UV
    atlas assumes (0 for planar maps). ``opacity_source`` is ``None`` for
    always-opaque meshes or the index of the block whose transparency applies.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: Optional[np.ndarray] = None
    texture: Optional[int] = None
    opacity_source: Optional[int] = None
    uv_pad: float = 0.0

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def _icosahedron():
    # Poles on the y axis so the UV poles coincide with vertices.
    h = 1.0 / math.sqrt(5.0)
    r = 2.0 / math.sqrt(5.0)
    off = math.radians(5.0)
    verts = [(0.0, 1.0, 0.0)]
    for k in range(5):
        w = off + 2 * math.pi * k / 5
        verts.append((r * math.cos(w), h, r * math.sin(w)))
    for k in range(5):
        w = off + 2 * math.pi * k / 5 + math.pi / 5
        verts.append((r * math.cos(w), -h, r * math.sin(w)))
    verts.append((0.0, -1.0, 0.0))
    faces = []
    for k in range(5):
        u0, u1 = 1 + k, 1 + (k + 1) % 5
        l0, l1 = 6 + k, 6 + (k + 1) % 5
        faces.append((0, u1, u0))
        faces.append((u0, u1, l0))
        faces.append((u1, l1, l0))
        faces.append((11, l0, l1))
    return np.array(verts), np.array(faces, dtype=np.int64)


@lru_cache(maxsize=None)
def _icosphere_arrays(level: int):
    verts, faces = _icosahedron()
    verts = [tuple(v) for v in verts]
    for _ in range(level):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.add(verts[a], verts[b])
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new_faces, dtype=np.int64)
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, np.asarray(faces, dtype=np.int64)


def spherical_coords(v: np.ndarray):
    """Latitude ``eta`` in [-pi/2, pi/2] (y up) and longitude ``omega`` in [-pi, pi]."""
    eta = np.arcsin(np.clip(v[:, 1], -1.0, 1.0))
    omega = np.arctan2(v[:, 2], v[:, 0])
    return eta, omega


def make_icosphere(level: int = 1) -> TriangleMesh:
    if level < 0:
        raise ValueError("level must be >= 0")
    v, f = _icosphere_arrays(level)
    mesh = TriangleMesh(v.copy(), f.copy(), uv_pad=UV_PAD)
    mesh.uv = build_uv_atlas(mesh)
    return mesh


def signed_pow(x, e):
    """``sign(x) * |x|**e``, with a zero-safe gradient at ``x == 0``."""
    if isinstance(x, torch.Tensor) or isinstance(e, torch.Tensor):
        x = torch.as_tensor(x)
        ax = x.abs()
        small = ax < _ZERO
        safe = torch.where(small, torch.ones_like(ax), ax)
        return torch.where(small, torch.zeros_like(ax), torch.sign(x) * safe ** e)
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.abs(x) ** e


def superquadric_map(eta, omega, scale, shape):
    """Map spherical coordinates onto the superquadric surface.

    ``scale`` is ``(..., 3)`` and ``shape`` ``(..., 2)`` holding (eps1, eps2);
    leading dimensions broadcast against the coordinate arrays, so a ``(K, 1, 3)``
    scale with ``(V,)`` angles yields ``(K, V, 3)`` points. Tensors in, tensors out.
    """
    if isinstance(scale, torch.Tensor) or isinstance(shape, torch.Tensor):
        ref = scale if isinstance(scale, torch.Tensor) else shape
        eta = torch.as_tensor(eta, dtype=ref.dtype)
        omega = torch.as_tensor(omega, dtype=ref.dtype)
        scale = torch.as_tensor(scale, dtype=ref.dtype)
        shape = torch.as_tensor(shape, dtype=ref.dtype)
        cos, sin, stack = torch.cos, torch.sin, torch.stack
    else:
        eta, omega = np.asarray(eta, float), np.asarray(omega, float)
        scale, shape = np.asarray(scale, float), np.asarray(shape, float)
        cos, sin, stack = np.cos, np.sin, np.stack
    e1, e2 = shape[..., 0], shape[..., 1]
    ce = signed_pow(cos(eta), e1)
    x = ce * signed_pow(cos(omega), e2)
    y = signed_pow(sin(eta), e1)
    z = ce * signed_pow(sin(omega), e2)
    return stack([x, y, z], -1) * scale


def inside_outside(x, scale, shape):
    """Superquadric inside-outside function; <= 1 inside, > 1 outside.

    Evaluated in log space so far-away points saturate instead of overflowing.
    ``x`` is ``(..., 3)`` in the block frame.
    """
    if not isinstance(x, torch.Tensor):
        return inside_outside(torch.as_tensor(np.asarray(x, float)),
                              torch.as_tensor(np.asarray(scale, float)),
                              torch.as_tensor(np.asarray(shape, float))).numpy()
    return torch.exp(torch.clamp(log_inside_outside(x, scale, shape), max=40.0))


def log_inside_outside(x, scale, shape):
    e1, e2 = shape[..., 0], shape[..., 1]
    r = torch.clamp((x / scale).abs(), min=1e-30)
    lr = torch.log(r)
    a = (2.0 / e2) * lr[..., 0]
    b = (2.0 / e2) * lr[..., 2]
    c = (2.0 / e1) * lr[..., 1]
    return torch.logaddexp(torch.logaddexp(a, b) * (e2 / e1), c)


def build_uv_atlas(sphere: TriangleMesh, pad: float = UV_PAD) -> np.ndarray:
    """Per-corner UVs in [0, 1]^2 for an icosphere.

    Longitude maps to u and latitude to v (north pole at v=0). Triangles that
    straddle the longitude wrap get their low-u corners shifted by one period,
    which lands them in a horizontally padded region of the atlas; sampling
    treats that region as a circular copy of the texture. Pole corners are moved
    to the mean u of the triangle's two other corners.
    """
    eta, omega = spherical_coords(sphere.vertices)
    u = (omega + np.pi) / (2 * np.pi)
    v = (np.pi / 2 - eta) / np.pi
    fu = u[sphere.faces].copy()
    fv = v[sphere.faces].copy()
    pole = np.abs(np.abs(sphere.vertices[:, 1]) - 1.0) < 1e-9
    fpole = pole[sphere.faces]
    for i in range(len(fu)):
        nonpole = ~fpole[i]
        us = fu[i, nonpole]
        if us.max() - us.min() > 0.5:
            fu[i, nonpole] = np.where(us < 0.5, us + 1.0, us)
        if fpole[i].any():
            fu[i, fpole[i]] = fu[i, nonpole].mean()
    if fu.max() > 1 + pad or fu.min() < -pad:
        raise RuntimeError("seam overhang exceeds UV padding")
    uv = np.stack([(fu + pad) / (1 + 2 * pad), fv], axis=-1)
    return uv


def make_ground_plane(subdivisions: int = 128) -> TriangleMesh:
    """Square [-1, 1]^2 in the xz plane (normal +y), triangulated into ``subdivisions`` faces."""
    n = int(round(math.sqrt(subdivisions / 2)))
    if 2 * n * n != subdivisions:
        raise ValueError("face count must be 2*n^2")
    g = np.linspace(-1.0, 1.0, n + 1)
    xx, zz = np.meshgrid(g, g, indexing="ij")
    verts = np.stack([xx.ravel(), np.zeros(xx.size), zz.ravel()], axis=1)
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b, c, d = a + n + 1, a + 1, a + n + 2
            faces += [(a, c, b), (c, d, b)]
    faces = np.array(faces, dtype=np.int64)
    uv_v = np.stack([(verts[:, 0] + 1) / 2, (verts[:, 2] + 1) / 2], axis=1)
    return TriangleMesh(verts, faces, uv=uv_v[faces], uv_pad=0.0)


@dataclass
class SceneMesh:
    """The concatenated scene mesh fed to the rasterizer.

    ``vertices`` is a (possibly differentiable) tensor; per-face arrays say which
    texture slot, block and UV padding each face uses (block -1 means opaque).
    """

    vertices: torch.Tensor
    faces: np.ndarray
    face_uv: np.ndarray
    face_texture: np.ndarray
    face_block: np.ndarray
    face_pad: np.ndarray
    groups: list

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@lru_cache(maxsize=None)
def _template(kind: str, n: int) -> TriangleMesh:
    # Shared, read-only template meshes.
    return make_icosphere(n) if kind == "sphere" else make_ground_plane(n)


def scene_parts(scene, include_dead: bool = False):
    """World-space sub-meshes of a scene as (name, vertices tensor, template mesh, texture, block)."""
    dome_t = _template("sphere", scene.config.dome_level)
    ground_t = _template("plane", scene.config.ground_faces)
    block_t = _template("sphere", scene.config.block_level)
    dtype = scene.dtype
    parts = []
    dome_v = torch.as_tensor(dome_t.vertices, dtype=dtype) * scene.config.dome_scale
    parts.append(("dome", dome_v, dome_t, 0, -1))
    rg = scene.ground_rotation()
    gv = torch.as_tensor(ground_t.vertices, dtype=dtype) * scene.config.ground_scale
    parts.append(("ground", gv @ rg.T + scene.ground_t, ground_t, 1, -1))
    eta, omega = spherical_coords(block_t.vertices)
    if scene.n_blocks:
        rot = scene.block_rotations()
        local = superquadric_map(eta, omega, scene.block_scales()[:, None, :],
                                 scene.block_shapes()[:, None, :])
        local = local * scene.config.block_scale_ratio
        world = torch.einsum("kij,kvj->kvi", rot, local) + scene.block_t[:, None, :]
        alive = scene.alive
        for k in range(scene.n_blocks):
            if alive[k] or include_dead:
                parts.append((f"block_{k:02d}", world[k], block_t, 2 + k, k))
    return parts


def assemble_scene_mesh(scene) -> SceneMesh:
    parts = scene_parts(scene)
    verts, faces, uvs, tex, blk, pad, groups = [], [], [], [], [], [], []
    offset = 0
    fstart = 0
    for name, v, tmpl, t, b in parts:
        verts.append(v)
        faces.append(tmpl.faces + offset)
        uvs.append(tmpl.uv)
        nf = len(tmpl.faces)
        tex.append(np.full(nf, t))
        blk.append(np.full(nf, b))
        pad.append(np.full(nf, tmpl.uv_pad))
        groups.append((name, fstart, fstart + nf))
        offset += len(tmpl.vertices)
        fstart += nf
    return SceneMesh(torch.cat(verts, 0),
                     np.ascontiguousarray(np.concatenate(faces), dtype=np.int64),
                     np.ascontiguousarray(np.concatenate(uvs), dtype=np.float64),
                     np.ascontiguousarray(np.concatenate(tex), dtype=np.int64),
                     np.ascontiguousarray(np.concatenate(blk), dtype=np.int64),
                     np.ascontiguousarray(np.concatenate(pad), dtype=np.float64), groups)
