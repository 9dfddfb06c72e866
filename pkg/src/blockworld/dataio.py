"""Cameras, dataset manifests, point files and textured OBJ export."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

MANIFEST_FORMAT = "blockworld-dataset"
ORTHO_TOL = 1e-4
NEAR_EPS = 1e-4


class DatasetError(ValueError):
    """Invalid or unreadable dataset manifest."""


@dataclass
class Camera:
    """Pinhole camera; ``R``/``t`` map world points to camera space (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise DatasetError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = self.R, self.t
        return m

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {"width": int(self.width), "height": int(self.height),
                "intrinsics": [float(self.fx), float(self.fy), float(self.cx), float(self.cy)],
                "world_to_camera": self.world_to_camera.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        m = np.asarray(d["world_to_camera"], dtype=np.float64)
        if m.shape != (4, 4):
            raise DatasetError("world_to_camera must be 4x4")
        fx, fy, cx, cy = d["intrinsics"]
        return cls(fx, fy, cx, cy, m[:3, :3], m[:3, 3], int(d["width"]), int(d["height"]))


def look_at(eye, target, width: int, height: int, fov_deg: float = 40.0,
            up=(0.0, 1.0, 0.0)) -> Camera:
    """Camera at ``eye`` looking at ``target`` with a horizontal field of view."""
    eye, target, up = (np.asarray(a, float) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(f, f, (width - 1) / 2, (height - 1) / 2, R, -R @ eye, width, height)


def project_point(x_world, camera: Camera, near: float = NEAR_EPS):
    """Project world points; returns ``(pixels (..., 2), depth (...), behind (...))``.

    Pixel centres sit at integer coordinates. Points with depth at or below
    ``near`` are flagged as behind the camera.
    """
    x = np.asarray(x_world, dtype=np.float64)
    xc = x @ camera.R.T + camera.t
    z = xc[..., 2]
    behind = z <= near
    zs = np.where(behind, 1.0, z)
    px = np.stack([camera.fx * xc[..., 0] / zs + camera.cx,
                   camera.fy * xc[..., 1] / zs + camera.cy], axis=-1)
    return px, z, behind


@dataclass
class Dataset:
    images: List[np.ndarray]
    cameras: List[Camera]
    world: dict = field(default_factory=lambda: {"scene_scale": 1.0})

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise DatasetError("image/camera count mismatch")
        if len(self.images) < 2:
            raise DatasetError("a dataset needs at least 2 views")
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise DatasetError(f"images differ in size: {sorted(shapes)}")
        h, w = self.images[0].shape[:2]
        for c in self.cameras:
            if (c.height, c.width) != (h, w):
                raise DatasetError("camera size does not match image size")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def scene_scale(self) -> float:
        return float(self.world.get("scene_scale", 1.0))

    @property
    def resolution(self):
        return self.images[0].shape[:2]


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, rgb) -> None:
    arr = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _check_rotation(R: np.ndarray, where: str) -> None:
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > ORTHO_TOL or np.linalg.det(R) < 0:
        raise DatasetError(f"{where}: rotation is not orthonormal (max |R^T R - I| = {err:.3g})")


def load_dataset(manifest) -> Dataset:
    """Read a JSON manifest; cameras are re-expressed in the canonical scene frame.

    The optional ``world.transform`` block (``scale``, ``rotation``,
    ``translation``) maps canonical coordinates to manifest world coordinates.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise DatasetError(f"manifest not found: {manifest}")
    try:
        data = json.loads(manifest.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest is not valid JSON: {e}") from e
    if data.get("format") != MANIFEST_FORMAT:
        raise DatasetError("unknown manifest format")
    world = dict(data.get("world", {}))
    tr = world.get("transform") or {}
    s = float(tr.get("scale", 1.0))
    Rc = np.asarray(tr.get("rotation", np.eye(3)), float)
    tc = np.asarray(tr.get("translation", np.zeros(3)), float)
    _check_rotation(Rc, "world transform")
    images, cameras = [], []
    for i, v in enumerate(data.get("views", [])):
        path = manifest.parent / v["image"]
        if not path.exists():
            raise DatasetError(f"view {i}: image not found: {path}")
        cam = Camera.from_dict(v)
        _check_rotation(cam.R, f"view {i}")
        if tr:
            cam = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.R @ Rc,
                         (cam.R @ tc + cam.t) / s, cam.width, cam.height)
        img = read_image(path)
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"view {i}: image is {img.shape[1]}x{img.shape[0]}, "
                               f"camera expects {cam.width}x{cam.height}")
        images.append(img)
        cameras.append(cam)
    world.pop("transform", None)
    world.setdefault("scene_scale", 1.0)
    return Dataset(images, cameras, world)


def save_dataset(dataset: Dataset, directory, name: str = "manifest.json") -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    views = []
    for i, (img, cam) in enumerate(zip(dataset.images, dataset.cameras)):
        rel = f"images/{i:03d}.png"
        write_image(directory / rel, img)
        views.append({"image": rel, **cam.to_dict()})
    out = directory / name
    out.write_text(json.dumps({"format": MANIFEST_FORMAT, "world": dataset.world,
                               "views": views}, indent=1))
    return out


def save_points(path, points) -> None:
    np.savetxt(path, np.asarray(points, float), fmt="%.8f")


def load_points(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)


# -- OBJ export ----------------------------------------------------------------

def export_scene_obj(scene, directory, name: str = "scene"):
    """Write ``name.obj`` / ``name.mtl`` plus one PNG per exported texture.

    One ``g`` group per primitive (dome, ground, then each block with
    transparency above 0.5). Sphere UVs may leave [0, 1] horizontally; viewers
    wrap them, which reproduces the circular texture padding used for rendering.
    """
    import torch

    from .geometry import scene_parts

    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"cannot write to {directory}: {e}") from e
    alpha = scene.eval_alphas()
    with torch.no_grad():
        parts = scene_parts(scene)
        rgb = scene.texture_rgb().numpy()
    lines = [f"mtllib {name}.mtl"]
    mtl = []
    v_off = vt_off = 1
    n_groups = 0
    for gname, verts, tmpl, tex, blk in parts:
        if blk >= 0 and not alpha[blk] > 0.5:
            continue
        n_groups += 1
        img = np.round(rgb[tex] * 255).astype(np.uint8)
        Image.fromarray(img).save(directory / f"{name}_{gname}.png")
        mtl += [f"newmtl {gname}", "Ka 1 1 1", "Kd 1 1 1", "Ks 0 0 0", "d 1",
                f"map_Kd {name}_{gname}.png", ""]
        lines += [f"g {gname}", f"usemtl {gname}"]
        v = verts.detach().numpy()
        lines += [f"v {x:.7f} {y:.7f} {z:.7f}" for x, y, z in v]
        uv = tmpl.uv.reshape(-1, 2)
        u = uv[:, 0] * (1 + 2 * tmpl.uv_pad) - tmpl.uv_pad
        lines += [f"vt {a:.7f} {1.0 - b:.7f}" for a, b in zip(u, uv[:, 1])]
        for fi, f in enumerate(tmpl.faces):
            a, b, c = (f + v_off).tolist()
            ta, tb, tc = (3 * fi + vt_off + np.arange(3)).tolist()
            lines.append(f"f {a}/{ta} {b}/{tb} {c}/{tc}")
        v_off += len(v)
        vt_off += len(uv)
    (directory / f"{name}.obj").write_text("\n".join(lines) + "\n")
    (directory / f"{name}.mtl").write_text("\n".join(mtl))
    return directory / f"{name}.obj"


def read_obj(path):
    """Minimal OBJ reader: returns ``(vertices, faces, groups)`` with 0-based face indices."""
    verts, faces, groups = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        elif parts[0] == "g":
            groups.append(parts[1])
    return np.array(verts), np.array(faces, dtype=np.int64), groups
