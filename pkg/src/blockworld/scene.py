"""Optimizable scene parameters: blocks, ground, textures and transparencies."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .core import matrix_to_rot6d, rot6d_to_matrix
from .geometry import MIN_SCALE, SHAPE_MAX, SHAPE_MIN

KILL_THRESHOLD = 0.01
REPORT_THRESHOLD = 0.5


@dataclass
class SceneConfig:
    """Fixed design constants of the canonical scene (centred, roughly unit cube, y up)."""

    scene_scale: float = 1.0
    ground_scale: float = 10.0
    ground_position: tuple = (0.0, -0.9, 0.0)
    block_scale_ratio: float = 0.25
    dome_level: int = 2
    block_level: int = 1
    ground_faces: int = 128
    texture_size: int = 256
    translation_std: float = 0.3
    texture_noise: float = 0.05

    @property
    def dome_scale(self) -> float:
        return 10.0 * self.scene_scale

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ground_position"] = list(self.ground_position)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "ground_position" in d:
            d["ground_position"] = tuple(d["ground_position"])
        return cls(**d)


@dataclass
class TextureImage:
    """RGB texture stored as logits; ``rgb`` is their sigmoid."""

    logits: torch.Tensor

    @property
    def rgb(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @property
    def resolution(self):
        return tuple(self.logits.shape[:2])


@dataclass
class BlockParams:
    """Read-only view of one block's raw parameters."""

    r: torch.Tensor
    t: torch.Tensor
    raw_scale: torch.Tensor
    raw_shape: torch.Tensor
    raw_alpha: torch.Tensor
    texture: TextureImage


PARAM_NAMES = ("block_r", "block_t", "block_scale", "block_shape", "block_alpha",
               "ground_r", "ground_t", "textures")


def realize_scale(raw):
    return torch.exp(raw) + MIN_SCALE


def realize_shape(raw):
    return SHAPE_MIN + (SHAPE_MAX - SHAPE_MIN) * torch.sigmoid(raw)


def transparency_value(raw_alpha, noise_std: float = 0.0, training: bool = False,
                       rng: Optional[np.random.Generator] = None):
    """``sigmoid(raw + noise)`` during training, ``sigmoid(raw)`` otherwise."""
    if training and noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        if isinstance(raw_alpha, torch.Tensor):
            noise = torch.as_tensor(rng.normal(0.0, noise_std, size=tuple(raw_alpha.shape)),
                                    dtype=raw_alpha.dtype)
            return torch.sigmoid(raw_alpha + noise)
        raw_alpha = np.asarray(raw_alpha, float) + rng.normal(0.0, noise_std, np.shape(raw_alpha))
    if isinstance(raw_alpha, torch.Tensor):
        return torch.sigmoid(raw_alpha)
    return 1.0 / (1.0 + np.exp(-np.asarray(raw_alpha, float)))


class SceneModel:
    """All scene parameters as leaf tensors.

    Blocks are stored stacked; a killed block keeps its slot (so indices and the
    1/K normalisation stay fixed) but is flagged dead and never rendered again.
    """

    def __init__(self, K: int, config: Optional[SceneConfig] = None, dtype=torch.float32,
                 texture_size: Optional[int] = None):
        if K < 0:
            raise ValueError("K must be >= 0")
        self.config = config or SceneConfig()
        self.K = K
        self.dtype = dtype
        ts = texture_size or self.config.texture_size
        z = lambda *s: torch.zeros(*s, dtype=dtype)
        eye6 = torch.tensor([1.0, 0, 0, 0, 1, 0], dtype=dtype)
        self.block_r = eye6.repeat(K, 1)
        self.block_t = z(K, 3)
        self.block_scale = torch.full((K, 3), float(np.log(1.0 - MIN_SCALE)), dtype=dtype)
        self.block_shape = z(K, 2)
        self.block_alpha = z(K)
        self.ground_r = eye6.clone()
        self.ground_t = torch.tensor(self.config.ground_position, dtype=dtype)
        self.textures = z(K + 2, ts, ts, 3)
        self.alive = np.ones(K, dtype=bool)
        self.binarized = False
        for p in self.parameters().values():
            p.requires_grad_(True)

    # -- parameter access -------------------------------------------------
    def parameters(self) -> Dict[str, torch.Tensor]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    @property
    def n_blocks(self) -> int:
        return self.K

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def block(self, k: int) -> BlockParams:
        return BlockParams(self.block_r[k], self.block_t[k], self.block_scale[k],
                           self.block_shape[k], self.block_alpha[k],
                           TextureImage(self.textures[2 + k]))

    @property
    def background(self) -> TextureImage:
        return TextureImage(self.textures[0])

    @property
    def ground_texture(self) -> TextureImage:
        return TextureImage(self.textures[1])

    def block_rotations(self) -> torch.Tensor:
        return rot6d_to_matrix(self.block_r, check=False)

    def ground_rotation(self) -> torch.Tensor:
        return rot6d_to_matrix(self.ground_r, check=False)

    def block_scales(self) -> torch.Tensor:
        return realize_scale(self.block_scale)

    def block_shapes(self) -> torch.Tensor:
        return realize_shape(self.block_shape)

    def alphas(self, noise_std: float = 0.0, training: bool = False,
               rng: Optional[np.random.Generator] = None) -> torch.Tensor:
        """Realized transparencies; dead blocks read 0, binarized live blocks 1."""
        alive = torch.as_tensor(self.alive, dtype=self.dtype)
        if self.binarized:
            return alive
        return transparency_value(self.block_alpha, noise_std, training, rng) * alive

    def eval_alphas(self) -> np.ndarray:
        with torch.no_grad():
            return self.alphas().numpy().astype(np.float64)

    def texture_rgb(self, downscale: int = 1) -> torch.Tensor:
        """Sigmoid textures ``(K+2, H, W, 3)``, optionally average-pooled in logit space."""
        logits = self.textures
        if downscale > 1:
            x = logits.permute(0, 3, 1, 2)
            x = torch.nn.functional.avg_pool2d(x, downscale)
            logits = x.permute(0, 2, 3, 1)
        return torch.sigmoid(logits)

    # -- copies / conversion -------------------------------------------------
    def state(self) -> Dict[str, np.ndarray]:
        return {n: p.detach().numpy().copy() for n, p in self.parameters().items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for n in PARAM_NAMES:
            t = torch.as_tensor(np.array(state[n]), dtype=self.dtype)
            setattr(self, n, t.requires_grad_(True))

    def clone(self, dtype=None) -> "SceneModel":
        other = SceneModel.__new__(SceneModel)
        other.config = SceneConfig.from_dict(self.config.to_dict())
        other.K = self.K
        other.dtype = dtype or self.dtype
        other.alive = self.alive.copy()
        other.binarized = self.binarized
        other.load_state(self.state())
        return other

    def __repr__(self):
        return f"SceneModel(K={self.K}, alive={self.n_alive}, binarized={self.binarized})"


def uniform_rotation6d(rng: np.random.Generator, n: int) -> np.ndarray:
    """6D vectors whose Gram-Schmidt rotations are uniform (Gaussian columns are isotropic)."""
    while True:
        r = rng.normal(size=(n, 6))
        a1, a2 = r[:, :3], r[:, 3:]
        n1 = np.linalg.norm(a1, axis=1)
        c = np.cross(a1, a2)
        if (n1 > 1e-6).all() and (np.linalg.norm(c, axis=1) > 1e-6).all():
            return r


def init_scene(seed: int, K: int, config: Optional[SceneConfig] = None,
               dtype=torch.float32) -> SceneModel:
    """Random initial scene; deterministic for a given seed."""
    if K < 1:
        raise ValueError("K must be >= 1")
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    scene = SceneModel(K, config, dtype)
    ts = config.texture_size
    state = scene.state()
    state["block_t"] = rng.normal(0.0, config.translation_std * config.scene_scale, size=(K, 3))
    state["block_r"] = uniform_rotation6d(rng, K)
    s = rng.uniform(0.5, 1.5, size=(K, 3))
    state["block_scale"] = np.log(s - MIN_SCALE)
    state["block_shape"] = np.zeros((K, 2))
    state["block_alpha"] = np.zeros(K)
    state["textures"] = rng.normal(0.0, config.texture_noise, size=(K + 2, ts, ts, 3))
    scene.load_state(state)
    return scene


def kill_dead_blocks(scene: SceneModel, threshold: float = KILL_THRESHOLD) -> int:
    """Flag live blocks whose eval transparency fell below ``threshold``; returns how many."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if scene.binarized:
        return 0
    alpha = transparency_value(scene.block_alpha.detach()).numpy()
    dead = scene.alive & (alpha < threshold)
    scene.alive[dead] = False
    return int(dead.sum())


def binarize_transparencies(scene: SceneModel) -> SceneModel:
    """Snap transparencies to {0, 1} at 0.5 (a tie keeps the block); zeros are killed."""
    alpha = transparency_value(scene.block_alpha.detach()).numpy()
    scene.alive &= alpha >= 0.5
    scene.binarized = True
    return scene


def count_primitives(scene: SceneModel) -> int:
    """Number of blocks with eval transparency above 0.5."""
    return int((scene.eval_alphas() > REPORT_THRESHOLD).sum())


# -- checkpoint container ------------------------------------------------------
# A zip of .npy arrays plus a JSON header; readable with numpy.load. Entries get
# a fixed timestamp so identical scenes give identical bytes.

def _write_npy(zf: zipfile.ZipFile, name: str, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, buf.getvalue())


def save_checkpoint(path, scene: SceneModel, rng: Optional[np.random.Generator] = None,
                    extra: Optional[dict] = None, arrays: Optional[Dict[str, np.ndarray]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "blockworld-checkpoint",
        "version": 1,
        "K": scene.K,
        "dtype": str(scene.dtype).replace("torch.", ""),
        "binarized": scene.binarized,
        "config": scene.config.to_dict(),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(header, sort_keys=True, default=_json_default))
        for n, a in scene.state().items():
            _write_npy(zf, n, a)
        _write_npy(zf, "alive", scene.alive)
        for n, a in (arrays or {}).items():
            _write_npy(zf, "extra_" + n, np.asarray(a))
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def load_checkpoint(path):
    """Returns ``(scene, rng_or_None, header, extra_arrays)``."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
    dtype = getattr(torch, header["dtype"])
    scene = SceneModel.__new__(SceneModel)
    scene.config = SceneConfig.from_dict(header["config"])
    scene.K = header["K"]
    scene.dtype = dtype
    scene.alive = arrays["alive"].astype(bool)
    scene.binarized = header["binarized"]
    scene.load_state(arrays)
    rng = None
    if header.get("rng_state"):
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra_")}
    return scene, rng, header, extra


def scene_from_blocks(blocks, config: Optional[SceneConfig] = None, texture_size: int = 8,
                      dome_color=(0.5, 0.5, 0.5), ground_color=(0.5, 0.5, 0.5),
                      ground_position=None, dtype=torch.float32) -> SceneModel:
    """Build a scene from explicit block descriptions with flat-colored textures.

    Each block is a mapping with ``t``, ``scale`` (realized s, before the block
    scale ratio), ``shape`` (eps1, eps2), ``color`` and optional ``rotation``
    (3x3 matrix or 6D vector) and ``alpha``.
    """
    config = config or SceneConfig()
    K = len(blocks)
    scene = SceneModel(K, config, dtype, texture_size=texture_size)
    st = scene.state()
    eps = 1e-12

    def logit(c):
        c = np.clip(np.asarray(c, float), eps, 1 - eps)
        return np.log(c / (1 - c))

    st["textures"][0] = logit(dome_color)
    st["textures"][1] = logit(ground_color)
    if ground_position is not None:
        st["ground_t"] = np.asarray(ground_position, float)
    for k, b in enumerate(blocks):
        rot = np.asarray(b.get("rotation", np.eye(3)), float)
        st["block_r"][k] = rot if rot.shape == (6,) else matrix_to_rot6d(rot)
        st["block_t"][k] = b["t"]
        st["block_scale"][k] = np.log(np.asarray(b["scale"], float) - MIN_SCALE)
        e = (np.asarray(b.get("shape", (1.0, 1.0)), float) - SHAPE_MIN) / (SHAPE_MAX - SHAPE_MIN)
        st["block_shape"][k] = logit(e)
        st["block_alpha"][k] = logit(b.get("alpha", 0.5))
        st["textures"][2 + k] = logit(b.get("color", (0.5, 0.5, 0.5)))
    scene.load_state(st)
    return scene
