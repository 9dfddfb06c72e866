"""Differentiable blocks-world scene fitting: superquadric blocks, soft rasterization and Adam."""
from .core import backward, finite_difference_check, rot6d_to_matrix
from .dataio import Camera, Dataset, load_dataset, look_at, save_dataset
from .evaluation import chamfer_filtered, evaluate, generate_synthetic_scene, psnr, ssim
from .losses import LossWeights, objective
from .optim import Schedule, TrainConfig, multi_run_select, train
from .renderer import RenderSettings, render_view, render_views
from .scene import SceneConfig, SceneModel, count_primitives, init_scene, load_checkpoint, save_checkpoint

__all__ = [
    "backward", "finite_difference_check", "rot6d_to_matrix",
    "Camera", "Dataset", "load_dataset", "look_at", "save_dataset",
    "chamfer_filtered", "evaluate", "generate_synthetic_scene", "psnr", "ssim",
    "LossWeights", "objective", "Schedule", "TrainConfig", "multi_run_select", "train",
    "RenderSettings", "render_view", "render_views",
    "SceneConfig", "SceneModel", "count_primitives", "init_scene", "load_checkpoint", "save_checkpoint",
]
