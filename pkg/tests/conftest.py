import numpy as np
import pytest
import torch

from blockworld.dataio import look_at
from blockworld.scene import SceneConfig, scene_from_blocks


def two_block_scene(dtype=torch.float64, texture_size=8):
    blocks = [
        {"t": [-0.3, -0.5, 0.0], "scale": [1.2, 1.0, 1.0], "shape": [0.6, 0.8],
         "color": [0.8, 0.2, 0.2], "alpha": 0.7},
        {"t": [0.35, -0.45, 0.1], "scale": [1.0, 1.4, 0.9], "shape": [1.2, 0.5],
         "color": [0.2, 0.3, 0.9], "alpha": 0.6},
    ]
    return scene_from_blocks(blocks, SceneConfig(), texture_size=texture_size,
                             dome_color=(0.7, 0.8, 0.9), ground_color=(0.4, 0.4, 0.3), dtype=dtype)


@pytest.fixture
def scene2():
    return two_block_scene()


@pytest.fixture
def camera48():
    return look_at((2.2, 0.8, 1.8), (0.0, -0.5, 0.0), 48, 48, 45.0)
