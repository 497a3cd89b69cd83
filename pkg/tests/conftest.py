import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

import scalecomp as sc


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    cfg = sc.SynthConfig(num_images=4, image_size=64, num_categories=6,
                         objects_per_image=(2, 4), object_size=(6.0, 40.0))
    return sc.generate_synthetic(cfg, seed=5)


def random_boxes(rng, n, image_size=64.0, min_size=2.0, max_size=24.0):
    boxes = []
    for _ in range(n):
        w = rng.uniform(min_size, max_size)
        h = rng.uniform(min_size, max_size)
        cx = rng.uniform(w / 2, image_size - w / 2)
        cy = rng.uniform(h / 2, image_size - h / 2)
        boxes.append(sc.Box(cx, cy, w, h))
    return boxes
