"""Shared pytest fixtures: tiny models and on-disk image folders."""
import os
import sys
import tempfile
from pathlib import Path

# settings are read at import time
os.environ.setdefault("KDLIC_PROGRESS", "false")
os.environ.setdefault("KDLIC_LOG_DIR", tempfile.mkdtemp(prefix="kdlic-logs-"))
os.environ.setdefault("KDLIC_DEVICE", "cpu")
os.environ.setdefault("KDLIC_COMMIT_TAG", "test")

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np  # noqa: E402
import pytest  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from src.core.schemas import ModelConfig  # noqa: E402
from src.models.hyperprior import build_model  # noqa: E402


def textured_image(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Smooth gradients plus mild noise, closer to a photo than white noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    channels = [
        128 + 90 * np.sin(xx / 17.0 + seed) * np.cos(yy / 23.0),
        128 + 80 * np.cos((xx + yy) / 31.0),
        255 * xx / max(width - 1, 1),
    ]
    image = np.stack(channels, axis=-1) + rng.normal(0, 6, size=(height, width, 3))
    return np.clip(image, 0, 255).round().astype(np.uint8)


def write_png(path: Path, image: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path)
    return path


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(channels_n=8, latent_m=12)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return build_model(tiny_config).eval()


@pytest.fixture
def train_root(tmp_path) -> Path:
    """Three indexed training images, all at least 80 pixels per side."""
    from src.services.data import index

    root = tmp_path / "train"
    for i, (h, w) in enumerate([(96, 96), (80, 112), (128, 96)]):
        write_png(root / f"img{i:02d}.png", textured_image(h, w, seed=i))
    index(root, progress=False)
    return root


@pytest.fixture
def eval_root(tmp_path) -> Path:
    root = tmp_path / "eval"
    write_png(root / "b.png", textured_image(64, 64, seed=11))
    write_png(root / "a.png", textured_image(64, 128, seed=12))
    return root
