"""
Dataset ingestion: indexed training folders sampled into seeded random crops,
and the lossless evaluation set loader.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from PIL import Image, UnidentifiedImageError
from torch import Tensor
from torch.utils.data import Dataset
from tqdm import tqdm

from src.core.config import settings
from src.core.errors import IngestionError, LossyEvalImageError, PreconditionError
from src.core.schemas import ManifestEntry

MANIFEST_NAME = "manifest.jsonl"

TRAIN_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm", ".webp"}
LOSSLESS_EXTENSIONS = {".png", ".bmp", ".tif", ".tiff", ".ppm", ".pnm"}
LOSSY_EXTENSIONS = {".jpg", ".jpeg", ".webp", ".jp2", ".j2k"}


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def read_rgb(path: Path, strict: bool = False) -> np.ndarray:
    """
    Decode an image file into an (H, W, 3) uint8 array.

    Args:
        path: Image file
        strict: Reject anything that is not already 8-bit RGB instead of converting

    Raises:
        IngestionError: If the file cannot be decoded (or is not RGB under strict)
    """
    try:
        with Image.open(path) as image:
            if strict and image.mode != "RGB":
                raise IngestionError(path, f"expected 8-bit RGB, found mode {image.mode}")
            return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise IngestionError(path, f"decode failed ({e})") from e


def to_tensor(image: np.ndarray) -> Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 equal to x / 255."""
    return torch.from_numpy(image).permute(2, 0, 1).to(torch.float32) / 255.0


def to_uint8(x: Tensor) -> np.ndarray:
    """(3, H, W) or (1, 3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    if x.dim() == 4:
        x = x[0]
    x = x.detach().clamp(0, 1).mul(255).round().to(torch.uint8)
    return x.permute(1, 2, 0).cpu().numpy()


def index(root, progress: Optional[bool] = None) -> List[ManifestEntry]:
    """
    Scan a training folder and write its manifest.

    Args:
        root: Folder of training images (searched recursively)
        progress: Show a progress bar (defaults to settings.PROGRESS)

    Returns:
        Manifest entries, sorted by relative path

    Raises:
        IngestionError: If the folder is missing, empty or holds an undecodable image
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(root, "not a directory")

    files = sorted(
        p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in TRAIN_EXTENSIONS
    )
    if not files:
        raise IngestionError(root, "no training images found")

    show = settings.PROGRESS if progress is None else progress
    entries = []
    for path in tqdm(files, desc="Indexing", disable=not show):
        try:
            with Image.open(path) as image:
                image.verify()
            with Image.open(path) as image:
                width, height = image.size
        except (UnidentifiedImageError, OSError, ValueError) as e:
            raise IngestionError(path, f"decode failed ({e})") from e
        entries.append(
            ManifestEntry(
                path=path.relative_to(root).as_posix(),
                sha256=_sha256(path),
                width=width,
                height=height,
            )
        )

    manifest = root / MANIFEST_NAME
    with open(manifest, "w") as f:
        for entry in entries:
            f.write(entry.model_dump_json() + "\n")
    logger.info(f"Indexed {len(entries)} images into {manifest}")
    return entries


def read_manifest(root) -> List[ManifestEntry]:
    manifest = Path(root) / MANIFEST_NAME
    if not manifest.exists():
        raise IngestionError(root, f"no {MANIFEST_NAME}; run 'kdlic index {root}' first")
    entries = []
    with open(manifest) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.model_validate_json(line))
            except ValueError as e:
                raise IngestionError(manifest, f"line {lineno}: {e}") from e
    return entries


class PatchDataset:
    """Random crop sampler whose batches depend only on (seed, step)."""

    def __init__(self, root: Path, entries: List[ManifestEntry], crop: int = 256, seed: int = 0):
        self.root = Path(root)
        self.entries = entries
        self.crop = int(crop)
        self.seed = int(seed)

    @classmethod
    def open(cls, root, crop: int = 256, seed: int = 0, verify: bool = False) -> "PatchDataset":
        root = Path(root)
        entries = read_manifest(root)
        if not entries:
            raise IngestionError(root, "manifest is empty")
        for entry in entries:
            path = root / entry.path
            if not path.exists():
                raise IngestionError(path, "listed in the manifest but missing on disk")
            if entry.width < crop or entry.height < crop:
                raise IngestionError(
                    path, f"{entry.width}x{entry.height} is smaller than the {crop}x{crop} crop"
                )
            if verify and _sha256(path) != entry.sha256:
                raise IngestionError(path, "checksum differs from the manifest; re-run index")
        logger.info(f"Opened {len(entries)} training images from {root} (crop={crop}, seed={seed})")
        return cls(root, entries, crop=crop, seed=seed)

    def __len__(self) -> int:
        return len(self.entries)

    def crop_offsets(self, step: int, batch_size: int) -> List[Tuple[int, int, int]]:
        """(image index, top, left) for every element of the batch at this step."""
        rng = np.random.default_rng([self.seed, step])
        offsets = []
        for _ in range(batch_size):
            i = int(rng.integers(len(self.entries)))
            entry = self.entries[i]
            top = int(rng.integers(entry.height - self.crop + 1))
            left = int(rng.integers(entry.width - self.crop + 1))
            offsets.append((i, top, left))
        return offsets

    def sample_batch(self, step: int, batch_size: int) -> Tensor:
        patches = []
        for i, top, left in self.crop_offsets(step, batch_size):
            image = read_rgb(self.root / self.entries[i].path)
            patch = image[top:top + self.crop, left:left + self.crop]
            patches.append(to_tensor(patch))
        return torch.stack(patches)


def sample_batch(ds: PatchDataset, step: int, batch_size: int) -> Tensor:
    return ds.sample_batch(step, batch_size)


class StepBatches(Dataset):
    """Map-style view over steps so a DataLoader can prefetch whole batches."""

    def __init__(self, ds: PatchDataset, batch_size: int, start_step: int, num_steps: int):
        self.ds = ds
        self.batch_size = batch_size
        self.start_step = start_step
        self.num_steps = num_steps

    def __len__(self) -> int:
        return self.num_steps

    def __getitem__(self, i: int) -> Tensor:
        return self.ds.sample_batch(self.start_step + i, self.batch_size)


@dataclass
class EvalImage:
    name: str
    image: Tensor  # (1, 3, H, W) in [0, 1]

    @property
    def num_pixels(self) -> int:
        return self.image.shape[-2] * self.image.shape[-1]


def load_eval_set(root) -> List[EvalImage]:
    """
    Load a lossless evaluation set in filename order.

    Args:
        root: Directory of PNG/BMP/TIFF/PPM images

    Returns:
        EvalImage list, sorted by file name

    Raises:
        LossyEvalImageError: If the directory holds a lossy-format image
        IngestionError: Missing or empty directory, or a non-RGB image
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(root, "evaluation root is not a directory")

    files = sorted(p for p in root.iterdir() if p.is_file())
    lossy = [p.name for p in files if p.suffix.lower() in LOSSY_EXTENSIONS]
    if lossy:
        raise LossyEvalImageError(
            f"{root} contains lossy images ({', '.join(lossy)}); evaluation ground truth "
            f"must be lossless, convert the originals to PNG"
        )

    images = [
        EvalImage(name=p.name, image=to_tensor(read_rgb(p, strict=True)).unsqueeze(0))
        for p in files
        if p.suffix.lower() in LOSSLESS_EXTENSIONS
    ]
    if not images:
        raise IngestionError(root, "no lossless images found")
    logger.info(f"Loaded {len(images)} evaluation images from {root}")
    return images


def require_non_empty(eval_set: List[EvalImage]) -> None:
    if not eval_set:
        raise PreconditionError("evaluation set is empty")
