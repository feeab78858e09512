"""
Checkpoint archive and pre-trained teacher import.

Archive layout (torch.save of a plain dict, loadable with weights_only=True):
    schema_version  int
    model_config    ModelConfig as JSON text
    state_dict      named tensors
    trainer_state   TrainState as JSON text, or "" when absent
    meta            free-form JSON text (quality, rd_lambda, source, ...)
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import torch
from loguru import logger
from pydantic import ValidationError

from src.core.config import rd_lambda_for_quality
from src.core.errors import CheckpointSchemaError
from src.core.schemas import ModelConfig, TrainState
from src.models.hyperprior import ScaleHyperprior, build_model

CHECKPOINT_SCHEMA_VERSION = 1

# Published archives name the factorized prior's parameters either _matrix0 or
# matrices.0 depending on the compressai release that wrote them
_PRIOR_KEY = re.compile(
    r"entropy_bottleneck\.(?:_(?P<old>matrix|bias|factor)(?P<old_index>\d+)"
    r"|(?P<new>matrices|biases|factors)\.(?P<new_index>\d+))$"
)
_PRIOR_KINDS = {"matrices": "matrix", "biases": "bias", "factors": "factor"}


@dataclass
class LoadedCheckpoint:
    model: ScaleHyperprior
    config: ModelConfig
    trainer_state: Optional[TrainState] = None
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path,
    model: ScaleHyperprior,
    trainer_state: Optional[TrainState] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": model.config.model_dump_json(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "trainer_state": trainer_state.model_dump_json() if trainer_state else "",
        "meta": json.dumps(meta or {}, sort_keys=True),
    }
    # write-then-rename so an interrupted save never leaves a truncated archive
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    torch.save(archive, tmp_path)
    tmp_path.replace(path)
    logger.debug(f"Saved checkpoint {path}")
    return path


def load_checkpoint(path, map_location: str = "cpu") -> LoadedCheckpoint:
    """
    Load a checkpoint written by save_checkpoint.

    Args:
        path: Archive path
        map_location: Device for the loaded tensors

    Returns:
        LoadedCheckpoint with the model in eval mode

    Raises:
        CheckpointSchemaError: Unknown schema version, missing fields or mismatched tensors
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointSchemaError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointSchemaError(f"{path} is not a readable checkpoint archive: {e}") from e

    if not isinstance(archive, dict) or "schema_version" not in archive:
        raise CheckpointSchemaError(
            f"{path} has no schema_version; use 'kdlic import-teacher' for published weights"
        )
    version = archive["schema_version"]
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointSchemaError(
            f"{path} has schema_version {version}, this build reads {CHECKPOINT_SCHEMA_VERSION}"
        )

    try:
        config = ModelConfig.model_validate_json(archive["model_config"])
        trainer_state = (
            TrainState.model_validate_json(archive["trainer_state"])
            if archive.get("trainer_state")
            else None
        )
        meta = json.loads(archive.get("meta") or "{}")
    except (KeyError, ValidationError, json.JSONDecodeError) as e:
        raise CheckpointSchemaError(f"{path} has a malformed header: {e}") from e

    model = build_model(config)
    try:
        model.load_state_dict(archive["state_dict"], strict=True)
    except (KeyError, RuntimeError) as e:
        raise CheckpointSchemaError(f"{path} tensors do not match its model_config: {e}") from e
    model.to(map_location).eval()
    return LoadedCheckpoint(model=model, config=config, trainer_state=trainer_state, meta=meta)


def prior_key(key: str) -> Optional[Tuple[str, int]]:
    """(kind, stage) of a factorized-prior parameter key under either naming, else None."""
    match = _PRIOR_KEY.search(key)
    if match is None:
        return None
    if match["old"]:
        return match["old"], int(match["old_index"])
    return _PRIOR_KINDS[match["new"]], int(match["new_index"])


def _normalize_keys(
    state_dict: Dict[str, torch.Tensor], expected: Iterable[str]
) -> Dict[str, torch.Tensor]:
    native = {prior_key(k): k for k in expected if prior_key(k) is not None}
    normalized = {}
    for key, value in state_dict.items():
        parsed = prior_key(key)
        if parsed in native:
            key = native[parsed]
        normalized[key] = value
    return normalized


def infer_model_config(state_dict: Dict[str, torch.Tensor], role: str = "teacher") -> ModelConfig:
    """Read N, M and the hyper-latent width off the first/last conv weights."""
    try:
        channels_n = state_dict["g_a.0.weight"].shape[0]
        latent_m = state_dict["g_a.6.weight"].shape[0]
        hyper_out = state_dict["h_a.4.weight"].shape[0]
    except KeyError as e:
        raise CheckpointSchemaError(
            f"cannot infer the architecture, missing tensor {e}; is this a scale-hyperprior state dict?"
        ) from e
    return ModelConfig(
        channels_n=channels_n, latent_m=latent_m, hyper_out_channels=hyper_out, role=role
    )


def import_pretrained(source, destination, quality: Optional[int] = None) -> LoadedCheckpoint:
    """
    Convert a published scale-hyperprior state dict into a native checkpoint.

    Args:
        source: Path to the published archive (raw state dict or {"state_dict": ...})
        destination: Path of the native checkpoint to write
        quality: Zoo quality the weights were trained at; recorded with its lambda

    Returns:
        The imported checkpoint
    """
    source = Path(source)
    if not source.exists():
        raise CheckpointSchemaError(f"pre-trained archive not found: {source}")
    try:
        raw = torch.load(source, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointSchemaError(f"{source} is not a readable tensor archive: {e}") from e
    if isinstance(raw, dict) and isinstance(raw.get("state_dict"), dict):
        raw = raw["state_dict"]
    if not isinstance(raw, dict):
        raise CheckpointSchemaError(f"{source} does not contain a state dict")

    state_dict = {
        (k[len("module."):] if k.startswith("module.") else k): v for k, v in raw.items()
    }
    config = infer_model_config(state_dict)
    model = build_model(config)

    # buffers (coder tables, bounds, pedestals) are rebuilt from the config
    expected = dict(model.named_parameters())
    state_dict = _normalize_keys(state_dict, expected)
    missing = sorted(k for k in expected if k not in state_dict)
    if missing:
        raise CheckpointSchemaError(f"{source} is missing tensors: {', '.join(missing)}")
    dropped = sorted(k for k in state_dict if k not in expected)
    if dropped:
        logger.info(f"Keeping native values for {len(dropped)} buffers: {', '.join(dropped[:8])}")

    filtered = {k: v for k, v in state_dict.items() if k in expected}
    for key, value in filtered.items():
        if value.shape != expected[key].shape:
            raise CheckpointSchemaError(
                f"{key}: shape {tuple(value.shape)} does not match {tuple(expected[key].shape)}"
            )
    model.load_state_dict(filtered, strict=False)
    model.eval()

    meta: Dict[str, Any] = {"source": source.name}
    if quality is not None:
        meta["quality"] = quality
        meta["rd_lambda"] = rd_lambda_for_quality(quality)

    save_checkpoint(destination, model, meta=meta)
    logger.info(
        f"Imported teacher N={config.channels_n} M={config.latent_m} "
        f"hyper={config.hyper_out_channels} from {source} -> {destination}"
    )
    return LoadedCheckpoint(model=model, config=config, meta=meta)
