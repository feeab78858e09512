"""
Traditional codec baselines (JPEG, WebP, JPEG 2000) through Pillow, measured
with the same RD and profiling pipeline as the learned models.
"""
from __future__ import annotations

import io
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from PIL import Image, features

from src.core.errors import CodecUnavailableError, PreconditionError, ShapeError
from src.core.schemas import CodecSpec, ProfileReport, RDCurve, RDPoint
from src.services.data import EvalImage, to_tensor, to_uint8
from src.services.metrics import MSSSIM_MIN_SIDE, msssim, psnr
from src.services.profiler import NullPowerMeter, PowerMeter, report_from_session, run_timed

# Pillow feature name and save() format of each codec
_PILLOW_CODECS: Dict[str, Tuple[str, str]] = {
    "jpeg": ("jpg", "JPEG"),
    "webp": ("webp", "WEBP"),
    "jpeg2000": ("jpg_2000", "JPEG2000"),
}


def require_codec(name: str) -> None:
    feature, _ = _PILLOW_CODECS[name]
    if not features.check(feature):
        raise CodecUnavailableError(name)


def _save_options(spec: CodecSpec) -> Dict:
    flags = dict(spec.mode_flags)
    if spec.name == "jpeg":
        return {"quality": spec.quality_param, "optimize": False, **flags}
    if spec.name == "webp":
        options = {"quality": spec.quality_param, "method": 4, **flags}
        if options.get("lossless"):
            options["exact"] = True
        return options
    # jpeg2000: 0 keeps the library defaults (reversible 5/3 wavelet)
    if spec.quality_param == 0:
        return flags
    return {
        "quality_mode": "rates",
        "quality_layers": [spec.quality_param],
        "irreversible": True,
        **flags,
    }


def encode(image: Image.Image, spec: CodecSpec) -> bytes:
    _, fmt = _PILLOW_CODECS[spec.name]
    buffer = io.BytesIO()
    image.save(buffer, format=fmt, **_save_options(spec))
    return buffer.getvalue()


def decode(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as decoded:
        return np.asarray(decoded.convert("RGB"), dtype=np.uint8).copy()


def codec_roundtrip(image: np.ndarray, spec: CodecSpec) -> Tuple[np.ndarray, int]:
    """
    Encode then decode one image in memory.

    Args:
        image: (H, W, 3) uint8 RGB array
        spec: Codec and its settings

    Returns:
        (decoded (H, W, 3) uint8 array, compressed size in bytes)

    Raises:
        CodecUnavailableError: If this Pillow build lacks the codec
        ShapeError: If the input is not 8-bit RGB
    """
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"codecs take (H, W, 3) uint8 images, got {image.dtype} {image.shape}")
    require_codec(spec.name)
    data = encode(Image.fromarray(image), spec)
    decoded = decode(data)
    if decoded.shape != image.shape:
        raise ShapeError(f"{spec.label} decoded to {decoded.shape}, expected {image.shape}")
    return decoded, len(data)


def _unique_specs(specs: Sequence[CodecSpec]) -> List[CodecSpec]:
    unique, seen = [], set()
    for spec in specs:
        key = spec.model_dump_json()
        if key in seen:
            logger.warning(f"Duplicate codec setting {spec.label} ignored")
            continue
        seen.add(key)
        unique.append(spec)
    return unique


def codec_point(eval_set: Sequence[EvalImage], spec: CodecSpec) -> RDPoint:
    """Average bpp / PSNR / MS-SSIM of one codec setting over the eval set."""
    rates, qualities, scores = [], [], []
    for item in eval_set:
        original = to_uint8(item.image)
        decoded, size = codec_roundtrip(original, spec)
        x, x_hat = item.image[0], to_tensor(decoded)
        rates.append(8.0 * size / item.num_pixels)
        qualities.append(psnr(x, x_hat))
        if min(x.shape[-2:]) >= MSSSIM_MIN_SIDE:
            scores.append(msssim(x, x_hat))
    return RDPoint(
        bpp=float(np.mean(rates)),
        psnr=float(np.mean(qualities)),
        msssim=float(np.mean(scores)) if len(scores) == len(rates) else None,
        label=spec.label,
    )


def codec_rd_curve(eval_set: Sequence[EvalImage], specs: Sequence[CodecSpec]) -> RDCurve:
    """One RD point per distinct codec setting, averaged over the eval set."""
    if not eval_set:
        raise PreconditionError("codec sweep needs at least one image")
    specs = _unique_specs(specs)
    if not specs:
        raise PreconditionError("codec sweep needs at least one codec setting")
    if len(specs) == 1:
        logger.warning("Single codec setting: the curve has one point and cannot be used for BD metrics")

    points = []
    for spec in specs:
        point = codec_point(eval_set, spec)
        logger.info(f"{spec.label}: {point.bpp:.4f} bpp, {point.psnr:.2f} dB")
        points.append(point)
    model_id = "+".join(sorted({spec.name for spec in specs}))
    return RDCurve(points=points, model_id=model_id)


def profile_codec(
    eval_set: Sequence[EvalImage],
    spec: CodecSpec,
    meter: Optional[PowerMeter] = None,
    passes: int = 50,
) -> ProfileReport:
    """Throughput (and energy) of in-memory encode+decode over preloaded images."""
    require_codec(spec.name)
    meter = meter or NullPowerMeter()
    images = [Image.fromarray(to_uint8(item.image)) for item in eval_set]

    def roundtrip(image: Image.Image):
        return decode(encode(image, spec))

    active_meter = None if meter.capability == "null" else meter
    session = run_timed(roundtrip, images, passes, device="cpu", meter=active_meter)
    return report_from_session(spec.label, session, meter, passes, "cpu")
