"""
Image quality and rate metrics, RD aggregation over an evaluation set and
Bjontegaard deltas between RD curves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger
from PIL import Image
from pytorch_msssim import ms_ssim
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator
from torch import Tensor

from src.core.errors import (
    ImageEvaluationError,
    KdlicError,
    NoOverlapError,
    PreconditionError,
    ShapeError,
)
from src.core.schemas import RDCurve, RDPoint
from src.models.hyperprior import CompressionOutputs, forward
from src.services.data import EvalImage, require_non_empty, to_uint8

PSNR_CAP_DB = 100.0
# 5 dyadic scales with an 11-tap gaussian window
MSSSIM_MIN_SIDE = 161

BDVariant = Literal["cubic", "pchip"]


def psnr(x: Tensor, x_hat: Tensor) -> float:
    """PSNR in dB on the [0, 1] scale, capped at 100 dB for identical images."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"psnr: shapes differ, {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = torch.mean((x.double() - x_hat.double()) ** 2).item()
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10 * math.log10(1.0 / mse))


def msssim(x: Tensor, x_hat: Tensor) -> float:
    """
    5-scale MS-SSIM with the canonical scale weights.

    Args:
        x: Reference image (3, H, W) or batch (B, 3, H, W) in [0, 1]
        x_hat: Distorted image, same shape

    Returns:
        MS-SSIM in [0, 1]

    Raises:
        ShapeError: If the shapes differ
        PreconditionError: If a side is shorter than 161 pixels
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"msssim: shapes differ, {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    if min(x.shape[-2:]) < MSSSIM_MIN_SIDE:
        raise PreconditionError(
            f"MS-SSIM needs both sides >= {MSSSIM_MIN_SIDE} pixels, got {tuple(x.shape[-2:])}"
        )
    value = ms_ssim(x.float(), x_hat.float(), data_range=1.0, size_average=True)
    return float(value.clamp(0.0, 1.0))


def estimate_bpp(outputs: CompressionOutputs, num_pixels: int) -> float:
    """Likelihood-estimated bits per pixel, summed in float64."""
    if num_pixels <= 0:
        raise PreconditionError("num_pixels must be positive")
    bits = -(
        torch.log2(outputs.y_likelihoods.double()).sum()
        + torch.log2(outputs.z_likelihoods.double()).sum()
    )
    return float(bits) / num_pixels


def evaluate_images(
    model: torch.nn.Module,
    eval_set: Sequence[EvalImage],
    device: str = "cpu",
    save_dir: Optional[Path] = None,
) -> pd.DataFrame:
    """
    Per-image eval-mode metrics.

    Args:
        model: Compression model
        eval_set: Images to evaluate
        device: Device to run on
        save_dir: If given, reconstructions are written there as PNG

    Returns:
        DataFrame with columns name, bpp, psnr, msssim (NaN when the image is too small)
    """
    require_non_empty(eval_set)
    if save_dir is not None:
        save_dir = Path(save_dir)
        save_dir.mkdir(parents=True, exist_ok=True)

    model.eval()
    rows = []
    with torch.inference_mode():
        for item in eval_set:
            try:
                x = item.image.to(device)
                outputs = forward(model, x, "eval")
                x_hat = outputs.x_hat.clamp(0, 1)
                score = (
                    msssim(x, x_hat) if min(x.shape[-2:]) >= MSSSIM_MIN_SIDE else float("nan")
                )
                rows.append(
                    {
                        "name": item.name,
                        "bpp": estimate_bpp(outputs, item.num_pixels),
                        "psnr": psnr(x, x_hat),
                        "msssim": score,
                    }
                )
            except KdlicError as e:
                raise ImageEvaluationError(item.name, e) from e

            if save_dir is not None:
                Image.fromarray(to_uint8(x_hat)).save(save_dir / f"{Path(item.name).stem}.png")
    return pd.DataFrame(rows, columns=["name", "bpp", "psnr", "msssim"])


def summarize(per_image: pd.DataFrame, label: str = "") -> RDPoint:
    """Arithmetic means of the per-image table."""
    if per_image["msssim"].isna().any():
        logger.warning("MS-SSIM skipped: some evaluation images are smaller than 161 pixels")
        score = None
    else:
        score = float(per_image["msssim"].mean())
    return RDPoint(
        bpp=float(per_image["bpp"].mean()),
        psnr=float(per_image["psnr"].mean()),
        msssim=score,
        label=label,
    )


def evaluate_model(
    model: torch.nn.Module,
    eval_set: Sequence[EvalImage],
    device: str = "cpu",
    label: str = "",
) -> RDPoint:
    return summarize(evaluate_images(model, eval_set, device=device), label=label)


# Bjontegaard deltas


@dataclass
class BDReport:
    bd_rate: float  # percent
    bd_psnr: float  # dB
    psnr_interval: Tuple[float, float]
    log_rate_interval: Tuple[float, float]
    variant: str


def _curve_arrays(curve: RDCurve) -> Tuple[np.ndarray, np.ndarray]:
    if len(curve.points) < 2:
        raise PreconditionError(
            f"curve '{curve.model_id}' has {len(curve.points)} point(s); BD metrics need at least 2"
        )
    points = sorted(curve.points, key=lambda p: p.bpp)
    bpp = np.array([p.bpp for p in points], dtype=np.float64)
    quality = np.array([p.psnr for p in points], dtype=np.float64)
    if (bpp <= 0).any():
        raise PreconditionError(f"curve '{curve.model_id}' has a non-positive bpp")
    if (np.diff(bpp) == 0).any():
        raise PreconditionError(f"curve '{curve.model_id}' has duplicate bpp values")
    if (np.diff(quality) <= 0).any():
        logger.warning(f"RD curve '{curve.model_id}' is not monotone in PSNR")
    return np.log10(bpp), quality


def _overlap(a: np.ndarray, b: np.ndarray, axis: str) -> Tuple[float, float]:
    low = max(a.min(), b.min())
    high = min(a.max(), b.max())
    if low >= high:
        raise NoOverlapError(axis, (a.min(), a.max()), (b.min(), b.max()))
    return float(low), float(high)


def _integral(x: np.ndarray, y: np.ndarray, low: float, high: float, variant: BDVariant) -> float:
    order = np.argsort(x)
    x, y = x[order], y[order]
    if len(x) < 4:
        grid = np.unique(np.concatenate([[low, high], x[(x > low) & (x < high)]]))
        return float(trapezoid(np.interp(grid, x, y), grid))
    if variant == "pchip":
        return float(PchipInterpolator(x, y).integrate(low, high))
    antiderivative = np.polyint(np.polyfit(x, y, 3))
    return float(np.polyval(antiderivative, high) - np.polyval(antiderivative, low))


def _average_gap(
    ref_x: np.ndarray,
    ref_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    axis: str,
    variant: BDVariant,
) -> Tuple[float, Tuple[float, float]]:
    if min(len(ref_x), len(test_x)) < 4:
        logger.warning("Fewer than 4 RD points, falling back to piecewise-linear BD integration")
    low, high = _overlap(ref_x, test_x, axis)
    gap = _integral(test_x, test_y, low, high, variant) - _integral(ref_x, ref_y, low, high, variant)
    return gap / (high - low), (low, high)


def bd_rate(reference: RDCurve, test: RDCurve, variant: BDVariant = "cubic") -> float:
    """Average bitrate difference (%) of test against reference at equal PSNR."""
    ref_log_rate, ref_psnr = _curve_arrays(reference)
    test_log_rate, test_psnr = _curve_arrays(test)
    gap, _ = _average_gap(ref_psnr, ref_log_rate, test_psnr, test_log_rate, "psnr", variant)
    return (10**gap - 1) * 100


def bd_psnr(reference: RDCurve, test: RDCurve, variant: BDVariant = "cubic") -> float:
    """Average PSNR difference (dB) of test against reference at equal log-rate."""
    ref_log_rate, ref_psnr = _curve_arrays(reference)
    test_log_rate, test_psnr = _curve_arrays(test)
    gap, _ = _average_gap(ref_log_rate, ref_psnr, test_log_rate, test_psnr, "log10(bpp)", variant)
    return gap


def bd_report(reference: RDCurve, test: RDCurve, variant: BDVariant = "cubic") -> BDReport:
    ref_log_rate, ref_psnr = _curve_arrays(reference)
    test_log_rate, test_psnr = _curve_arrays(test)
    rate_gap, psnr_interval = _average_gap(
        ref_psnr, ref_log_rate, test_psnr, test_log_rate, "psnr", variant
    )
    psnr_gap, rate_interval = _average_gap(
        ref_log_rate, ref_psnr, test_log_rate, test_psnr, "log10(bpp)", variant
    )
    return BDReport(
        bd_rate=(10**rate_gap - 1) * 100,
        bd_psnr=psnr_gap,
        psnr_interval=psnr_interval,
        log_rate_interval=rate_interval,
        variant=variant,
    )
