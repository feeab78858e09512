"""
Rate-distortion and distillation losses.

All losses return tensors so they can be back-propagated; LossBreakdown keeps
every unweighted term next to the weights that combine them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from src.core.errors import DistillationCompatibilityError, NumericInputError
from src.core.schemas import KDWeights
from src.models.hyperprior import CompressionOutputs

# distortion is measured on [0, 1] but lambda is calibrated for 8-bit MSE
PIXEL_SCALE = 255.0**2


@dataclass
class LossBreakdown:
    total: Tensor
    latent_term: Tensor
    hyper_latent_term: Tensor
    reconstruction_term: Tensor
    rate_term: Tensor  # bpp
    distortion_term: Tensor  # MSE on [0, 1]
    rd_term: Tensor
    # (latent, hyper-latent, reconstruction, rd)
    weights: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)

    def weighted_sum(self) -> Tensor:
        w_latent, w_hyper, w_recon, w_rd = self.weights
        return (
            w_latent * self.latent_term
            + w_hyper * self.hyper_latent_term
            + w_recon * self.reconstruction_term
            + w_rd * self.rd_term
        )

    def as_dict(self) -> Dict[str, float]:
        return {
            name: float(getattr(self, name).detach())
            for name in (
                "total",
                "latent_term",
                "hyper_latent_term",
                "reconstruction_term",
                "rate_term",
                "distortion_term",
                "rd_term",
            )
        }


def _check_likelihoods(likelihoods: Tensor, name: str) -> None:
    if likelihoods.numel() == 0:
        return
    invalid = ~torch.isfinite(likelihoods) | (likelihoods <= 0) | (likelihoods > 1)
    if invalid.any():
        raise NumericInputError(
            f"{name} has {int(invalid.sum())} entries outside (0, 1]"
        )


def total_bits(outputs: CompressionOutputs) -> Tensor:
    """Sum of -log2 likelihood over the latent and the hyper-latent."""
    _check_likelihoods(outputs.y_likelihoods, "y_likelihoods")
    _check_likelihoods(outputs.z_likelihoods, "z_likelihoods")
    nats = -(torch.log(outputs.y_likelihoods).sum() + torch.log(outputs.z_likelihoods).sum())
    return nats / math.log(2)


def rd_loss(
    outputs: CompressionOutputs, x: Tensor, rd_lambda: float
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Rate-distortion objective rate + lambda * 255^2 * MSE.

    Args:
        outputs: Forward-pass outputs for the batch x
        x: Original batch (B, C, H, W) in [0, 1]
        rd_lambda: Rate-distortion tradeoff

    Returns:
        (rd, bpp, mse)

    Raises:
        NumericInputError: If any likelihood is outside (0, 1]
    """
    batch, _, height, width = x.shape
    bpp = total_bits(outputs) / (batch * height * width)
    mse = F.mse_loss(outputs.x_hat, x)
    return bpp + rd_lambda * PIXEL_SCALE * mse, bpp, mse


def _require_same_shape(student: Tensor, teacher: Tensor, what: str) -> None:
    if student.shape != teacher.shape:
        raise DistillationCompatibilityError(
            f"{what}: student shape {tuple(student.shape)} does not match teacher {tuple(teacher.shape)}"
        )


def latent_kl(student: Tensor, teacher: Tensor) -> Tensor:
    """KL(student || teacher) between per-channel spatial softmax distributions."""
    log_p_s = F.log_softmax(student.flatten(2), dim=-1)
    log_p_t = F.log_softmax(teacher.flatten(2), dim=-1)
    return (log_p_s.exp() * (log_p_s - log_p_t)).sum(-1).mean()


def _latent_term(student: CompressionOutputs, teacher: CompressionOutputs, w: KDWeights) -> Tensor:
    _require_same_shape(student.y, teacher.y, "latent")
    if w.latent_divergence == "kl":
        return latent_kl(student.y, teacher.y)
    return F.mse_loss(student.y, teacher.y)


def kd_loss_l1(
    student_out: CompressionOutputs,
    teacher_out: CompressionOutputs,
    x: Tensor,
    w: KDWeights,
) -> LossBreakdown:
    """
    Latent + reconstruction distillation:
    total = l1 * D(y_s, y_t) + l2 * MSE(x_hat_s, x_hat_t) + l3 * RD.
    """
    latent = _latent_term(student_out, teacher_out, w)
    _require_same_shape(student_out.x_hat, teacher_out.x_hat, "reconstruction")
    reconstruction = F.mse_loss(student_out.x_hat, teacher_out.x_hat)
    rd, bpp, mse = rd_loss(student_out, x, w.rd_lambda)

    total = w.lambda1 * latent + w.lambda2 * reconstruction + w.lambda3 * rd
    return LossBreakdown(
        total=total,
        latent_term=latent,
        hyper_latent_term=torch.zeros_like(total),
        reconstruction_term=reconstruction,
        rate_term=bpp,
        distortion_term=mse,
        rd_term=rd,
        weights=(w.lambda1, 0.0, w.lambda2, w.lambda3),
    )


def _distill_with_hyper(
    student_out: CompressionOutputs,
    latent_teacher: CompressionOutputs,
    hyper_teacher: CompressionOutputs,
    x: Tensor,
    w: KDWeights,
) -> LossBreakdown:
    if w.lambda4 is None:
        raise DistillationCompatibilityError("hyper-latent distillation needs lambda4 (loss_form L2)")

    latent = _latent_term(student_out, latent_teacher, w)
    _require_same_shape(student_out.z_hat, hyper_teacher.z_hat, "hyper-latent")
    hyper = F.mse_loss(student_out.z_hat, hyper_teacher.z_hat)
    _require_same_shape(student_out.x_hat, latent_teacher.x_hat, "reconstruction")
    reconstruction = F.mse_loss(student_out.x_hat, latent_teacher.x_hat)
    rd, bpp, mse = rd_loss(student_out, x, w.rd_lambda)

    total = w.lambda1 * latent + w.lambda2 * hyper
    total = total + w.lambda3 * reconstruction + w.lambda4 * rd
    return LossBreakdown(
        total=total,
        latent_term=latent,
        hyper_latent_term=hyper,
        reconstruction_term=reconstruction,
        rate_term=bpp,
        distortion_term=mse,
        rd_term=rd,
        weights=(w.lambda1, w.lambda2, w.lambda3, w.lambda4),
    )


def kd_loss_l2(
    student_out: CompressionOutputs,
    teacher_out: CompressionOutputs,
    x: Tensor,
    w: KDWeights,
) -> LossBreakdown:
    """Adds hyper-latent distillation: l1 latent, l2 hyper-latent, l3 reconstruction, l4 RD."""
    return _distill_with_hyper(student_out, teacher_out, teacher_out, x, w)


def hybrid_kd_loss(
    student_out: CompressionOutputs,
    teacher_a_out: CompressionOutputs,
    teacher_b_out: CompressionOutputs,
    x: Tensor,
    w: KDWeights,
) -> LossBreakdown:
    """kd_loss_l2 with the hyper-latent target taken from a second teacher."""
    return _distill_with_hyper(student_out, teacher_a_out, teacher_b_out, x, w)


def plain_rd_breakdown(outputs: CompressionOutputs, x: Tensor, rd_lambda: float) -> LossBreakdown:
    rd, bpp, mse = rd_loss(outputs, x, rd_lambda)
    zero = torch.zeros_like(rd)
    return LossBreakdown(
        total=rd,
        latent_term=zero,
        hyper_latent_term=zero,
        reconstruction_term=zero,
        rate_term=bpp,
        distortion_term=mse,
        rd_term=rd,
    )


def training_loss(
    student_out: CompressionOutputs,
    x: Tensor,
    rd_lambda: float,
    w: Optional[KDWeights] = None,
    teacher_outs: Sequence[CompressionOutputs] = (),
) -> LossBreakdown:
    """Pick the objective from the weights and the number of teacher outputs."""
    if w is None:
        return plain_rd_breakdown(student_out, x, rd_lambda)
    if len(teacher_outs) == 2:
        return hybrid_kd_loss(student_out, teacher_outs[0], teacher_outs[1], x, w)
    if len(teacher_outs) != 1:
        raise DistillationCompatibilityError(
            f"distillation needs one or two teacher outputs, got {len(teacher_outs)}"
        )
    if w.loss_form == "L2":
        return kd_loss_l2(student_out, teacher_outs[0], x, w)
    return kd_loss_l1(student_out, teacher_outs[0], x, w)
