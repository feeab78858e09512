"""
Scale-hyperprior compression model.

    x -> g_a -> y -> h_a(|y|) -> z -> [factorized prior] -> z_hat -> h_s -> scales
    y -> [gaussian conditional | scales] -> y_hat -> g_s -> x_hat

Submodule names (g_a, g_s, h_a, h_s, entropy_bottleneck) follow the published
hyperprior checkpoints so pre-trained teachers import without remapping.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from compressai.entropy_models import EntropyBottleneck
from compressai.layers import GDN
from compressai.models.utils import conv, deconv
from loguru import logger
from torch import Tensor

from src.core.config import QUALITY_TO_ARCHITECTURE, rd_lambda_for_quality
from src.core.errors import ConfigurationError, NumericInputError, ShapeError
from src.core.schemas import ModelConfig, parse_schema
from src.models.entropy_models import FactorizedPrior, gaussian_conditional

# 4 stride-2 stages in g_a and 2 more in h_a
STRIDE_MULTIPLE = 64

MODES = ("train", "eval")


@dataclass
class CompressionOutputs:
    """Everything one forward pass produces.

    y and z hold the pre-quantization latents; they default to y_hat / z_hat
    when an instance is built by hand without them.
    """

    x_hat: Tensor
    y_hat: Tensor
    z_hat: Tensor
    y_likelihoods: Tensor
    z_likelihoods: Tensor
    y: Optional[Tensor] = None
    z: Optional[Tensor] = None
    mode: str = field(default="eval")

    def __post_init__(self):
        if self.y is None:
            self.y = self.y_hat
        if self.z is None:
            self.z = self.z_hat

    def detach(self) -> "CompressionOutputs":
        return CompressionOutputs(
            x_hat=self.x_hat.detach(),
            y_hat=self.y_hat.detach(),
            z_hat=self.z_hat.detach(),
            y_likelihoods=self.y_likelihoods.detach(),
            z_likelihoods=self.z_likelihoods.detach(),
            y=self.y.detach(),
            z=self.z.detach(),
            mode=self.mode,
        )


class ScaleHyperprior(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        N = config.channels_n
        M = config.latent_m
        H = config.hyper_out_channels

        self.g_a = nn.Sequential(
            conv(3, N),
            GDN(N),
            conv(N, N),
            GDN(N),
            conv(N, N),
            GDN(N),
            conv(N, M),
        )
        self.g_s = nn.Sequential(
            deconv(M, N),
            GDN(N, inverse=True),
            deconv(N, N),
            GDN(N, inverse=True),
            deconv(N, N),
            GDN(N, inverse=True),
            deconv(N, 3),
        )
        self.h_a = nn.Sequential(
            conv(M, N, stride=1, kernel_size=3),
            nn.ReLU(inplace=True),
            conv(N, N),
            nn.ReLU(inplace=True),
            conv(N, H),
        )
        self.h_s = nn.Sequential(
            deconv(H, N),
            nn.ReLU(inplace=True),
            deconv(N, N),
            nn.ReLU(inplace=True),
            conv(N, M, stride=1, kernel_size=3),
            nn.ReLU(inplace=True),
        )
        self.entropy_bottleneck = FactorizedPrior(H)
        self.gaussian_conditional = gaussian_conditional()

    def forward(self, x: Tensor, mode: Optional[str] = None) -> CompressionOutputs:
        mode = mode or ("train" if self.training else "eval")
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode '{mode}', expected train or eval", field="mode")
        _check_input(x)
        training = mode == "train"

        height, width = x.shape[-2:]
        x_padded = _pad(x)

        y = self.g_a(x_padded)
        z = self.h_a(torch.abs(y))
        z_hat, z_likelihoods = self.entropy_bottleneck(z, training=training)
        scales = self.h_s(z_hat)
        y_hat, y_likelihoods = self.gaussian_conditional(y, scales, training=training)
        x_hat = self.g_s(y_hat)[..., :height, :width]

        return CompressionOutputs(
            x_hat=x_hat,
            y_hat=y_hat,
            z_hat=z_hat,
            y_likelihoods=y_likelihoods,
            z_likelihoods=z_likelihoods,
            y=y,
            z=z,
            mode=mode,
        )

    def aux_loss(self) -> Tensor:
        return sum(m.loss() for m in self.modules() if isinstance(m, EntropyBottleneck))


def _check_input(x: Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected an image batch (B, 3, H, W), got {tuple(x.shape)}")
    if min(x.shape[-2:]) < STRIDE_MULTIPLE:
        raise ShapeError(
            f"image sides must be at least {STRIDE_MULTIPLE} pixels, got {tuple(x.shape[-2:])}"
        )
    if not torch.isfinite(x).all():
        raise NumericInputError("input batch contains NaN or infinite values")


def _pad(x: Tensor) -> Tensor:
    height, width = x.shape[-2:]
    pad_h = (-height) % STRIDE_MULTIPLE
    pad_w = (-width) % STRIDE_MULTIPLE
    if pad_h == 0 and pad_w == 0:
        return x
    return F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")


def build_model(config) -> ScaleHyperprior:
    """
    Build a scale-hyperprior model.

    Args:
        config: ModelConfig or a mapping validated into one

    Returns:
        Freshly initialized ScaleHyperprior

    Raises:
        ConfigurationError: If the config is invalid
    """
    if not isinstance(config, ModelConfig):
        config = parse_schema(ModelConfig, config)
    model = ScaleHyperprior(config)
    logger.debug(
        f"Built {config.role} N={config.channels_n} M={config.latent_m} "
        f"hyper={config.hyper_out_channels}: {count_parameters(model):,} parameters"
    )
    return model


def forward(model: ScaleHyperprior, x: Tensor, mode: str) -> CompressionOutputs:
    """One pass with noise (train) or rounding (eval), whatever the module's training flag."""
    return model(x, mode=mode)


def zoo_config(quality: int) -> ModelConfig:
    """Architecture of the public MSE model zoo entry for a quality in 1..8."""
    rd_lambda_for_quality(quality)
    n, m = QUALITY_TO_ARCHITECTURE[quality]
    return ModelConfig(channels_n=n, latent_m=m, hyper_out_channels=n, role="teacher")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def memory_bytes(model: nn.Module) -> int:
    return sum(p.numel() * p.element_size() for p in model.parameters())


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over every named tensor of the state dict, in key order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
