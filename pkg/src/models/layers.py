"""
Functional view of the GDN layers used by the scale-hyperprior transforms.

The layers themselves are compressai's GDN (beta and gamma stored through a
squared-plus-pedestal reparameterization); this module reads their effective
parameters and evaluates the normalization from them.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from compressai.layers import GDN
from torch import Tensor

from src.core.errors import ShapeError


@dataclass
class GDNParams:
    """Effective GDN parameters: beta (C,) strictly positive, gamma (C, C) non-negative."""

    beta: Tensor
    gamma: Tensor


def gdn_params(layer: GDN) -> GDNParams:
    return GDNParams(beta=layer.beta_reparam(layer.beta), gamma=layer.gamma_reparam(layer.gamma))


@torch.no_grad()
def load_gdn_params(layer: GDN, params: GDNParams) -> GDN:
    """Store effective beta/gamma into a layer through its reparameterization."""
    channels = layer.beta.numel()
    if params.beta.shape != (channels,) or params.gamma.shape != (channels, channels):
        raise ShapeError(
            f"GDN with {channels} channels needs beta ({channels},) and gamma ({channels}, {channels})"
        )
    layer.beta.copy_(layer.beta_reparam.init(params.beta))
    layer.gamma.copy_(layer.gamma_reparam.init(params.gamma))
    return layer


def gdn(x: Tensor, params: GDNParams, inverse: bool = False) -> Tensor:
    """
    Generalized divisive normalization over the channel axis.

    forward: y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)
    inverse: y_i = x_i * sqrt(beta_i + sum_j gamma_ij x_j^2)

    Args:
        x: Tensor of shape (B, C, H, W)
        params: Effective beta/gamma
        inverse: Multiply instead of divide

    Returns:
        Tensor with the shape of x
    """
    channels = params.beta.numel()
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeError(f"GDN expects (B, {channels}, H, W) input, got {tuple(x.shape)}")
    if params.gamma.shape != (channels, channels):
        raise ShapeError(
            f"GDN gamma must be ({channels}, {channels}), got {tuple(params.gamma.shape)}"
        )
    norm = torch.sqrt(F.conv2d(x * x, params.gamma.reshape(channels, channels, 1, 1), params.beta))
    return x * norm if inverse else x / norm
