"""
Entropy models used to estimate the rate of the latents.

Both come from compressai, configured with a 2^-16 likelihood floor (at most
16 bits per element) and a 0.11 scale floor. The factorized prior rounds z
onto the integer grid in eval mode instead of around its learned median.
"""
from __future__ import annotations

from typing import Optional

from compressai.entropy_models import EntropyBottleneck, GaussianConditional
from torch import Tensor

LIKELIHOOD_BOUND = 2.0**-16
SCALE_BOUND = 0.11


class FactorizedPrior(EntropyBottleneck):
    """EntropyBottleneck whose eval-mode quantization is plain rounding."""

    def __init__(self, channels: int, likelihood_bound: float = LIKELIHOOD_BOUND, **kwargs):
        super().__init__(channels, likelihood_bound=likelihood_bound, **kwargs)

    def quantize(self, inputs: Tensor, mode: str, means: Optional[Tensor] = None) -> Tensor:
        if mode == "dequantize":
            return inputs.round()
        return super().quantize(inputs, mode, means)


def gaussian_conditional(
    scale_bound: float = SCALE_BOUND, likelihood_bound: float = LIKELIHOOD_BOUND
) -> GaussianConditional:
    """Zero-mean Gaussian conditional for y; no scale table since nothing is range-coded."""
    return GaussianConditional(None, scale_bound=scale_bound, likelihood_bound=likelihood_bound)
