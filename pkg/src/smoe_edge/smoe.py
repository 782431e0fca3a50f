"""Spatially-adaptive mixture-of-experts skip block.

A 1x1 gating conv reads the resized edge-guidance signal and softly blends a
pixel-local boundary expert (1x1 conv) with a dilated context expert
(3x3 conv, dilation 2):  y = g * boundary(x) + (1 - g) * context(x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


@dataclass
class SmoeParams:
    """Per-level expert and gate weights; experts preserve channel count."""
    gate_weight: Tensor      # [1, 1, 1, 1]
    gate_bias: Tensor        # [1]
    context_weight: Tensor   # [C, C, 3, 3], applied with dilation 2
    context_bias: Tensor     # [C]
    boundary_weight: Tensor  # [C, C, 1, 1]
    boundary_bias: Tensor    # [C]

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.gate.weight": self.gate_weight,
            f"{prefix}.gate.bias": self.gate_bias,
            f"{prefix}.context.weight": self.context_weight,
            f"{prefix}.context.bias": self.context_bias,
            f"{prefix}.boundary.weight": self.boundary_weight,
            f"{prefix}.boundary.bias": self.boundary_bias,
        }


@dataclass
class GateMap:
    """Soft expert-selection mask in [0,1]; level 0 is the highest resolution."""
    values: Tensor  # [N, 1, H, W]
    level: int


def he_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_smoe_params(rng: np.random.Generator, channels: int) -> SmoeParams:
    # Gate bias 0 keeps the initial blend at 0.5 everywhere.
    return SmoeParams(
        gate_weight=Tensor(he_uniform(rng, (1, 1, 1, 1)), requires_grad=True),
        gate_bias=Tensor(np.zeros(1), requires_grad=True),
        context_weight=Tensor(he_uniform(rng, (channels, channels, 3, 3)), requires_grad=True),
        context_bias=Tensor(np.zeros(channels), requires_grad=True),
        boundary_weight=Tensor(he_uniform(rng, (channels, channels, 1, 1)), requires_grad=True),
        boundary_bias=Tensor(np.zeros(channels), requires_grad=True),
    )


def expert_context(x: Tensor, params: SmoeParams) -> Tensor:
    """Dilated 3x3 conv + relu; receptive field taps at offsets {-2,0,+2}."""
    return ad.relu(ad.conv2d(x, params.context_weight, params.context_bias,
                             stride=1, padding=2, dilation=2))


def expert_boundary(x: Tensor, params: SmoeParams) -> Tensor:
    """1x1 conv + relu; strictly pixel-local."""
    return ad.relu(ad.conv2d(x, params.boundary_weight, params.boundary_bias))


def smoe_forward(x: Tensor, guidance: Tensor, params: SmoeParams,
                 level: int = 0) -> tuple[Tensor, GateMap]:
    """Blend the two experts under the guidance-driven gate.

    `guidance` must already be resized to x's spatial extent ([N,1,H,W]).
    """
    if guidance.data.ndim != 4 or guidance.shape[1] != 1:
        raise ShapeError(f"smoe_forward: guidance must be [N,1,H,W], got {guidance.shape}")
    if guidance.shape[0] != x.shape[0] or guidance.shape[2:] != x.shape[2:]:
        raise ShapeError(f"smoe_forward: guidance {guidance.shape} does not match features {x.shape}; "
                         "resize the guidance to the feature resolution first")

    gate = ad.sigmoid(ad.conv2d(guidance, params.gate_weight, params.gate_bias))
    sharp = expert_boundary(x, params)
    smooth = expert_context(x, params)
    y = gate * sharp + (1.0 - gate) * smooth
    return y, GateMap(values=gate, level=level)
