"""Spatial-temporal integration: two 3D conv blocks and a global mean."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, he_conv, zeros
from .tensor import BatchNormState, ShapeError, Tensor

DESCRIPTOR_DIM = 256


class StimParams(Module):
    def __init__(self, channels: int, rng: np.random.Generator | None = None, width: int = DESCRIPTOR_DIM):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.width = width
        self.block1_w = he_conv(rng, (width, channels, 1, 1, 1), "block1_w")
        self.block1_b = zeros(width, "block1_b")
        self.block1_bn = BatchNormState.create(width)
        self.block2_w = he_conv(rng, (width, width, 3, 3, 3), "block2_w")
        self.block2_b = zeros(width, "block2_b")
        self.block2_bn = BatchNormState.create(width)


def stim_blocks(s: Tensor, params: StimParams, training: bool = False) -> Tensor:
    """Spatial-temporal feature maps O with the [T, H, W] extent of the input."""
    if s.ndim not in (4, 5):
        raise ShapeError(f"STIM expects [C,T,H,W] or [B,C,T,H,W], got {s.shape}")
    if s.shape[-4] != params.channels:
        raise ShapeError(f"STIM built for {params.channels} channels, input has {s.shape[-4]}")
    o = T.conv3d(s, params.block1_w, params.block1_b)
    o = T.relu(T.batchnorm(o, params.block1_bn, training, axis=-4))
    o = T.conv3d(o, params.block2_w, params.block2_b, stride=1, pad=1)
    return T.relu(T.batchnorm(o, params.block2_bn, training, axis=-4))


def stim_forward(s: Tensor, params: StimParams, training: bool = False) -> Tensor:
    """Video descriptor: mean of the block outputs over time and space."""
    return T.mean(stim_blocks(s, params, training), axis=(-3, -2, -1))


def baseline_pool(s: Tensor) -> Tensor:
    """Average-pool an unrefined [C,T,H,W] sequence to a C-vector."""
    if s.ndim not in (4, 5):
        raise ShapeError(f"baseline_pool expects [C,T,H,W] or [B,C,T,H,W], got {s.shape}")
    return T.mean(s, axis=(-3, -2, -1))
