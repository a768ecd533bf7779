"""Small strided CNN that turns one frame into a [C, H, W] feature map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module, he_conv, uniform_dense, zeros
from .tensor import BatchNormState, ShapeError, Tensor


@dataclass
class BackboneConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 32)
    image_size: tuple[int, int] = (64, 32)
    num_identities: int = 8

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or min(self.widths) <= 0:
            raise ValueError(f"need at least two positive stage widths, got {self.widths}")
        if min(self.image_size) <= 0 or self.in_channels <= 0:
            raise ValueError("image size and input channels must be positive")

    @property
    def channels(self) -> int:
        return self.widths[-1]

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.image_size
        for _ in self.widths:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w


@dataclass
class FrameFeatures:
    values: Tensor
    penultimate: Tensor | None = field(default=None, repr=False)


class Backbone(Module):
    """Stages of 3x3 stride-2 conv, BN, ReLU; weights shared by every frame."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        cin = config.in_channels
        self.stages: list[tuple[str, int, int]] = []
        for i, width in enumerate(config.widths):
            setattr(self, f"conv{i}_w", he_conv(rng, (width, cin, 3, 3), f"conv{i}_w"))
            setattr(self, f"conv{i}_b", zeros(width, f"conv{i}_b"))
            setattr(self, f"bn{i}", BatchNormState.create(width))
            self.stages.append((f"conv{i}", cin, width))
            cin = width
        pen = config.widths[-2]
        self.aux_w = uniform_dense(rng, config.num_identities, pen, "aux_w")
        self.aux_b = zeros(config.num_identities, "aux_b")

    def extract(self, frames: Tensor, training: bool = False) -> FrameFeatures:
        """Map [3, h, w] or [B, 3, h, w] images to feature maps.

        The penultimate stage output is kept for the auxiliary head.
        """
        expect = (self.config.in_channels, *self.config.image_size)
        if frames.shape[-3:] != expect or frames.ndim not in (3, 4):
            raise ShapeError(f"backbone expects [..., {expect}], got {frames.shape}")
        x = frames
        pen = None
        for i, _ in enumerate(self.config.widths):
            x = T.conv2d(x, getattr(self, f"conv{i}_w"), getattr(self, f"conv{i}_b"), stride=2, pad=1)
            x = T.batchnorm(x, getattr(self, f"bn{i}"), training, axis=-3)
            x = T.relu(x)
            if i == len(self.config.widths) - 2:
                pen = x
        return FrameFeatures(x, pen)

    def aux_logits(self, penultimate: Tensor) -> Tensor:
        """Global-average-pool the penultimate stage and apply one dense layer."""
        pooled = T.mean(penultimate, axis=(-2, -1))
        return T.dense(pooled, self.aux_w, self.aux_b)
