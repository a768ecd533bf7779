"""Refining recurrent unit.

Each frame's feature map is rewritten as a per-element convex combination of
the current raw map and the previous refined map.  The mixing weight (the
update gate) comes from a small gate model that looks at appearance and
motion differences.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Module, he_conv, uniform_dense, zeros
from .tensor import BatchNormState, ShapeError, Tensor


class RruVariant(str, enum.Enum):
    FULL = "full"
    SPATIAL_ONLY = "spatial_only"
    CHANNEL_ONLY = "channel_only"
    APPEARANCE_DIFF_ONLY = "appearance_diff_only"
    RAW_CONCAT = "raw_concat"

    @property
    def input_multiplier(self) -> int:
        return 1 if self is RruVariant.APPEARANCE_DIFF_ONLY else 2

    @property
    def uses_spatial(self) -> bool:
        return self is not RruVariant.CHANNEL_ONLY

    @property
    def uses_channel(self) -> bool:
        return self is not RruVariant.SPATIAL_ONLY


class GateModelParams(Module):
    """Weights of the update-gate model, shared across all time steps."""

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        variant: RruVariant | str = RruVariant.FULL,
        rng: np.random.Generator | None = None,
        transition_width: int = 256,
        spatial_hidden: int = 128,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = RruVariant(variant)
        self.channels, self.height, self.width = channels, height, width
        self.transition_width = transition_width
        cin = self.variant.input_multiplier * channels
        self.transition_w = he_conv(rng, (transition_width, cin, 1, 1), "transition_w")
        self.transition_b = zeros(transition_width, "transition_b")
        self.transition_bn = BatchNormState.create(transition_width)
        hw = height * width
        if self.variant.uses_spatial:
            self.spatial_w1 = uniform_dense(rng, spatial_hidden, hw, "spatial_w1")
            self.spatial_b1 = zeros(spatial_hidden, "spatial_b1")
            self.spatial_w2 = uniform_dense(rng, hw, spatial_hidden, "spatial_w2")
            self.spatial_b2 = zeros(hw, "spatial_b2")
        if self.variant.uses_channel:
            self.channel_w = uniform_dense(rng, channels, transition_width, "channel_w")
            self.channel_b = zeros(channels, "channel_b")

    def zero_(self) -> "GateModelParams":
        """Set every weight and bias to zero (BN affine left at 1/0)."""
        for name, p in self.named_parameters():
            if not name.startswith("transition_bn"):
                p.data[...] = 0.0
        return self


@dataclass
class GateMap:
    values: Tensor


@dataclass
class RefinedSequence:
    values: Tensor  # [C, T, H, W] or [B, C, T, H, W]
    gates: list[GateMap] = field(default_factory=list)


def _check_params(params: GateModelParams, variant: RruVariant, c: int, h: int, w: int) -> None:
    if (c, h, w) != (params.channels, params.height, params.width):
        raise ShapeError(f"gate model configured for {(params.channels, params.height, params.width)}, got {(c, h, w)}")
    if variant is not params.variant:
        expect = variant.input_multiplier * c
        has = params.transition_w.shape[1]
        if has != expect or (variant.uses_spatial and not hasattr(params, "spatial_w1")) or (
            variant.uses_channel and not hasattr(params, "channel_w")
        ):
            raise ValueError(f"variant {variant.value!r} inconsistent with parameters built for {params.variant.value!r}")


def gate(
    x_t: Tensor,
    x_prev: Tensor,
    s_prev: Tensor,
    params: GateModelParams,
    variant: RruVariant | str | None = None,
    training: bool = False,
) -> GateMap:
    """Update gate in (0, 1) with the shape of ``x_t``.

    Inputs are [C, H, W] or batched [B, C, H, W].
    """
    variant = params.variant if variant is None else RruVariant(variant)
    if not (x_t.shape == x_prev.shape == s_prev.shape) or x_t.ndim not in (3, 4):
        raise ShapeError(f"gate inputs must share a [C,H,W] shape: {x_t.shape}, {x_prev.shape}, {s_prev.shape}")
    c, h, w = x_t.shape[-3:]
    _check_params(params, variant, c, h, w)
    batched = x_t.ndim == 4
    if variant is RruVariant.APPEARANCE_DIFF_ONLY:
        zi = x_t - s_prev
    elif variant is RruVariant.RAW_CONCAT:
        zi = T.concat([x_t, s_prev], axis=-3)
    else:
        zi = T.concat([x_t - s_prev, x_t - x_prev], axis=-3)
    zt = T.conv2d(zi, params.transition_w, params.transition_b)
    zt = T.relu(T.batchnorm(zt, params.transition_bn, training, axis=-3))
    lead = (x_t.shape[0],) if batched else ()
    out_shape = lead + (c, h, w)

    zs = zc = None
    if variant.uses_spatial:
        pooled = T.reshape(T.mean(zt, axis=-3), lead + (h * w,))
        hidden = T.relu(T.dense(pooled, params.spatial_w1, params.spatial_b1))
        zs = T.reshape(T.dense(hidden, params.spatial_w2, params.spatial_b2), lead + (1, h, w))
    if variant.uses_channel:
        pooled = T.mean(zt, axis=(-2, -1))
        zc = T.reshape(T.dense(pooled, params.channel_w, params.channel_b), lead + (c, 1, 1))

    if zs is not None and zc is not None:
        logits = T.mul(zs, zc)
    else:
        logits = T.expand(zs if zs is not None else zc, out_shape)
    return GateMap(T.sigmoid(logits))


def refine_step(x_t: Tensor, s_prev: Tensor, z: GateMap | Tensor) -> Tensor:
    """``(1 - Z) * S_prev + Z * X_t`` elementwise (see :func:`tensor.convex_mix`)."""
    zv = z.values if isinstance(z, GateMap) else T.as_tensor(z)
    if x_t.shape != s_prev.shape:
        raise ShapeError(f"refine_step: {x_t.shape} vs {s_prev.shape}")
    if zv.shape != x_t.shape:
        zv = T.expand(zv, x_t.shape)
    return T.convex_mix(s_prev, x_t, zv)


def refine_sequence(
    frames: Sequence[Tensor] | Tensor,
    params: GateModelParams,
    variant: RruVariant | str | None = None,
    training: bool = False,
    keep_gates: bool = False,
    force_gate: float | None = None,
) -> RefinedSequence:
    """Run the recurrence over ``frames`` and stack the refined maps.

    ``frames`` is a list of [C,H,W] (or [B,C,H,W]) tensors, or a single tensor
    whose leading axis (after an optional batch axis handled by the caller)
    is time.  The first step uses X_0 = S_0 = X_1.  ``force_gate`` replaces
    the gate model output with a constant, for diagnostics.
    """
    if isinstance(frames, Tensor):
        frames = [frames[t] for t in range(frames.shape[0])]
    frames = list(frames)
    if not frames:
        raise ValueError("refine_sequence needs at least one frame")
    x_prev = s_prev = frames[0]
    refined, gates = [], []
    for x_t in frames:
        if force_gate is not None:
            z = GateMap(Tensor(np.full(x_t.shape, float(force_gate))))
        else:
            z = gate(x_t, x_prev, s_prev, params, variant, training)
        s_t = refine_step(x_t, s_prev, z)
        refined.append(s_t)
        if keep_gates:
            gates.append(z)
        x_prev, s_prev = x_t, s_t
    return RefinedSequence(T.stack(refined, axis=-3), gates)
