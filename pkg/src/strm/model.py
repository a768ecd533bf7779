"""Full video re-id network: backbone -> RRU -> STIM -> heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .nn import Module
from .objectives import ClassifierBlock
from .rru import GateMap, GateModelParams, RruVariant, refine_sequence
from .stim import StimParams, baseline_pool, stim_forward
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    channels: int = 32
    stage_widths: tuple[int, ...] = (16, 32)
    image_height: int = 64
    image_width: int = 32
    num_identities: int = 20
    use_rru: bool = True
    rru_variant: str = "full"
    use_stim: bool = True
    transition_width: int = 256
    spatial_hidden: int = 128
    stim_width: int = 256
    classifier_hidden: int = 512
    dropout: float = 0.5

    def __post_init__(self):
        RruVariant(self.rru_variant)
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            widths=(*self.stage_widths, self.channels),
            image_size=(self.image_height, self.image_width),
            num_identities=self.num_identities,
        )

    @property
    def descriptor_dim(self) -> int:
        return self.stim_width if self.use_stim else self.channels


@dataclass
class ForwardOutput:
    descriptor: Tensor  # [B, d]
    aux_logits: Tensor  # [B, T, n]
    raw: Tensor  # [B, C, T, H, W]
    refined: Tensor  # [B, C, T, H, W]
    gates: list[GateMap] = field(default_factory=list)


class VideoReidModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        bcfg = config.backbone_config()
        self.backbone = Backbone(bcfg, rng)
        h, w = bcfg.feature_size
        if config.use_rru:
            self.gate = GateModelParams(config.channels, h, w, config.rru_variant, rng,
                                        config.transition_width, config.spatial_hidden)
        if config.use_stim:
            self.stim = StimParams(config.channels, rng, config.stim_width)
        self.classifier = ClassifierBlock(config.descriptor_dim, config.num_identities, rng,
                                          config.classifier_hidden, config.dropout)

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.backbone.config.feature_size

    def forward(self, videos: np.ndarray | Tensor, training: bool = False, keep_gates: bool = False,
                force_gate: float | None = None) -> ForwardOutput:
        """Run [B, T, 3, h, w] videos through backbone, RRU and pooling."""
        v = videos if isinstance(videos, Tensor) else Tensor(videos)
        if v.ndim != 5:
            raise ShapeError(f"expected videos [B, T, 3, h, w], got {v.shape}")
        b, t = v.shape[:2]
        feats = self.backbone.extract(T.reshape(v, (b * t, *v.shape[2:])), training)
        c, h, w = feats.values.shape[1:]
        x = T.reshape(feats.values, (b, t, c, h, w))
        aux = T.reshape(self.backbone.aux_logits(feats.penultimate), (b, t, -1))
        raw = T.transpose(x, (0, 2, 1, 3, 4))
        gates: list[GateMap] = []
        if self.config.use_rru:
            seq = refine_sequence([x[:, i] for i in range(t)], self.gate, training=training,
                                  keep_gates=keep_gates, force_gate=force_gate)
            refined, gates = seq.values, seq.gates
        else:
            refined = raw
        if self.config.use_stim:
            f = stim_forward(refined, self.stim, training)
        else:
            f = baseline_pool(refined)
        return ForwardOutput(f, aux, raw, refined, gates)

    def describe(self, frames: np.ndarray) -> np.ndarray:
        """Eval-mode descriptor of one [T, 3, h, w] sequence using all frames."""
        with T.no_grad():
            return self.forward(frames[None], training=False).descriptor.data[0].copy()
