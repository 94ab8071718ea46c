"""The full grounding network: backbones, encoders, adapter, decoder and head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .attention import sine_position_2d
from .backbones import DepthBins, DepthPredictor, ImageBackbone, TextEncoder
from .config import ModelConfig
from .datagen.expressions import Vocabulary
from .fusion import DepthEncoder, DualTextGuidedAdapter, VisualEncoder, visual_positions
from .grounding import GroundingDecoder, GroundingHead, GroundingPrediction, final_depth


@dataclass
class ModelOutput:
    pred: GroundingPrediction
    depth_logits: Tensor  # (B, K+1, H/16, W/16)
    expected_depth: Tensor  # (B, H/16, W/16)
    score16: Tensor | None  # (B, H/16, W/16)
    ref: Tensor | None  # (B, 2)
    attention: list | None = None  # (tag, weights) pairs when recording

    @property
    def d_pred(self) -> Tensor:
        return final_depth(self.pred.d_reg, self.expected_depth, self.pred.xy3d)


class Mono3DVG(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int, num_token_id: int = 2, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        c = cfg.dim
        self.bins = DepthBins(cfg.depth_bins, cfg.depth_min, cfg.depth_max)
        self.text = TextEncoder(vocab_size, c, cfg.text_layers, cfg.text_heads, cfg.dropout, num_token_id, pad_id)
        self.image = ImageBackbone(c, cfg.backbone_channels)
        self.depth = DepthPredictor(c, self.bins)
        self.level_embed = nn.Parameter(torch.randn(4, c) * 0.02)
        if cfg.use_encoders:
            self.visual_encoder = VisualEncoder(c, cfg.encoder_layers, cfg.heads, cfg.points, cfg.dropout)
            self.depth_encoder = DepthEncoder(c, cfg.depth_encoder_layers, cfg.heads, cfg.dropout)
        else:
            self.visual_encoder = self.depth_encoder = None
        self.adapter = DualTextGuidedAdapter(c, cfg.heads, cfg.points, cfg.dropout,
                                             visual=cfg.visual_adapter, depth=cfg.depth_adapter)
        self.decoder = GroundingDecoder(c, cfg.decoder_layers, cfg.heads, cfg.points, cfg.dropout,
                                        cfg.stacking_order, cfg.full_add_norm)
        self.head = GroundingHead(c)

    @classmethod
    def build(cls, cfg: ModelConfig, vocab: Vocabulary) -> "Mono3DVG":
        return cls(cfg, len(vocab), vocab.num_id, vocab.pad_id)

    def forward(self, images: Tensor, ids: Tensor, values: Tensor, text_mask: Tensor | None = None,
                record: bool = False) -> ModelOutput:
        rec = [] if record else None
        text = self.text(ids, values, text_mask)
        visual, maps = self.image(images)
        shapes, offsets = visual.level_shapes, visual.level_offsets
        geometry, logits, expected = self.depth(maps[1])
        pos_v = visual_positions(shapes, self.level_embed)
        h16, w16 = shapes[1]
        pos_g = sine_position_2d(h16, w16, self.cfg.dim, images.device, images.dtype)

        p_v, p_g = visual.features, geometry
        if self.visual_encoder is not None:
            p_v = self.visual_encoder(p_v, pos_v, shapes, text.features, text.mask, rec)
            p_g = self.depth_encoder(p_g, pos_g, rec)
        adapted = self.adapter(p_v, p_g, pos_v, shapes, offsets, text.features, text.mask, rec)
        q, ref = self.decoder(adapted.geometry, pos_g[None], text.features, text.mask,
                              adapted.visual, shapes, rec)
        pred = self.head(q, ref)
        return ModelOutput(pred, logits, expected, adapted.score16, ref, rec)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
