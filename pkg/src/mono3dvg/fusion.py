"""Visual/depth encoders and the dual text-guided adapter.

Every block follows a fixed residual + LayerNorm pattern; the comments on each
``forward`` give the exact composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import FFN, MSDeformAttn, MultiHeadAttention, reference_grid, sine_position_2d

L2_EPS = 1e-12


def visual_positions(level_shapes, level_embed: Tensor) -> Tensor:
    """Sinusoidal position + per-level embedding for the flattened pyramid: (N_v, C)."""
    dim = level_embed.shape[1]
    parts = [sine_position_2d(h, w, dim, level_embed.device, level_embed.dtype) + level_embed[i]
             for i, (h, w) in enumerate(level_shapes)]
    return torch.cat(parts, 0)


class VisualEncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, points: int, levels: int = 4, dropout: float = 0.1):
        super().__init__()
        self.msda = MSDeformAttn(dim, levels, heads, points)
        self.cross = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FFN(dim, 4 * dim, dropout)
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(dim), nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, f: Tensor, pos: Tensor, refs: Tensor, level_shapes, text: Tensor,
                text_mask: Tensor, record: list | None = None) -> Tensor:
        # f' = LN(f + MSDA(f)); f'' = LN(f' + MHCA(f', p_t, p_t)); p = LN(f'' + FFN(f''))
        a, w1 = self.msda(f + pos, refs, f, level_shapes)
        f = self.norm1(f + self.drop(a))
        a, w2 = self.cross(f, text, text, text_mask, need_weights=record is not None)
        f = self.norm2(f + self.drop(a))
        f = self.norm3(f + self.ffn(f))
        if record is not None:
            record.extend([("encoder.msda", w1), ("encoder.mhca", w2)])
        return f


class VisualEncoder(nn.Module):
    def __init__(self, dim: int, layers: int = 3, heads: int = 8, points: int = 4, dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList(VisualEncoderLayer(dim, heads, points, 4, dropout) for _ in range(layers))

    def forward(self, f_v: Tensor, pos: Tensor, level_shapes, text: Tensor, text_mask: Tensor,
                record: list | None = None) -> Tensor:
        refs = reference_grid(level_shapes, f_v.device, f_v.dtype)[None].expand(f_v.shape[0], -1, -1)
        for layer in self.layers:
            f_v = layer(f_v, pos[None], refs, level_shapes, text, text_mask, record)
        return f_v


class DepthEncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.1):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FFN(dim, 4 * dim, dropout)
        self.norm1, self.norm2 = nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, f: Tensor, pos: Tensor, record: list | None = None) -> Tensor:
        # f' = LN(f + MHSA(f)); p = LN(f' + FFN(f'))
        q = f + pos
        a, w = self.attn(q, q, f, need_weights=record is not None)
        f = self.norm1(f + self.drop(a))
        f = self.norm2(f + self.ffn(f))
        if record is not None:
            record.append(("depth_encoder.mhsa", w))
        return f


class DepthEncoder(nn.Module):
    def __init__(self, dim: int, layers: int = 1, heads: int = 8, dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList(DepthEncoderLayer(dim, heads, dropout) for _ in range(layers))

    def forward(self, f_g: Tensor, pos: Tensor, record: list | None = None) -> Tensor:
        for layer in self.layers:
            f_g = layer(f_g, pos[None], record)
        return f_g


class DepthAdapter(nn.Module):
    def __init__(self, dim: int, heads: int = 8, dropout: float = 0.1):
        super().__init__()
        self.cross = MultiHeadAttention(dim, heads, dropout)
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.norm_in, self.norm_out = nn.LayerNorm(dim), nn.LayerNorm(dim)

    def forward(self, p_g: Tensor, text: Tensor, text_mask: Tensor, record: list | None = None) -> Tensor:
        # p' = p_g + MHCA(p_g, p_t, p_t); p'' = LN(p_g) + LN(MHA(p', p', p_g))
        a, w1 = self.cross(p_g, text, text, text_mask, need_weights=record is not None)
        p1 = p_g + a
        b, w2 = self.self_attn(p1, p1, p_g, need_weights=record is not None)
        if record is not None:
            record.extend([("depth_adapter.mhca", w1), ("depth_adapter.mha", w2)])
        return self.norm_in(p_g) + self.norm_out(b)


class VisualAdapter(nn.Module):
    def __init__(self, dim: int, heads: int = 8, points: int = 4, dropout: float = 0.1):
        super().__init__()
        self.cross = MultiHeadAttention(dim, heads, dropout)
        self.msda = MSDeformAttn(dim, 4, heads, points)
        self.norm_in, self.norm_out = nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.proj_orig = nn.Linear(dim, dim)
        self.proj_text = nn.Linear(dim, dim)

    def forward(self, p_v: Tensor, pos: Tensor, level_shapes, level_offsets, text: Tensor,
                text_mask: Tensor, record: list | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Returns p_v'' (B, N_v, C) and F_orig, F_text as (B, C, H/16, W/16)."""
        # p16' = p16 + MHCA(p16, p_t, p_t); p_v' = Concat[p8, p16', p32, p64]
        # p_v'' = LN(p_v) + LN(MSDA(p_v', p_v))
        h16, w16 = level_shapes[1]
        s, e = level_offsets[1], level_offsets[1] + h16 * w16
        p16 = p_v[:, s:e]
        a, w1 = self.cross(p16, text, text, text_mask, need_weights=record is not None)
        p_prime = torch.cat([p_v[:, :s], p16 + a, p_v[:, e:]], 1)
        refs = reference_grid(level_shapes, p_v.device, p_v.dtype)[None].expand(p_v.shape[0], -1, -1)
        m, w2 = self.msda(p_prime + pos[None], refs, p_v, level_shapes)
        out = self.norm_in(p_v) + self.norm_out(m)
        b = p_v.shape[0]
        f_orig = self.proj_orig(p16).transpose(1, 2).reshape(b, -1, h16, w16)
        f_text = self.proj_text(a).transpose(1, 2).reshape(b, -1, h16, w16)
        if record is not None:
            record.extend([("visual_adapter.mhca", w1), ("visual_adapter.msda", w2)])
        return out, f_orig, f_text


def cosine_map(f_orig: Tensor, f_text: Tensor, eps: float = L2_EPS) -> Tensor:
    """Per-pixel cosine similarity of two (B, C, H, W) maps after channel-wise l2 normalization."""
    a = f_orig / f_orig.norm(dim=1, keepdim=True).clamp_min(eps)
    b = f_text / f_text.norm(dim=1, keepdim=True).clamp_min(eps)
    return (a * b).sum(1)


def gaussian_score(s: Tensor, alpha: Tensor, sigma: Tensor) -> Tensor:
    return alpha * torch.exp(-(1.0 - s) ** 2 / (2.0 * sigma ** 2))


class ScoreHead(nn.Module):
    """Learnable alpha and sigma; sigma = softplus(raw) stays positive."""

    def __init__(self, alpha: float = 1.0, sigma: float = 0.5):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(float(alpha)))
        self.sigma_raw = nn.Parameter(torch.log(torch.expm1(torch.tensor(float(sigma)))))

    @property
    def sigma(self) -> Tensor:
        return F.softplus(self.sigma_raw)

    def forward(self, f_orig: Tensor, f_text: Tensor) -> Tensor:
        return attention_scores(f_orig, f_text, self.alpha, self.sigma)


def attention_scores(f_orig: Tensor, f_text: Tensor, alpha, sigma) -> Tensor:
    """Score map (B, H/16, W/16) = alpha * exp(-(1 - cos)^2 / (2 sigma^2))."""
    return gaussian_score(cosine_map(f_orig, f_text), alpha, sigma)


def expand_scores(s16: Tensor, level_shapes) -> Tensor:
    """Stride-16 score map (B, h, w) -> flattened multi-scale score (B, N_v).

    Order: bilinear upsample to stride 8, identity, 2x2 max-pool once (stride 32)
    and twice (stride 64).
    """
    x = s16[:, None]
    up = F.interpolate(x, size=level_shapes[0], mode="bilinear", align_corners=False)
    down1 = F.max_pool2d(x, 2)
    down2 = F.max_pool2d(down1, 2)
    return torch.cat([t.flatten(1) for t in (up, x, down1, down2)], 1)


def modulate(features: Tensor, scores: Tensor) -> Tensor:
    """Scale each token (B, N, C) by its scalar score (B, N)."""
    return features * scores[..., None]


@dataclass
class AdaptedFeatures:
    visual: Tensor  # (B, N_v, C)
    geometry: Tensor  # (B, N_g, C)
    score16: Tensor | None  # (B, H/16, W/16)
    score: Tensor | None  # (B, N_v)


class DualTextGuidedAdapter(nn.Module):
    def __init__(self, dim: int, heads: int = 8, points: int = 4, dropout: float = 0.1,
                 visual: bool = True, depth: bool = True):
        super().__init__()
        self.visual = VisualAdapter(dim, heads, points, dropout) if visual else None
        self.depth = DepthAdapter(dim, heads, dropout) if depth else None
        self.score_head = ScoreHead() if visual else None

    def forward(self, p_v: Tensor, p_g: Tensor, pos_v: Tensor, level_shapes, level_offsets,
                text: Tensor, text_mask: Tensor, record: list | None = None) -> AdaptedFeatures:
        p_g2 = self.depth(p_g, text, text_mask, record) if self.depth is not None else p_g
        if self.visual is None:
            return AdaptedFeatures(p_v, p_g2, None, None)
        p_v2, f_orig, f_text = self.visual(p_v, pos_v, level_shapes, level_offsets, text, text_mask, record)
        s16 = self.score_head(f_orig, f_text)
        s = expand_scores(s16, level_shapes)
        return AdaptedFeatures(modulate(p_v2, s), modulate(p_g2, s16.flatten(1)), s16, s)
