"""Raw feature extractors: text embedding, multi-scale visual pyramid, depth predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .attention import sine_position_1d

STRIDES = (8, 16, 32, 64)


@dataclass
class TextEmbedding:
    features: Tensor  # (B, N_t, C)
    mask: Tensor  # (B, N_t), True = padding


@dataclass
class MultiScaleVisual:
    features: Tensor  # (B, N_v, C), levels concatenated in stride order 8, 16, 32, 64
    level_shapes: list[tuple[int, int]]
    level_offsets: list[int]

    def level(self, i: int) -> Tensor:
        h, w = self.level_shapes[i]
        start = self.level_offsets[i]
        return self.features[:, start:start + h * w]


def level_shapes_for(image_h: int, image_w: int) -> list[tuple[int, int]]:
    if image_h % 64 or image_w % 64:
        raise ValueError(f"image size {image_h}x{image_w} must be divisible by 64")
    return [(image_h // s, image_w // s) for s in STRIDES]


def level_offsets_for(level_shapes) -> list[int]:
    offsets, acc = [], 0
    for h, w in level_shapes:
        offsets.append(acc)
        acc += h * w
    return offsets


def num_visual_tokens(image_h: int, image_w: int) -> int:
    return sum(h * w for h, w in level_shapes_for(image_h, image_w))


# --------------------------------------------------------------------------
# text


def numeric_features(values: Tensor, n_freq: int = 6) -> Tensor:
    """Magnitude features for number tokens: scaled value plus a few sinusoids."""
    v = values[..., None]
    freqs = torch.pow(2.0, torch.arange(n_freq, device=values.device, dtype=values.dtype)) / 64.0
    return torch.cat([v / 100.0, torch.log1p(v.clamp_min(0)) / 5.0, torch.sin(v * freqs),
                      torch.cos(v * freqs)], -1)


class TextEncoder(nn.Module):
    """Token embedding + two self-attention layers + linear projection to C.

    Number tokens share one embedding and carry their value through
    ``numeric_features``; a from-scratch encoder cannot learn numeracy from
    a few hundred sentences.
    """

    def __init__(self, vocab_size: int, dim: int, layers: int = 2, heads: int = 4,
                 dropout: float = 0.1, num_token_id: int = 2, pad_id: int = 0):
        super().__init__()
        self.dim = dim
        self.pad_id = pad_id
        self.num_token_id = num_token_id
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=pad_id)
        self.numeric = nn.Sequential(nn.Linear(2 + 2 * 6, dim), nn.ReLU(), nn.Linear(dim, dim))
        layer = nn.TransformerEncoderLayer(dim, heads, 4 * dim, dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, ids: Tensor, values: Tensor, mask: Tensor | None = None) -> TextEmbedding:
        if ids.shape[1] == 0:
            raise ValueError("empty text")
        if mask is None:
            mask = ids == self.pad_id
        x = self.embed(ids)
        is_num = (ids == self.num_token_id).to(x.dtype)[..., None]
        x = x + is_num * self.numeric(numeric_features(values.to(x.dtype)))
        x = x + sine_position_1d(ids.shape[1], self.dim, x.device, x.dtype)[None]
        x = self.encoder(x, src_key_padding_mask=mask)
        return TextEmbedding(self.proj(x), mask)


# --------------------------------------------------------------------------
# image


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.GroupNorm(8, cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.GroupNorm(8, cout), nn.ReLU(inplace=True),
    )


class ImageBackbone(nn.Module):
    """Four strided stages (strides 8/16/32/64) projected to C channels each.

    Two normalized coordinate channels are appended to the RGB input so the
    convolutional features can carry absolute image position.
    """

    def __init__(self, dim: int, channels=(32, 64, 128, 256)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(5, 16, 3, 2, 1, bias=False), nn.GroupNorm(8, 16), nn.ReLU(inplace=True),
            nn.Conv2d(16, channels[0], 3, 2, 1, bias=False), nn.GroupNorm(8, channels[0]),
            nn.ReLU(inplace=True),
        )
        cins = (channels[0],) + tuple(channels[:-1])
        self.stages = nn.ModuleList(_conv_block(ci, co, 2) for ci, co in zip(cins, channels))
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, dim, 1), nn.GroupNorm(min(32, dim // 2), dim)) for c in channels)

    def forward(self, image: Tensor) -> tuple[MultiScaleVisual, list[Tensor]]:
        b, _, h, w = image.shape
        shapes = level_shapes_for(h, w)
        ys = torch.linspace(-1, 1, h, device=image.device, dtype=image.dtype)
        xs = torch.linspace(-1, 1, w, device=image.device, dtype=image.dtype)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        coords = torch.stack([gx, gy])[None].expand(b, 2, h, w)
        x = self.stem(torch.cat([image, coords], 1))
        maps = []
        for stage, proj in zip(self.stages, self.proj):
            x = stage(x)
            maps.append(proj(x))
        flat = torch.cat([m.flatten(2).transpose(1, 2) for m in maps], 1)
        return MultiScaleVisual(flat, shapes, level_offsets_for(shapes)), maps


# --------------------------------------------------------------------------
# depth


class DepthBins:
    """Linear-increasing discretization of [d_min, d_max] into K bins."""

    def __init__(self, k: int = 80, d_min: float = 1.0, d_max: float = 102.0):
        if k < 2 or not d_min < d_max:
            raise ValueError("need K >= 2 and d_min < d_max")
        self.k, self.d_min, self.d_max = k, d_min, d_max
        i = np.arange(k + 1, dtype=np.float64)
        self.edges = d_min + (d_max - d_min) * i * (i + 1) / (k * (k + 1))
        self.centers = 0.5 * (self.edges[:-1] + self.edges[1:])

    def depth_to_bin(self, d):
        idx = np.searchsorted(self.edges, np.asarray(d, dtype=np.float64), side="right") - 1
        idx = np.clip(idx, 0, self.k - 1)
        return int(idx) if np.ndim(idx) == 0 else idx

    def bin_to_depth(self, k):
        return self.centers[k]

    def centers_tensor(self, dtype=torch.float32, device=None) -> Tensor:
        return torch.as_tensor(self.centers, dtype=dtype, device=device)


def ground_truth_depth_map(objects, cam, bins: DepthBins, stride: int = 16) -> np.ndarray:
    """Per-cell bin targets on the stride grid; background cells get class K.

    A cell takes the center depth of the nearest object whose 2D box holds the cell center.
    """
    hg, wg = cam.image_h // stride, cam.image_w // stride
    target = np.full((hg, wg), bins.k, dtype=np.int64)
    depth = np.full((hg, wg), np.inf)
    us = (np.arange(wg) + 0.5) * stride
    vs = (np.arange(hg) + 0.5) * stride
    for obj in objects:
        b = obj.box2d
        inside = ((vs >= b.v_min) & (vs <= b.v_max))[:, None] & ((us >= b.u_min) & (us <= b.u_max))[None]
        z = obj.box3d.z
        win = inside & (z < depth)
        depth[win] = z
        target[win] = bins.depth_to_bin(z)
    return target


class DepthPredictor(nn.Module):
    """Depth-bin classifier on the stride-16 features plus a geometry feature.

    Geometry feature = conv features + softmax-weighted sum of per-bin depth embeddings.
    """

    def __init__(self, dim: int, bins: DepthBins):
        super().__init__()
        self.bins = bins
        self.blocks = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False), nn.GroupNorm(min(32, dim // 2), dim), nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False), nn.GroupNorm(min(32, dim // 2), dim), nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(dim, bins.k + 1, 1)
        self.depth_embed = nn.Embedding(bins.k, dim)
        self.register_buffer("centers", bins.centers_tensor(), persistent=False)

    def forward(self, feat16: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """feat16: (B, C, H/16, W/16). Returns geometry features (B, N_g, C),
        depth logits (B, K+1, H/16, W/16) and expected depth (B, H/16, W/16)."""
        x = self.blocks(feat16)
        logits = self.classifier(x)
        probs = logits[:, : self.bins.k].softmax(1)
        expected = expected_depth(logits, self.centers.to(logits.dtype))
        embed = torch.einsum("bkhw,kc->bchw", probs, self.depth_embed.weight.to(probs.dtype))
        geometry = (x + embed).flatten(2).transpose(1, 2)
        return geometry, logits, expected


def expected_depth(logits: Tensor, centers: Tensor) -> Tensor:
    """Softmax over the K foreground bins, then the probability-weighted bin center."""
    k = centers.shape[0]
    probs = logits[:, :k].softmax(1)
    return torch.einsum("bkhw,k->bhw", probs, centers)
