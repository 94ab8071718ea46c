"""Attention primitives that expose their weights: MHA and multi-scale deformable attention."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over separate query/key/value inputs.

    Returns ``(output, weights)`` with weights shaped (B, heads, Lq, Lk); with
    ``need_weights=False`` a fused kernel is used and weights come back as None.
    ``key_padding_mask`` is True at positions that must not be attended.
    Dropout acts on the attended values rather than on the (much larger)
    weight matrix, which keeps CPU training affordable.
    """

    def __init__(self, dim: int, heads: int = 8, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_padding_mask: Tensor | None = None,
                need_weights: bool = True) -> tuple[Tensor, Tensor | None]:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        if need_weights:
            logits = (q * (1.0 / math.sqrt(q.shape[-1]))) @ k.transpose(-2, -1)
            if key_padding_mask is not None:
                logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
            weights = logits.softmax(dim=-1)
            out = weights @ v
        else:
            mask = None if key_padding_mask is None else ~key_padding_mask[:, None, None, :]
            out, weights = F.scaled_dot_product_attention(q, k, v, attn_mask=mask), None
        b, _, n, _ = out.shape
        out = self.dropout(out.transpose(1, 2).reshape(b, n, self.dim))
        return self.out_proj(out), weights


def multi_scale_deformable_sample(value: Tensor, level_shapes: list[tuple[int, int]],
                                  locations: Tensor, weights: Tensor) -> Tensor:
    """Bilinear sampling of per-level value maps, weighted over levels and points.

    value: (B, Lv, heads, Dh); locations: (B, Lq, heads, levels, points, 2) in [0, 1]
    as (x, y); weights: (B, Lq, heads, levels, points). Returns (B, Lq, heads*Dh).
    """
    b, _, heads, dh = value.shape
    _, lq, _, levels, points, _ = locations.shape
    sizes = [h * w for h, w in level_shapes]
    value_levels = value.split(sizes, dim=1)
    grids = 2.0 * locations - 1.0
    w_all = weights.transpose(1, 2).reshape(b * heads, 1, lq, levels, points)
    out = 0.0
    for lvl, (h, w) in enumerate(level_shapes):
        v = value_levels[lvl].flatten(2).transpose(1, 2).reshape(b * heads, dh, h, w)
        g = grids[:, :, :, lvl].transpose(1, 2).flatten(0, 1)  # (B*heads, Lq, points, 2)
        s = F.grid_sample(v, g, mode="bilinear", padding_mode="zeros", align_corners=False)
        out = out + (s * w_all[..., lvl, :]).sum(-1)  # (B*heads, Dh, Lq)
    out = out.view(b, heads * dh, lq)
    return out.transpose(1, 2).contiguous()


class MSDeformAttn(nn.Module):
    """Multi-scale deformable attention: each query samples ``points`` learned offsets
    around its reference point on every level and mixes them with softmax weights."""

    def __init__(self, dim: int, levels: int = 4, heads: int = 8, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.levels, self.heads, self.points = dim, levels, heads, points
        self.sampling_offsets = nn.Linear(dim, heads * levels * points * 2)
        self.attention_weights = nn.Linear(dim, heads * levels * points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        nn.init.zeros_(self.sampling_offsets.weight)
        thetas = torch.arange(self.heads, dtype=torch.float32) * (2.0 * math.pi / self.heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.heads, 1, 1, 2).repeat(1, self.levels, self.points, 1)
        for i in range(self.points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.flatten())
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, query: Tensor, reference_points: Tensor, value: Tensor,
                level_shapes: list[tuple[int, int]]) -> tuple[Tensor, Tensor]:
        """reference_points: (B, Lq, 2) normalized (x, y). Returns output and the
        (B, Lq, heads, levels*points) attention weights."""
        b, lq, _ = query.shape
        v = self.value_proj(value).view(b, value.shape[1], self.heads, self.dim // self.heads)
        offsets = self.sampling_offsets(query).view(b, lq, self.heads, self.levels, self.points, 2)
        logits = self.attention_weights(query).view(b, lq, self.heads, self.levels * self.points)
        weights = logits.softmax(-1)
        # per-level pixel offsets -> normalized coordinates; flat multiply is much faster than 6-D broadcasting
        scale = torch.tensor([[1.0 / w, 1.0 / h] for h, w in level_shapes], dtype=query.dtype, device=query.device)
        scale = scale[:, None, :].expand(self.levels, self.points, 2).reshape(-1)
        offsets = (offsets.reshape(-1, scale.numel()) * scale).view(offsets.shape)
        locations = reference_points[:, :, None, None, None, :] + offsets
        out = multi_scale_deformable_sample(
            v, level_shapes, locations,
            weights.view(b, lq, self.heads, self.levels, self.points))
        return self.output_proj(out), weights


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(inplace=True), nn.Dropout(dropout),
                                 nn.Linear(hidden, dim), nn.Dropout(dropout))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def sine_position_2d(h: int, w: int, dim: int, device=None, dtype=torch.float32) -> Tensor:
    """DETR-style sinusoidal embedding of a normalized (h, w) grid, returned as (h*w, dim)."""
    half = dim // 2
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w * 2 * math.pi
    freqs = 10000 ** (2 * (torch.arange(half // 2, device=device, dtype=dtype)) / half)
    py = ys[:, None] / freqs
    px = xs[:, None] / freqs
    py = torch.cat([py.sin(), py.cos()], -1)  # (h, half)
    px = torch.cat([px.sin(), px.cos()], -1)  # (w, half)
    pos = torch.cat([py[:, None, :].expand(h, w, half), px[None, :, :].expand(h, w, half)], -1)
    return pos.reshape(h * w, 2 * half)


def sine_position_1d(n: int, dim: int, device=None, dtype=torch.float32) -> Tensor:
    pos = torch.arange(n, device=device, dtype=dtype)[:, None]
    freqs = 10000 ** (torch.arange(0, dim, 2, device=device, dtype=dtype) / dim)
    out = torch.zeros(n, dim, device=device, dtype=dtype)
    out[:, 0::2] = (pos / freqs).sin()
    out[:, 1::2] = (pos / freqs[: dim // 2]).cos()
    return out


def reference_grid(level_shapes: list[tuple[int, int]], device=None, dtype=torch.float32) -> Tensor:
    """Cell-center reference points of every level, concatenated: (N_v, 2) as (x, y)."""
    refs = []
    for h, w in level_shapes:
        ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        refs.append(torch.stack([gx.reshape(-1), gy.reshape(-1)], -1))
    return torch.cat(refs, 0)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))
