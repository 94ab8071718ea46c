"""Single-query grounding decoder, multi-MLP head, and 3D box assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import FFN, MLP, MSDeformAttn, MultiHeadAttention, inverse_sigmoid
from .datagen.scene import CATEGORIES, CATEGORY_INDEX, MEAN_DIMS
from .geometry3d import (Box2D, CameraIntrinsics, OrientedBox3D, backproject_point, observation_angle,
                         wrap_angle, yaw_from_observation)

NUM_CLASSES = len(CATEGORIES)
NUM_BINS = 12
BIN_WIDTH = 2 * math.pi / NUM_BINS


def bin_center(b):
    return -math.pi + b * BIN_WIDTH


def encode_orientation(alpha: float) -> tuple[int, float, float]:
    """Angle -> (bin, sin residual, cos residual) for 12 sectors centered at -pi + 2*pi*b/12."""
    b = int(round((wrap_angle(alpha) + math.pi) / BIN_WIDTH)) % NUM_BINS
    delta = wrap_angle(alpha - bin_center(b))
    return b, math.sin(delta), math.cos(delta)


def decode_orientation(bin_logits, residuals) -> float:
    """bin_logits: (12,), residuals: (12, 2) as (sin, cos). Returns an angle in (-pi, pi]."""
    b = int(np.argmax(np.asarray(bin_logits)))
    s, c = np.asarray(residuals)[b]
    return wrap_angle(bin_center(b) + math.atan2(float(s), float(c)))


@dataclass
class GroundingPrediction:
    """Raw (pre-activation) head outputs for a batch; activations are properties."""

    class_logits: Tensor  # (B, 9)
    lrtb_raw: Tensor  # (B, 4)
    xy_raw: Tensor  # (B, 2)
    size_raw: Tensor  # (B, 3)
    orient_raw: Tensor  # (B, 36): 12 bin logits then 12 x (sin, cos)
    depth_raw: Tensor  # (B, 2): d_reg pre-activation, log sigma

    @property
    def lrtb(self) -> Tensor:
        return self.lrtb_raw.sigmoid()

    @property
    def xy3d(self) -> Tensor:
        return self.xy_raw.sigmoid()

    @property
    def size3d(self) -> Tensor:
        return self.size_raw.exp()

    @property
    def orient_logits(self) -> Tensor:
        return self.orient_raw[:, :NUM_BINS]

    @property
    def orient_residuals(self) -> Tensor:
        return self.orient_raw[:, NUM_BINS:].reshape(-1, NUM_BINS, 2)

    @property
    def d_reg(self) -> Tensor:
        # log-space output: a fixed optimizer step moves depth by a fixed ratio rather than fixed meters
        return self.depth_raw[:, 0].clamp(max=6.0).exp()

    @property
    def log_sigma(self) -> Tensor:
        return self.depth_raw[:, 1]

    def raw_fields(self) -> dict[str, Tensor]:
        return {"class_logits": self.class_logits, "lrtb_raw": self.lrtb_raw, "xy_raw": self.xy_raw,
                "size_raw": self.size_raw, "orient_raw": self.orient_raw, "depth_raw": self.depth_raw}

    def sample(self, i: int) -> "HeadValues":
        with torch.no_grad():
            return HeadValues(
                class_logits=self.class_logits[i].double().cpu().numpy(),
                lrtb=self.lrtb[i].double().cpu().numpy(),
                xy3d=self.xy3d[i].double().cpu().numpy(),
                size3d=self.size3d[i].double().cpu().numpy(),
                orient_logits=self.orient_logits[i].double().cpu().numpy(),
                orient_residuals=self.orient_residuals[i].double().cpu().numpy(),
                d_reg=float(self.d_reg[i]),
                log_sigma=float(self.log_sigma[i]),
            )


@dataclass
class HeadValues:
    """Activated head outputs of a single sample, as numpy."""

    class_logits: np.ndarray
    lrtb: np.ndarray
    xy3d: np.ndarray
    size3d: np.ndarray  # (h, w, l)
    orient_logits: np.ndarray
    orient_residuals: np.ndarray
    d_reg: float
    log_sigma: float = 0.0

    @property
    def category(self) -> str:
        return CATEGORIES[int(np.argmax(self.class_logits))]


# --------------------------------------------------------------------------
# decoder


class GroundingDecoderLayer(nn.Module):
    """Stacked D/T/V attention without intermediate residuals, then Add&Norm and FFN.

    D: query attends to the adapted geometry tokens; T: cross-attention to text;
    V: deformable attention over the adapted multi-scale visual tokens around a
    reference point predicted from the query entering V.
    """

    def __init__(self, dim: int, heads: int = 8, points: int = 4, dropout: float = 0.1,
                 order: str = "DTV", full_add_norm: bool = False):
        super().__init__()
        if sorted(order) != ["D", "T", "V"]:
            raise ValueError(f"stacking order must be a permutation of DTV, got {order!r}")
        self.order = order
        self.full_add_norm = full_add_norm
        self.depth_attn = MultiHeadAttention(dim, heads, dropout)
        self.text_attn = MultiHeadAttention(dim, heads, dropout)
        self.visual_attn = MSDeformAttn(dim, 4, heads, points)
        self.ref_point = nn.Linear(dim, 2)
        nn.init.zeros_(self.ref_point.weight)
        nn.init.zeros_(self.ref_point.bias)
        self.norm = nn.LayerNorm(dim)
        self.ffn = FFN(dim, 4 * dim, dropout)
        self.norm_ffn = nn.LayerNorm(dim)
        self.step_norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(3)) if full_add_norm else None
        self.drop = nn.Dropout(dropout)

    def forward(self, query: Tensor, geometry: Tensor, geometry_pos: Tensor, text: Tensor,
                text_mask: Tensor, visual: Tensor, level_shapes, record: list | None = None):
        # p' = LN(p_q + V(T(D(p_q)))); out = LN(p' + FFN(p'))
        x = query
        ref = None
        for i, step in enumerate(self.order):
            if step == "D":
                kv = geometry + geometry_pos
                y, w = self.depth_attn(x, kv, kv)
                tag = "decoder.depth"
            elif step == "T":
                y, w = self.text_attn(x, text, text, text_mask)
                tag = "decoder.text"
            else:
                ref = self.ref_point(x).sigmoid()[:, 0]  # (B, 2)
                y, w = self.visual_attn(x, ref[:, None], visual, level_shapes)
                tag = "decoder.visual"
            if record is not None:
                record.append((tag, w))
            x = self.step_norms[i](x + y) if self.full_add_norm else y
        x = self.norm(query + self.drop(x))
        x = self.norm_ffn(x + self.ffn(x))
        return x, ref


class GroundingDecoder(nn.Module):
    def __init__(self, dim: int, layers: int = 1, heads: int = 8, points: int = 4, dropout: float = 0.1,
                 order: str = "DTV", full_add_norm: bool = False):
        super().__init__()
        self.query = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.layers = nn.ModuleList(
            GroundingDecoderLayer(dim, heads, points, dropout, order, full_add_norm) for _ in range(layers))

    def forward(self, geometry, geometry_pos, text, text_mask, visual, level_shapes, record=None):
        q = self.query.expand(geometry.shape[0], -1, -1)
        ref = None
        for layer in self.layers:
            q, ref = layer(q, geometry, geometry_pos, text, text_mask, visual, level_shapes, record)
        return q[:, 0], ref


# --------------------------------------------------------------------------
# head


class GroundingHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.cls = nn.Linear(dim, NUM_CLASSES)
        self.box2d = MLP(dim, dim, 6, 3)  # lrtb + projected center
        self.size = MLP(dim, dim, 3, 2)
        self.orient = MLP(dim, dim, NUM_BINS * 3, 2)
        self.depth = MLP(dim, dim, 2, 2)
        with torch.no_grad():
            self.size.layers[-1].bias.copy_(torch.log(torch.tensor(MEAN_DIMS["car"])))
            self.depth.layers[-1].bias.copy_(torch.tensor([math.log(25.0), 0.0]))
            self.box2d.layers[-1].bias[:4].fill_(-3.0)

    def forward(self, q: Tensor, ref: Tensor | None = None) -> GroundingPrediction:
        b2 = self.box2d(q)
        xy = b2[:, 4:]
        if ref is not None:
            xy = xy + inverse_sigmoid(ref)
        return GroundingPrediction(self.cls(q), b2[:, :4], xy, self.size(q), self.orient(q), self.depth(q))


# --------------------------------------------------------------------------
# depth and box assembly


def final_depth(d_reg: Tensor, depth_map: Tensor, xy3d: Tensor) -> Tensor:
    """Average of the regressed depth and the expected depth map bilinearly sampled at xy3d.

    d_reg: (B,), depth_map: (B, h, w) on the stride-16 grid, xy3d: (B, 2) normalized image coords.
    """
    grid = (2.0 * xy3d.clamp(0.0, 1.0) - 1.0)[:, None, None, :]
    d_map = F.grid_sample(depth_map[:, None], grid.to(depth_map.dtype), mode="bilinear",
                          padding_mode="border", align_corners=False)[:, 0, 0, 0]
    return 0.5 * (d_reg + d_map)


def assemble_box(h: HeadValues, cam: CameraIntrinsics, d_pred: float) -> tuple[OrientedBox3D, Box2D]:
    W, H = cam.image_w, cam.image_h
    u, v = float(h.xy3d[0]) * W, float(h.xy3d[1]) * H
    x, y, z = backproject_point((u, v), max(float(d_pred), 1e-3), cam)
    l, r, t, b = (float(a) for a in h.lrtb)
    u0, u1 = max(u - l * W, 0.0), min(u + r * W, float(W))
    v0, v1 = max(v - t * H, 0.0), min(v + b * H, float(H))
    if u1 - u0 < 1.0:
        u0, u1 = min(max(u - 0.5, 0.0), W - 1.0), min(max(u - 0.5, 0.0), W - 1.0) + 1.0
    if v1 - v0 < 1.0:
        v0, v1 = min(max(v - 0.5, 0.0), H - 1.0), min(max(v - 0.5, 0.0), H - 1.0) + 1.0
    alpha = decode_orientation(h.orient_logits, h.orient_residuals)
    hh, ww, ll = (float(s) for s in h.size3d)
    box3d = OrientedBox3D(x, y, z, hh, ww, ll, yaw_from_observation(alpha, x, z))
    return box3d, Box2D(u0, v0, u1, v1)


@dataclass
class GroundingTarget:
    class_idx: int
    lrtb: np.ndarray  # normalized (l, r, t, b)
    xy3d: np.ndarray  # normalized projected center
    size3d: np.ndarray  # (h, w, l)
    orient_bin: int
    orient_residual: np.ndarray  # (sin, cos)
    depth: float
    box2d: np.ndarray  # normalized (u0, v0, u1, v1)


def encode_target(category: str, box3d: OrientedBox3D, box2d: Box2D, cam: CameraIntrinsics) -> GroundingTarget:
    W, H = cam.image_w, cam.image_h
    u = cam.fx * box3d.x / box3d.z + cam.cx
    v = cam.fy * box3d.y / box3d.z + cam.cy
    lrtb = np.array([(u - box2d.u_min) / W, (box2d.u_max - u) / W, (v - box2d.v_min) / H, (box2d.v_max - v) / H])
    b, s, c = encode_orientation(observation_angle(box3d))
    return GroundingTarget(
        class_idx=CATEGORY_INDEX[category],
        lrtb=lrtb,
        xy3d=np.array([u / W, v / H]),
        size3d=np.array([box3d.h, box3d.w, box3d.l]),
        orient_bin=b,
        orient_residual=np.array([s, c]),
        depth=box3d.z,
        box2d=np.array([box2d.u_min / W, box2d.v_min / H, box2d.u_max / W, box2d.v_max / H]),
    )


def target_to_head_values(t: GroundingTarget) -> HeadValues:
    """The head output that decodes exactly to ``t``."""
    logits = np.zeros(NUM_CLASSES)
    logits[t.class_idx] = 10.0
    orient_logits = np.zeros(NUM_BINS)
    orient_logits[t.orient_bin] = 10.0
    res = np.tile([0.0, 1.0], (NUM_BINS, 1))
    res[t.orient_bin] = t.orient_residual
    return HeadValues(logits, t.lrtb.copy(), t.xy3d.copy(), t.size3d.copy(), orient_logits, res, t.depth, 0.0)
