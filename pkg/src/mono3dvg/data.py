"""Turning expression records into padded training batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .backbones import DepthBins, ground_truth_depth_map
from .datagen.dataset import ExpressionRecord
from .datagen.expressions import Vocabulary
from .grounding import encode_target


@dataclass
class Targets:
    class_idx: Tensor  # (B,)
    lrtb: Tensor  # (B, 4)
    xy3d: Tensor  # (B, 2)
    size3d: Tensor  # (B, 3)
    orient_bin: Tensor  # (B,)
    orient_residual: Tensor  # (B, 2)
    depth: Tensor  # (B,)
    box2d: Tensor  # (B, 4) normalized u0, v0, u1, v1
    depth_map: Tensor  # (B, H/16, W/16) bin index, K = background

    def to(self, dtype=None, device=None) -> "Targets":
        def cast(t):
            return t.to(device=device, dtype=dtype) if t.is_floating_point() else t.to(device=device)
        return Targets(**{k: cast(v) for k, v in self.__dict__.items()})


@dataclass
class Batch:
    images: Tensor  # (B, 3, H, W), roughly zero-centered
    ids: Tensor  # (B, N_t)
    values: Tensor  # (B, N_t)
    text_mask: Tensor  # (B, N_t), True = padding
    targets: Targets | None
    records: list

    def __len__(self) -> int:
        return self.images.shape[0]


def image_tensor(image: np.ndarray) -> Tensor:
    return torch.from_numpy(np.array(image, dtype=np.uint8)).permute(2, 0, 1).float() / 255.0 - 0.5


def encode_texts(texts: list[str], vocab: Vocabulary) -> tuple[Tensor, Tensor, Tensor]:
    encoded = [vocab.encode(t) for t in texts]
    n = max(len(ids) for ids, _ in encoded)
    ids = torch.full((len(texts), n), vocab.pad_id, dtype=torch.long)
    values = torch.zeros(len(texts), n)
    for i, (tok, val) in enumerate(encoded):
        ids[i, : len(tok)] = torch.tensor(tok)
        values[i, : len(val)] = torch.tensor(val)
    return ids, values, ids == vocab.pad_id


def make_targets(records: list[ExpressionRecord], bins: DepthBins) -> Targets:
    enc = [encode_target(r.target.category, r.target.box3d, r.target.box2d, r.scene.camera) for r in records]
    maps = [ground_truth_depth_map(r.scene.objects, r.scene.camera, bins) for r in records]

    def stack(name, dtype=torch.float32):
        return torch.as_tensor(np.array([getattr(t, name) for t in enc]), dtype=dtype)

    return Targets(
        class_idx=stack("class_idx", torch.long),
        lrtb=stack("lrtb"),
        xy3d=stack("xy3d"),
        size3d=stack("size3d"),
        orient_bin=stack("orient_bin", torch.long),
        orient_residual=stack("orient_residual"),
        depth=stack("depth"),
        box2d=stack("box2d"),
        depth_map=torch.as_tensor(np.stack(maps), dtype=torch.long),
    )


def collate(records: list[ExpressionRecord], vocab: Vocabulary, bins: DepthBins | None = None) -> Batch:
    """Stack records into a batch; targets are built only when ``bins`` is given."""
    for r in records:
        if r.scene.image is None:
            raise ValueError(f"record {r.scene_id} has no image loaded")
    images = torch.stack([image_tensor(r.scene.image) for r in records])
    ids, values, mask = encode_texts([r.text for r in records], vocab)
    targets = make_targets(records, bins) if bins is not None else None
    return Batch(images, ids, values, mask, targets, list(records))


def iterate_batches(records: list, batch_size: int, rng: np.random.Generator | None = None):
    """Index chunks over ``records``; shuffled when an rng is given. The last short batch is kept."""
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for s in range(0, len(order), batch_size):
        yield [records[i] for i in order[s:s + batch_size]]
