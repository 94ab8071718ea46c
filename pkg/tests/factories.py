"""Random-but-valid predictions and targets shared by the loss tests and acceptance checks."""

import math

import numpy as np
import torch

from mono3dvg.backbones import DepthBins, expected_depth
from mono3dvg.data import Targets
from mono3dvg.geometry3d import OrientedBox3D
from mono3dvg.grounding import NUM_BINS, GroundingPrediction, final_depth


def random_targets(b: int, gen: torch.Generator, dtype=torch.float64, grid=(4, 12), k: int = 80) -> Targets:
    xy = torch.rand(b, 2, generator=gen, dtype=dtype) * 0.6 + 0.2
    lrtb = torch.rand(b, 4, generator=gen, dtype=dtype) * 0.15 + 0.02
    box2d = torch.stack([xy[:, 0] - lrtb[:, 0], xy[:, 1] - lrtb[:, 2], xy[:, 0] + lrtb[:, 1], xy[:, 1] + lrtb[:, 3]], 1)
    angle = (torch.rand(b, generator=gen, dtype=dtype) - 0.5) * (2 * torch.pi / NUM_BINS)
    return Targets(
        class_idx=torch.randint(0, 9, (b,), generator=gen),
        lrtb=lrtb,
        xy3d=xy,
        size3d=torch.rand(b, 3, generator=gen, dtype=dtype) * 3 + 0.5,
        orient_bin=torch.randint(0, NUM_BINS, (b,), generator=gen),
        orient_residual=torch.stack([angle.sin(), angle.cos()], 1),
        depth=torch.rand(b, generator=gen, dtype=dtype) * 60 + 3,
        box2d=box2d,
        depth_map=torch.randint(0, k + 1, (b, *grid), generator=gen),
    )


def random_raw(b: int, gen: torch.Generator, dtype=torch.float64, grid=(4, 12), k: int = 80) -> dict:
    """Raw head outputs plus depth-map logits, all leaf tensors requiring grad."""
    shapes = {"class_logits": (b, 9), "lrtb_raw": (b, 4), "xy_raw": (b, 2), "size_raw": (b, 3),
              "orient_raw": (b, 3 * NUM_BINS), "depth_raw": (b, 2), "depth_logits": (b, k + 1, *grid)}
    raw = {n: torch.randn(s, generator=gen, dtype=dtype) for n, s in shapes.items()}
    raw["lrtb_raw"] = raw["lrtb_raw"] - 2.0
    raw["depth_raw"][:, 0] = raw["depth_raw"][:, 0] * 0.5 + 3.0
    for t in raw.values():
        t.requires_grad_(True)
    return raw


def prediction(raw: dict) -> GroundingPrediction:
    return GroundingPrediction(raw["class_logits"], raw["lrtb_raw"], raw["xy_raw"], raw["size_raw"],
                               raw["orient_raw"], raw["depth_raw"])


def fused_depth(raw: dict, bins: DepthBins | None = None):
    bins = bins or DepthBins()
    pred = prediction(raw)
    exp = expected_depth(raw["depth_logits"], bins.centers_tensor(raw["depth_logits"].dtype))
    return final_depth(pred.d_reg, exp, pred.xy3d)


def finite_difference_check(fn, raw: dict, step: float = 1e-5, rel_tol: float = 1e-3, abs_tol: float = 1e-6):
    """Central differences on every raw input entry.

    An entry passes if its relative error is within ``rel_tol``, or, when the
    numeric gradient is below 1e-3 in magnitude, its absolute error is within
    ``abs_tol``. Returns (n_checked, worst relative error, list of failures).
    """
    loss = fn(raw)
    grads = torch.autograd.grad(loss, list(raw.values()))
    checked, worst, failures = 0, 0.0, []
    with torch.no_grad():
        for (name, t), g in zip(raw.items(), grads):
            flat, gflat = t.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn(raw).item()
                flat[i] = orig - step
                down = fn(raw).item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                ana = gflat[i].item()
                err = abs(num - ana)
                rel = err / max(abs(num), abs(ana), 1e-12)
                ok = rel <= rel_tol or (abs(num) < 1e-3 and err <= abs_tol)
                checked += 1
                if abs(num) >= 1e-3:
                    worst = max(worst, rel)
                if not ok:
                    failures.append((name, i, num, ana))
    return checked, worst, failures


def monte_carlo_iou(a: OrientedBox3D, b: OrientedBox3D, n: int, rng) -> float:
    """Rejection sampling over the joint axis-aligned bounding volume."""
    ca, cb = a.corners(), b.corners()
    lo = np.minimum(ca.min(0), cb.min(0))
    hi = np.maximum(ca.max(0), cb.max(0))
    pts = rng.uniform(lo, hi, size=(n, 3))

    def inside(box):
        d = pts - box.center
        c, s = math.cos(box.ry), math.sin(box.ry)
        along = d[:, 0] * c - d[:, 2] * s  # projection on the length axis (cos ry, 0, -sin ry)
        across = d[:, 0] * s + d[:, 2] * c
        return (np.abs(along) <= box.l / 2) & (np.abs(across) <= box.w / 2) & (np.abs(d[:, 1]) <= box.h / 2)

    ia, ib = inside(a), inside(b)
    union = (ia | ib).sum()
    return float((ia & ib).sum() / union) if union else 0.0
