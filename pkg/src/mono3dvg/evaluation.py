"""Grounding accuracy at 3D IoU thresholds, subset tables, and two reference baselines."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import collate, iterate_batches
from .datagen.dataset import ExpressionRecord, catrand_select, depth_subset, difficulty_subset
from .datagen.scene import MEAN_DIMS, SceneRecord, occluded_fractions, occlusion_level, truncation_fraction
from .geometry3d import Box2D, CameraIntrinsics, OrientedBox3D, backproject_point, iou3d
from .grounding import assemble_box

ROWS = ("unique", "multiple", "overall", "near", "medium", "far", "easy", "moderate", "hard")
AXES = {"unique": ("unique", "multiple"), "depth": ("near", "medium", "far"),
        "difficulty": ("easy", "moderate", "hard")}


def accuracy(preds: list, gts: list, threshold: float = 0.25) -> float:
    """Share of pairs with iou3d >= threshold; a ``None`` prediction is a miss."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if not gts:
        return 0.0
    hits = sum(p is not None and iou3d(p, g) >= threshold for p, g in zip(preds, gts))
    return hits / len(gts)


def recompute_labels(scene: SceneRecord, target: int) -> dict:
    """Subset labels derived from box geometry alone (stored occlusion/truncation are ignored)."""
    cam = scene.camera
    obj = scene.get(target)
    idx = [o.object_id for o in scene.objects].index(target)
    fractions = occluded_fractions([o.box2d for o in scene.objects], [o.box3d.z for o in scene.objects],
                                   cam.image_w, cam.image_h)
    n_same = sum(o.category == obj.category for o in scene.objects)
    return {
        "unique": "unique" if n_same == 1 else "multiple",
        "depth": depth_subset(obj.box3d.z),
        "difficulty": difficulty_subset(occlusion_level(fractions[idx]), truncation_fraction(obj.box3d, cam)),
    }


def stratify(records: list[ExpressionRecord]) -> dict[str, list[int]]:
    """Row name -> record indices, using recomputed labels."""
    index = {name: [] for name in ROWS}
    for i, r in enumerate(records):
        labels = recompute_labels(r.scene, r.object_id)
        index["overall"].append(i)
        for axis in AXES:
            index[labels[axis]].append(i)
    return index


@dataclass
class EvalResult:
    table: dict  # row -> {"acc@0.25": float, "acc@0.5": float, "n": int}
    mean_ms: float = 0.0
    thresholds: tuple = (0.25, 0.5)
    ious: list = field(default_factory=list)
    name: str = ""

    def acc(self, row: str, threshold: float) -> float:
        return self.table[row][f"acc@{threshold:g}"]

    def check_partitions(self) -> None:
        n = self.table["overall"]["n"]
        for axis, rows in AXES.items():
            if sum(self.table[r]["n"] for r in rows) != n:
                raise AssertionError(f"{axis} subsets do not partition the split")

    def to_dict(self) -> dict:
        return {"name": self.name, "table": self.table, "mean_ms": self.mean_ms,
                "thresholds": list(self.thresholds), "ious": self.ious}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        cols = [f"acc@{t:g}" for t in self.thresholds]
        head = f"{'subset':<10}" + "".join(f"{c:>10}" for c in cols) + f"{'n':>7}"
        lines = [self.name, head, "-" * len(head)] if self.name else [head, "-" * len(head)]
        for row in ROWS:
            r = self.table[row]
            lines.append(f"{row:<10}" + "".join(f"{100 * r[c]:>10.2f}" for c in cols) + f"{r['n']:>7d}")
        lines.append(f"mean inference time: {self.mean_ms:.1f} ms")
        return "\n".join(lines)


def summarize(ious: list[float], records: list[ExpressionRecord], thresholds=(0.25, 0.5),
              mean_ms: float = 0.0, name: str = "") -> EvalResult:
    if len(ious) != len(records):
        raise ValueError("one IoU per record expected")
    ious_arr = np.asarray(ious, dtype=np.float64)
    table = {}
    for row, idx in stratify(records).items():
        entry = {"n": len(idx)}
        for t in thresholds:
            entry[f"acc@{t:g}"] = float((ious_arr[idx] >= t).mean()) if idx else 0.0
        table[row] = entry
    return EvalResult(table, mean_ms, tuple(thresholds), [float(x) for x in ious], name)


def average_results(results: list[EvalResult], name: str = "") -> EvalResult:
    """Row-wise mean of accuracies over repeated evaluations of the same split."""
    first = results[0]
    table = {}
    for row in ROWS:
        entry = {"n": first.table[row]["n"]}
        for t in first.thresholds:
            key = f"acc@{t:g}"
            entry[key] = float(np.mean([r.table[row][key] for r in results]))
        table[row] = entry
    ious = np.mean([r.ious for r in results], axis=0).tolist()
    return EvalResult(table, float(np.mean([r.mean_ms for r in results])), first.thresholds, ious, name)


# --------------------------------------------------------------------------
# baselines


def backproject_2d_baseline(box2d: Box2D, category: str, cam: CameraIntrinsics) -> OrientedBox3D:
    """Lift a 2D box with a pinhole height prior: d = fy * H_prior / pixel height."""
    if box2d.height <= 0:
        raise ValueError("2D box has zero pixel height")
    h, w, l = MEAN_DIMS[category]
    d = cam.fy * h / box2d.height
    x, y, z = backproject_point(box2d.center, d, cam)
    return OrientedBox3D(x, y, z, h, w, l, 0.0)


def evaluate_catrand(records: list[ExpressionRecord], seed: int = 0, thresholds=(0.25, 0.5)) -> EvalResult:
    rng = np.random.default_rng(seed)
    ious, start = [], time.perf_counter()
    for r in records:
        pred = catrand_select(r.scene, r.target.category, rng)
        ious.append(0.0 if pred is None else iou3d(pred, r.target.box3d))
    ms = 1000 * (time.perf_counter() - start) / max(len(records), 1)
    return summarize(ious, records, thresholds, ms, f"CatRand (seed {seed})")


def evaluate_catrand_mean(records, seeds: int = 5, base_seed: int = 0, thresholds=(0.25, 0.5)) -> EvalResult:
    runs = [evaluate_catrand(records, base_seed + s, thresholds) for s in range(seeds)]
    return average_results(runs, f"CatRand (mean of {seeds} seeds)")


def evaluate_backproject(records: list[ExpressionRecord], thresholds=(0.25, 0.5)) -> EvalResult:
    """The 2D grounding result is taken as the ground-truth 2D box of the referred object."""
    ious, start = [], time.perf_counter()
    for r in records:
        t = r.target
        pred = backproject_2d_baseline(t.box2d, t.category, r.scene.camera)
        ious.append(iou3d(pred, t.box3d))
    ms = 1000 * (time.perf_counter() - start) / max(len(records), 1)
    return summarize(ious, records, thresholds, ms, "2D grounding + back-projection")


# --------------------------------------------------------------------------
# model


@dataclass
class Prediction:
    category: str
    box3d: OrientedBox3D
    box2d: Box2D
    d_pred: float
    raw: dict | None = None

    def to_dict(self, debug: bool = False) -> dict:
        d = {"class": self.category, "box2d": self.box2d.to_dict(), "box3d": self.box3d.to_dict(),
             "d_pred": self.d_pred}
        if debug and self.raw is not None:
            d["raw"] = self.raw
        return d


@torch.no_grad()
def predict_batch(model, batch, debug: bool = False) -> list[Prediction]:
    model.eval()
    out = model(batch.images, batch.ids, batch.values, batch.text_mask)
    d_pred = out.d_pred
    preds = []
    for i, rec in enumerate(batch.records):
        hv = out.pred.sample(i)
        box3d, box2d = assemble_box(hv, rec.scene.camera, float(d_pred[i]))
        raw = {k: v[i].tolist() for k, v in out.pred.raw_fields().items()} if debug else None
        preds.append(Prediction(hv.category, box3d, box2d, float(d_pred[i]), raw))
    return preds


def evaluate_model(model, records: list[ExpressionRecord], vocab, batch_size: int = 10,
                   thresholds=(0.25, 0.5), name: str = "model") -> tuple[EvalResult, list[Prediction]]:
    preds, elapsed = [], 0.0
    for chunk in iterate_batches(records, batch_size):
        batch = collate(chunk, vocab)
        start = time.perf_counter()
        preds.extend(predict_batch(model, batch))
        elapsed += time.perf_counter() - start
    ious = [iou3d(p.box3d, r.target.box3d) for p, r in zip(preds, records)]
    ms = 1000 * elapsed / max(len(records), 1)
    return summarize(ious, records, thresholds, ms, name), preds
