"""Stratified dataset construction and JSON-lines serialization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry3d import OrientedBox3D
from .attributes import extract_attributes
from .expressions import bundle_matches, compose_expression
from .scene import GenerationError, SceneConfig, SceneRecord, generate_scene, render_scene

SPLITS = ("train", "val", "test")
DEPTH_SUBSETS = ("near", "medium", "far")


class DatasetConfigError(ValueError):
    pass


def depth_subset(z: float) -> str:
    if z <= 0:
        raise ValueError("depth must be positive")
    if z <= 15.0:
        return "near"
    if z <= 35.0:
        return "medium"
    return "far"


def difficulty_subset(occlusion: str, truncation: float) -> str:
    if occlusion == "none" and truncation < 0.15:
        return "easy"
    if occlusion in ("none", "partial") and truncation < 0.3:
        return "moderate"
    return "hard"


def unique_subset(scene: SceneRecord, target: int) -> str:
    cat = scene.get(target).category
    n = sum(o.category == cat for o in scene.objects)
    return "unique" if n == 1 else "multiple"


def subset_labels(scene: SceneRecord, target: int) -> dict:
    obj = scene.get(target)
    return {
        "unique": unique_subset(scene, target),
        "depth": depth_subset(obj.box3d.z),
        "difficulty": difficulty_subset(obj.occlusion, obj.truncation),
    }


@dataclass
class ExpressionRecord:
    scene_id: str
    object_id: int
    text: str
    subsets: dict
    split: str
    scene: SceneRecord
    mentions: dict = field(default_factory=dict)

    @property
    def target(self):
        return self.scene.get(self.object_id)

    def to_dict(self) -> dict:
        obj = self.target
        return {
            "scene_id": self.scene_id,
            "object_id": self.object_id,
            "category": obj.category,
            "box3d": obj.box3d.to_dict(),
            "box2d": obj.box2d.to_dict(),
            "text": self.text,
            "subsets": dict(self.subsets),
            "split": self.split,
            "camera": self.scene.camera.to_dict(),
            "image": f"{self.scene_id}.png",
            "scene": self.scene.to_dict(),
            "mentions": _jsonable(self.mentions),
        }

    @classmethod
    def from_dict(cls, d: dict, image: np.ndarray | None = None) -> "ExpressionRecord":
        scene = SceneRecord.from_dict(d["scene"], image)
        return cls(d["scene_id"], d["object_id"], d["text"], d["subsets"], d["split"], scene,
                   d.get("mentions", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    return obj


@dataclass
class DatasetConfig:
    splits: dict = field(default_factory=lambda: {"train": 500, "val": 100, "test": 100})
    seed: int = 0
    unique_fraction: float = 0.2
    depth_mix: tuple = (0.26, 0.43, 0.31)
    max_attempts: int = 60
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self) -> None:
        if isinstance(self.scene, dict):
            self.scene = SceneConfig(**self.scene)
        self.depth_mix = tuple(self.depth_mix)
        if not 0.0 <= self.unique_fraction <= 1.0:
            raise DatasetConfigError("unique_fraction must lie in [0, 1]")
        if len(self.depth_mix) != 3 or abs(sum(self.depth_mix) - 1.0) > 1e-6:
            raise DatasetConfigError("depth_mix must be three fractions summing to 1")
        for name, n in self.splits.items():
            if name not in SPLITS or n < 0:
                raise DatasetConfigError(f"bad split entry {name}={n}")
        if self.scene.z_max <= 35.0 and self.depth_mix[2] > 0:
            raise DatasetConfigError("far quota requested but scenes never go past 35 m")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_mix"] = list(self.depth_mix)
        return d


def _quotas(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of n items."""
    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _row_strata(n: int, cfg: DatasetConfig, rng: np.random.Generator) -> list[tuple[bool, str]]:
    n_unique = _quotas(n, [cfg.unique_fraction, 1 - cfg.unique_fraction])[0]
    uniq = [True] * n_unique + [False] * (n - n_unique)
    depth = []
    for name, k in zip(DEPTH_SUBSETS, _quotas(n, cfg.depth_mix)):
        depth += [name] * k
    uniq = [uniq[i] for i in rng.permutation(n)]
    depth = [depth[i] for i in rng.permutation(n)]
    return list(zip(uniq, depth))


def make_expression(scene: SceneRecord, target: int, seed, split: str = "train") -> ExpressionRecord:
    bundle = extract_attributes(scene, target)
    text, mentions = compose_expression(bundle, seed)
    distractors = [extract_attributes(scene, o.object_id) for o in scene.objects
                   if o.category == bundle.category and o.object_id != target]
    if any(bundle_matches(mentions, d) for d in distractors):
        text, mentions = compose_expression(bundle, seed, force_ordinal=True)
    return ExpressionRecord(scene.scene_id, target, text, subset_labels(scene, target), split,
                            scene, mentions)


def generate_split(split: str, n: int, cfg: DatasetConfig) -> list[ExpressionRecord]:
    split_key = SPLITS.index(split)
    rng = np.random.default_rng([cfg.seed, split_key, 7])
    rows = []
    for i, (want_unique, want_depth) in enumerate(_row_strata(n, cfg, rng)):
        scene_id = f"{split}_{i:06d}"
        for attempt in range(cfg.max_attempts):
            seed = [cfg.seed, split_key, i, attempt]
            try:
                scene = generate_scene(seed, cfg.scene, scene_id, render=False)
            except GenerationError:
                continue
            candidates = [o.object_id for o in scene.objects
                          if (unique_subset(scene, o.object_id) == "unique") == want_unique
                          and depth_subset(o.box3d.z) == want_depth]
            if candidates:
                break
        else:
            raise DatasetConfigError(
                f"could not satisfy stratum unique={want_unique}, depth={want_depth} "
                f"for row {scene_id} in {cfg.max_attempts} attempts")
        pick = np.random.default_rng(seed + [1])
        target = candidates[int(pick.integers(len(candidates)))]
        scene.image = render_scene(scene)
        rows.append(make_expression(scene, target, seed + [2], split))
    return rows


def write_split(rows: list[ExpressionRecord], out_dir: Path, split: str) -> Path:
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{split}.jsonl"
    with open(path, "w") as f:
        for row in rows:
            Image.fromarray(row.scene.image).save(img_dir / f"{row.scene_id}.png", optimize=False)
            f.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
    return path


def build_dataset(cfg: DatasetConfig, out_dir) -> dict:
    """Generate every split and write ``<split>.jsonl`` plus ``images/``; returns row counts."""
    counts = {}
    for split in SPLITS:
        n = cfg.splits.get(split, 0)
        rows = generate_split(split, n, cfg)
        write_split(rows, out_dir, split)
        counts[split] = len(rows)
    return counts


def load_split(data_dir, split: str, load_images: bool = True) -> list[ExpressionRecord]:
    data_dir = Path(data_dir)
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            image = None
            if load_images:
                image = np.asarray(Image.open(data_dir / "images" / d["image"]).convert("RGB"))
            rows.append(ExpressionRecord.from_dict(d, image))
    return rows


def catrand_select(scene: SceneRecord, category: str, rng: np.random.Generator) -> OrientedBox3D | None:
    """A uniformly drawn ground-truth box of ``category``; ``None`` means abstain."""
    matches = [o.box3d for o in scene.objects if o.category == category]
    if not matches:
        return None
    return matches[int(rng.integers(len(matches)))]
