"""Per-object attribute bundles: the inputs the expression templates are filled from."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..geometry3d import SpatialRelation, azimuth_deg, distance_m, ordinal_rank, spatial_relations
from .scene import SceneRecord

ORIENTATION_TAGS = (
    "right",
    "toward_right",
    "toward",
    "toward_left",
    "left",
    "away_left",
    "away",
    "away_right",
)


def orientation_tag(ry: float) -> str:
    """Quantize yaw into 8 compass sectors; sector 0 heads along +x."""
    k = int(round(ry / (math.pi / 4))) % 8
    return ORIENTATION_TAGS[k]


@dataclass
class AttributeBundle:
    object_id: int
    category: str
    appearance: str
    occlusion: str
    truncation: float
    place: str
    state: str
    ordinal: int
    n_same: int
    height: float
    width: float
    length: float
    orientation: str
    distance: float
    azimuth: float
    relations: frozenset = field(default_factory=frozenset)
    # anchor id -> (category, appearance), so relations can be verbalized
    anchors: dict = field(default_factory=dict)


def extract_attributes(scene: SceneRecord, target: int) -> AttributeBundle:
    obj = scene.get(target)
    same = {o.object_id: o.box3d for o in scene.objects if o.category == obj.category}
    boxes = {o.object_id: o.box3d for o in scene.objects}
    cats = {o.object_id: o.category for o in scene.objects}
    rels = spatial_relations(target, boxes, cats)
    return AttributeBundle(
        object_id=target,
        category=obj.category,
        appearance=obj.appearance,
        occlusion=obj.occlusion,
        truncation=obj.truncation,
        place=obj.place,
        state=obj.state,
        ordinal=ordinal_rank(target, same, scene.camera),
        n_same=len(same),
        height=obj.box3d.h,
        width=obj.box3d.w,
        length=obj.box3d.l,
        orientation=orientation_tag(obj.box3d.ry),
        distance=distance_m(obj.box3d),
        azimuth=azimuth_deg(obj.box3d),
        relations=frozenset(rels),
        anchors={o.object_id: (o.category, o.appearance) for o in scene.objects if o.object_id != target},
    )


def describe_relation(rel: SpatialRelation, anchors: dict) -> tuple:
    """Relation as it reads in text: anchors replaced by their (category, color)."""
    return (rel.kind, rel.detail, tuple(sorted(anchors[a] for a in rel.anchors)))
