"""Camera and oriented-box geometry in the KITTI camera frame.

Frame convention: x right, y down, z forward. Boxes are parameterized by their
geometric center, (h, w, l) extents and a yaw ``ry`` about the vertical axis;
the box's local length axis points along ``(cos ry, 0, -sin ry)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

# Relation thresholds (meters unless noted).
NEXT_TO_LENGTH_FACTOR = 2.0
FAR_FROM_DISTANCE = 10.0
SIDE_MARGIN = 1.0


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    theta = math.fmod(theta + math.pi, 2.0 * math.pi)
    if theta <= 0.0:
        theta += 2.0 * math.pi
    return theta - math.pi


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.image_w and 0 <= self.cy < self.image_h):
            raise ValueError("principal point must lie inside the image")
        if self.image_w % 64 or self.image_h % 64:
            raise ValueError(f"image size {self.image_w}x{self.image_h} not divisible by 64")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.image_w, "h": self.image_h}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["w"]), int(d["h"]))


@dataclass(frozen=True)
class OrientedBox3D:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    ry: float

    def __post_init__(self) -> None:
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise ValueError(f"box dimensions must be positive, got {(self.h, self.w, self.l)}")
        if not (-math.pi < self.ry <= math.pi):
            object.__setattr__(self, "ry", wrap_angle(self.ry))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l

    def bev_corners(self) -> np.ndarray:
        """(4, 2) array of (x, z) footprint corners, counter-clockwise in the x-z plane."""
        c, s = math.cos(self.ry), math.sin(self.ry)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        xs = c * local[:, 0] + s * local[:, 1]
        zs = -s * local[:, 0] + c * local[:, 1]
        return np.stack([xs + self.x, zs + self.z], axis=1)

    def corners(self) -> np.ndarray:
        """(8, 3) corners; first four at the top (smaller y), last four at the bottom."""
        bev = self.bev_corners()
        top = np.column_stack([bev[:, 0], np.full(4, self.y - self.h / 2), bev[:, 1]])
        bottom = np.column_stack([bev[:, 0], np.full(4, self.y + self.h / 2), bev[:, 1]])
        return np.vstack([top, bottom])

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "z": self.z, "h": self.h, "w": self.w,
                "l": self.l, "ry": self.ry}

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox3D":
        return cls(d["x"], d["y"], d["z"], d["h"], d["w"], d["l"], d["ry"])


@dataclass(frozen=True)
class Box2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self) -> None:
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(f"degenerate 2D box {self}")

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))

    def to_dict(self) -> dict:
        return {"u_min": self.u_min, "v_min": self.v_min, "u_max": self.u_max, "v_max": self.v_max}

    @classmethod
    def from_dict(cls, d: dict) -> "Box2D":
        return cls(d["u_min"], d["v_min"], d["u_max"], d["v_max"])


@dataclass(frozen=True)
class SpatialRelation:
    kind: str  # horizontal_proximity | between | allocentric
    detail: str
    anchors: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.kind == "between":
            if len(self.anchors) != 2:
                raise ValueError("between needs exactly two anchors")
            # canonical order so that between(a, b) == between(b, a)
            object.__setattr__(self, "anchors", tuple(sorted(self.anchors)))
        elif self.kind in ("horizontal_proximity", "allocentric"):
            if len(self.anchors) > 1:
                raise ValueError(f"{self.kind} takes at most one anchor")
        else:
            raise ValueError(f"unknown relation kind {self.kind!r}")


# --------------------------------------------------------------------------
# projection


def project_point(p: Sequence[float], cam: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = p
    if z <= 0:
        raise ValueError(f"cannot project point with non-positive depth z={z}")
    return (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)


def backproject_point(uv: Sequence[float], depth: float, cam: CameraIntrinsics) -> tuple[float, float, float]:
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = uv
    return ((u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, float(depth))


def project_box(box: OrientedBox3D, cam: CameraIntrinsics, clip: bool = True) -> Box2D | None:
    """Axis-aligned bound of the projected corners; ``None`` if nothing is visible."""
    pts = box.corners()
    if np.any(pts[:, 2] <= 1e-3):
        raise ValueError("box crosses the camera plane")
    u = cam.fx * pts[:, 0] / pts[:, 2] + cam.cx
    v = cam.fy * pts[:, 1] / pts[:, 2] + cam.cy
    u0, u1, v0, v1 = u.min(), u.max(), v.min(), v.max()
    if clip:
        u0, u1 = max(u0, 0.0), min(u1, float(cam.image_w))
        v0, v1 = max(v0, 0.0), min(v1, float(cam.image_h))
        if u0 >= u1 or v0 >= v1:
            return None
    return Box2D(float(u0), float(v0), float(u1), float(v1))


# --------------------------------------------------------------------------
# polygon clipping / IoU


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(poly))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip ``subject`` against convex ``clipper``."""
    if _signed_area(clipper) < 0:
        clipper = clipper[::-1]
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.asarray(output, dtype=np.float64).reshape(-1, 2)


def bev_intersection_area(a: OrientedBox3D, b: OrientedBox3D) -> float:
    return polygon_area(clip_polygon(a.bev_corners(), b.bev_corners()))


def iou3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    y_overlap = min(a.y + a.h / 2, b.y + b.h / 2) - max(a.y - a.h / 2, b.y - b.h / 2)
    if y_overlap <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.x - b.x, a.z - b.z) >= ra + rb:
        return 0.0
    inter = bev_intersection_area(a, b) * y_overlap
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    ih = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    return inter / (a.area + b.area - inter)


def giou2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    ih = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    enclosing = (max(a.u_max, b.u_max) - min(a.u_min, b.u_min)) * (
        max(a.v_max, b.v_max) - min(a.v_min, b.v_min))
    return inter / union - (enclosing - union) / enclosing


# --------------------------------------------------------------------------
# scalar attributes


def azimuth_deg(box: OrientedBox3D) -> float:
    """Bearing in degrees: 90 straight ahead, 0 toward +x (right), 180 toward -x."""
    return math.degrees(math.atan2(box.z, box.x))


def distance_m(box: OrientedBox3D) -> float:
    """Forward depth, the quantity the near/medium/far subsets threshold on."""
    return box.z


# --------------------------------------------------------------------------
# relations


def _bev(box: OrientedBox3D) -> np.ndarray:
    return np.array([box.x, box.z])


def allocentric_relations(target: OrientedBox3D, anchor: OrientedBox3D, anchor_id: int) -> list[SpatialRelation]:
    rels = []
    dx = target.x - anchor.x
    dz = target.z - anchor.z
    if dx < -SIDE_MARGIN:
        rels.append(SpatialRelation("allocentric", "left_of", (anchor_id,)))
    elif dx > SIDE_MARGIN:
        rels.append(SpatialRelation("allocentric", "right_of", (anchor_id,)))
    if dz < -SIDE_MARGIN:
        rels.append(SpatialRelation("allocentric", "in_front_of", (anchor_id,)))
    elif dz > SIDE_MARGIN:
        rels.append(SpatialRelation("allocentric", "behind", (anchor_id,)))
    return rels


def proximity_relation(target: OrientedBox3D, anchor: OrientedBox3D, anchor_id: int) -> SpatialRelation | None:
    gap = float(np.linalg.norm(_bev(target) - _bev(anchor)))
    if gap < NEXT_TO_LENGTH_FACTOR * 0.5 * (target.l + anchor.l):
        return SpatialRelation("horizontal_proximity", "next_to", (anchor_id,))
    if gap > FAR_FROM_DISTANCE:
        return SpatialRelation("horizontal_proximity", "far_from", (anchor_id,))
    return None


def is_between(target: OrientedBox3D, a: OrientedBox3D, b: OrientedBox3D) -> bool:
    pa, pb, pt = _bev(a), _bev(b), _bev(target)
    seg = pb - pa
    seg_len2 = float(seg @ seg)
    if seg_len2 == 0.0:
        return False
    t = float((pt - pa) @ seg) / seg_len2
    if not (0.0 < t < 1.0):
        return False
    perp = float(np.linalg.norm(pt - (pa + t * seg)))
    return perp <= 0.5 * (a.w + b.w)


def spatial_relations(target_id: int, boxes: dict[int, OrientedBox3D],
                      categories: dict[int, str] | None = None) -> set[SpatialRelation]:
    """All relation predicates holding for ``target_id`` against the other scene objects.

    ``between`` only considers anchor pairs of the same category; with no
    category map every pair qualifies.
    """
    if target_id not in boxes:
        raise KeyError(f"unknown target id {target_id}")
    target = boxes[target_id]
    others = sorted(k for k in boxes if k != target_id)
    out: set[SpatialRelation] = set()
    for k in others:
        out.update(allocentric_relations(target, boxes[k], k))
        prox = proximity_relation(target, boxes[k], k)
        if prox is not None:
            out.add(prox)
    for a, b in combinations(others, 2):
        if categories is not None and categories[a] != categories[b]:
            continue
        if is_between(target, boxes[a], boxes[b]):
            out.add(SpatialRelation("between", "between", (a, b)))
    return out


def ordinal_rank(target_id: int, group: dict[int, OrientedBox3D], cam: CameraIntrinsics) -> int:
    """1-based left-to-right rank by projected center u; ties go to the nearer box."""
    if target_id not in group:
        raise KeyError(f"unknown target id {target_id}")
    keyed = sorted(group, key=lambda k: (project_point(group[k].center, cam)[0], group[k].z, k))
    return keyed.index(target_id) + 1


def observation_angle(box: OrientedBox3D) -> float:
    """Yaw relative to the viewing ray: alpha = ry - atan2(x, z)."""
    return wrap_angle(box.ry - math.atan2(box.x, box.z))


def yaw_from_observation(alpha: float, x: float, z: float) -> float:
    return wrap_angle(alpha + math.atan2(x, z))


def mirror_x(box: OrientedBox3D) -> OrientedBox3D:
    return OrientedBox3D(-box.x, box.y, box.z, box.h, box.w, box.l, wrap_angle(math.pi - box.ry))


def rigid_transform(box: OrientedBox3D, yaw: float, t: Iterable[float]) -> OrientedBox3D:
    """Rotate about the vertical axis by ``yaw`` then translate by ``t``."""
    tx, ty, tz = t
    c, s = math.cos(yaw), math.sin(yaw)
    x = c * box.x + s * box.z
    z = -s * box.x + c * box.z
    return OrientedBox3D(x + tx, box.y + ty, z + tz, box.h, box.w, box.l, wrap_angle(box.ry + yaw))
