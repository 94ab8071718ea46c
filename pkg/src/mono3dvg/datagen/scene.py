"""Synthetic street scenes: object placement on a ground plane and flat-shaded rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from ..geometry3d import Box2D, CameraIntrinsics, OrientedBox3D, project_box

CATEGORIES = ("car", "truck", "bus", "tram", "van", "pedestrian", "cyclist",
              "motorcyclist", "person_sitting")
CATEGORY_INDEX = {c: i for i, c in enumerate(CATEGORIES)}
VEHICLES = frozenset({"car", "truck", "bus", "tram", "van"})

# Mean (h, w, l) in meters; roughly the KITTI class statistics.
MEAN_DIMS = {
    "car": (1.53, 1.63, 3.88),
    "truck": (3.25, 2.59, 10.11),
    "bus": (3.20, 2.60, 11.00),
    "tram": (3.53, 2.54, 16.09),
    "van": (2.21, 1.90, 5.08),
    "pedestrian": (1.76, 0.66, 0.84),
    "cyclist": (1.74, 0.60, 1.76),
    "motorcyclist": (1.60, 0.80, 2.00),
    "person_sitting": (1.27, 0.59, 0.80),
}

DEFAULT_CATEGORY_WEIGHTS = {
    "car": 0.50, "van": 0.08, "truck": 0.04, "bus": 0.02, "tram": 0.02,
    "pedestrian": 0.16, "cyclist": 0.08, "motorcyclist": 0.04, "person_sitting": 0.06,
}

COLORS = {
    "black": (25, 25, 28),
    "white": (235, 235, 235),
    "red": (200, 35, 35),
    "blue": (35, 70, 205),
    "green": (40, 160, 70),
    "yellow": (235, 205, 40),
    "gray": (140, 140, 140),
    "orange": (240, 135, 35),
}
SKY = (165, 190, 215)
GROUND = (85, 85, 92)

PLACES = {
    "vehicle": ("on the road", "along the street", "in the parking lane", "near the intersection"),
    "human": ("on the sidewalk", "at the crosswalk", "near the curb", "by the roadside"),
}
STATES = {
    "car": ("parked", "moving", "waiting"),
    "van": ("parked", "moving", "waiting"),
    "truck": ("parked", "moving"),
    "bus": ("stopped", "moving"),
    "tram": ("stopped", "moving"),
    "pedestrian": ("walking", "standing"),
    "cyclist": ("riding", "waiting"),
    "motorcyclist": ("riding", "waiting"),
    "person_sitting": ("sitting",),
}

OCCLUSION_LEVELS = ("none", "partial", "heavy", "full")
CAMERA_HEIGHT = 1.65


class GenerationError(RuntimeError):
    pass


def default_camera(image_w: int = 192, image_h: int = 64) -> CameraIntrinsics:
    # KITTI intrinsics rescaled to a 384-wide image, horizon slightly above mid-height
    scale = image_w / 384.0
    return CameraIntrinsics(224.0 * scale, 224.0 * scale, image_w / 2.0, 60.0 * image_h / 128.0,
                            image_w, image_h)


@dataclass
class SceneConfig:
    image_w: int = 192
    image_h: int = 64
    min_objects: int = 4
    max_objects: int = 8
    z_min: float = 4.0
    z_max: float = 75.0
    x_limit: float = 40.0
    dim_jitter: float = 0.06
    category_weights: dict = field(default_factory=lambda: dict(DEFAULT_CATEGORY_WEIGHTS))
    max_retries: int = 200

    def __post_init__(self) -> None:
        if self.image_w % 64 or self.image_h % 64:
            raise ValueError("image size must be divisible by 64")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object count range")
        if not 0 < self.z_min < self.z_max <= 102.0:
            raise ValueError("object depth range must lie in (0, 102]")

    def camera(self) -> CameraIntrinsics:
        return default_camera(self.image_w, self.image_h)


@dataclass
class ObjectRecord:
    object_id: int
    category: str
    box3d: OrientedBox3D
    box2d: Box2D
    appearance: str
    occlusion: str = "none"
    occluded_fraction: float = 0.0
    truncation: float = 0.0
    place: str = ""
    state: str = ""

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id, "category": self.category,
            "box3d": self.box3d.to_dict(), "box2d": self.box2d.to_dict(),
            "appearance": self.appearance, "occlusion": self.occlusion,
            "occluded_fraction": self.occluded_fraction, "truncation": self.truncation,
            "place": self.place, "state": self.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectRecord":
        return cls(d["object_id"], d["category"], OrientedBox3D.from_dict(d["box3d"]),
                   Box2D.from_dict(d["box2d"]), d["appearance"], d["occlusion"],
                   d.get("occluded_fraction", 0.0), d["truncation"], d.get("place", ""),
                   d.get("state", ""))


@dataclass
class SceneRecord:
    scene_id: str
    camera: CameraIntrinsics
    objects: list[ObjectRecord]
    image: np.ndarray | None = None  # H x W x 3 uint8

    def __post_init__(self) -> None:
        if not self.objects:
            raise ValueError("a scene needs at least one object")

    def get(self, object_id: int) -> ObjectRecord:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(f"object {object_id} not in scene {self.scene_id}")

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "camera": self.camera.to_dict(),
                "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict, image: np.ndarray | None = None) -> "SceneRecord":
        return cls(d["scene_id"], CameraIntrinsics.from_dict(d["camera"]),
                   [ObjectRecord.from_dict(o) for o in d["objects"]], image)


def occlusion_level(fraction: float) -> str:
    if fraction < 0.1:
        return "none"
    if fraction <= 0.5:
        return "partial"
    if fraction <= 0.9:
        return "heavy"
    return "full"


def truncation_fraction(box: OrientedBox3D, cam: CameraIntrinsics) -> float:
    full = project_box(box, cam, clip=False)
    clipped = project_box(box, cam, clip=True)
    if clipped is None:
        return 1.0
    return float(min(max(1.0 - clipped.area / full.area, 0.0), 1.0))


def box_mask(box: Box2D, width: int, height: int) -> np.ndarray:
    """Pixels whose centers fall inside the box."""
    us = np.arange(width) + 0.5
    vs = np.arange(height) + 0.5
    cols = (us >= box.u_min) & (us < box.u_max)
    rows = (vs >= box.v_min) & (vs < box.v_max)
    return rows[:, None] & cols[None, :]


def occluded_fractions(boxes2d: list[Box2D], depths: list[float], width: int, height: int) -> list[float]:
    """Share of each 2D box covered by the boxes of nearer objects (painter's order)."""
    masks = [box_mask(b, width, height) for b in boxes2d]
    order = np.argsort(depths, kind="stable")
    covered = np.zeros((height, width), dtype=bool)
    out = [0.0] * len(boxes2d)
    for idx in order:
        own = masks[idx]
        n = own.sum()
        out[idx] = float((own & covered).sum() / n) if n else 1.0
        covered |= own
    return out


# --------------------------------------------------------------------------
# sampling


def _sample_category(rng: np.random.Generator, weights: dict) -> str:
    names = list(weights)
    p = np.array([weights[n] for n in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=p / p.sum()))]


def _sample_depth(rng: np.random.Generator, cfg: SceneConfig) -> float:
    # three-band mixture so that every depth subset is well represented
    bands = [(cfg.z_min, min(15.0, cfg.z_max)), (15.0, min(35.0, cfg.z_max)), (35.0, cfg.z_max)]
    bands = [b for b in bands if b[1] > b[0]]
    weights = np.array([0.32, 0.40, 0.28][: len(bands)])
    lo, hi = bands[int(rng.choice(len(bands), p=weights / weights.sum()))]
    return float(rng.uniform(lo, hi))


def _sample_box(rng: np.random.Generator, category: str, cfg: SceneConfig, cam: CameraIntrinsics) -> OrientedBox3D:
    mh, mw, ml = MEAN_DIMS[category]
    jit = 1.0 + cfg.dim_jitter * rng.standard_normal(3)
    h, w, l = mh * jit[0], mw * jit[1], ml * jit[2]
    z = _sample_depth(rng, cfg)
    if category in ("truck", "bus", "tram"):
        z = max(z, 10.0)
    half_fov = cam.cx / cam.fx
    x_max = min(cfg.x_limit, 1.05 * half_fov * z)
    x = float(rng.uniform(-x_max, x_max))
    if category in VEHICLES and rng.random() < 0.7:
        ry = rng.choice([-math.pi / 2, math.pi / 2]) + rng.normal(0.0, 0.15)
    else:
        ry = rng.uniform(-math.pi, math.pi)
    y = CAMERA_HEIGHT - h / 2.0
    return OrientedBox3D(x, y, z, h, w, l, float(ry))


def _bev_clear(box: OrientedBox3D, placed: list[OrientedBox3D], margin: float = 0.4) -> bool:
    from ..geometry3d import bev_intersection_area

    grown = OrientedBox3D(box.x, box.y, box.z, box.h, box.w + 2 * margin, box.l + 2 * margin, box.ry)
    for other in placed:
        if math.hypot(box.x - other.x, box.z - other.z) > 0.5 * (
                math.hypot(grown.l, grown.w) + math.hypot(other.l, other.w)):
            continue
        if bev_intersection_area(grown, other) > 0.0:
            return False
    return True


def generate_scene(rng_seed, config: SceneConfig | None = None, scene_id: str = "scene",
                   render: bool = True) -> SceneRecord:
    """Sample and render one scene; identical (seed, config) gives an identical record."""
    cfg = config or SceneConfig()
    cam = cfg.camera()
    rng = np.random.default_rng(rng_seed)
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    boxes: list[OrientedBox3D] = []
    cats: list[str] = []
    retries = 0
    while len(boxes) < n_objects:
        if retries > cfg.max_retries:
            raise GenerationError(f"could not place {n_objects} objects after {retries} retries")
        retries += 1
        cat = _sample_category(rng, cfg.category_weights)
        box = _sample_box(rng, cat, cfg, cam)
        if np.any(box.corners()[:, 2] < 0.5):
            continue
        b2d = project_box(box, cam)
        if b2d is None or b2d.width < 2.0 or b2d.height < 2.0:
            continue
        if truncation_fraction(box, cam) > 0.6:
            continue
        # the projected 3D center must land inside the image
        u = cam.fx * box.x / box.z + cam.cx
        v = cam.fy * box.y / box.z + cam.cy
        if not (1.0 <= u <= cam.image_w - 1.0 and 1.0 <= v <= cam.image_h - 1.0):
            continue
        if not _bev_clear(box, boxes):
            continue
        trial = boxes + [box]
        fr = occluded_fractions([project_box(b, cam) for b in trial], [b.z for b in trial],
                                cam.image_w, cam.image_h)
        if max(fr) > 0.9:
            continue
        boxes.append(box)
        cats.append(cat)

    boxes2d = [project_box(b, cam) for b in boxes]
    occ = occluded_fractions(boxes2d, [b.z for b in boxes], cam.image_w, cam.image_h)
    objects = []
    for i, (cat, box, b2d, f) in enumerate(zip(cats, boxes, boxes2d, occ)):
        kind = "vehicle" if cat in VEHICLES else "human"
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        place = PLACES[kind][int(rng.integers(len(PLACES[kind])))]
        state = STATES[cat][int(rng.integers(len(STATES[cat])))]
        objects.append(ObjectRecord(i, cat, box, b2d, color, occlusion_level(f), f,
                                    truncation_fraction(box, cam), place, state))
    scene = SceneRecord(scene_id, cam, objects)
    if render:
        scene.image = render_scene(scene)
    return scene


# --------------------------------------------------------------------------
# rendering

# corner indices into OrientedBox3D.corners(): 0-3 top, 4-7 bottom
_FACES = (
    ((0, 1, 2, 3), 1.00),  # top
    ((4, 5, 6, 7), 0.45),  # bottom
    ((0, 3, 7, 4), 0.85),  # front (+length end)
    ((1, 2, 6, 5), 0.70),  # rear
    ((0, 1, 5, 4), 0.60),  # side
    ((2, 3, 7, 6), 0.75),  # other side
)


def render_scene(scene: SceneRecord) -> np.ndarray:
    cam = scene.camera
    img = Image.new("RGB", (cam.image_w, cam.image_h), GROUND)
    draw = ImageDraw.Draw(img)
    draw.rectangle([0, 0, cam.image_w, int(round(cam.cy))], fill=SKY)
    for obj in sorted(scene.objects, key=lambda o: -o.box3d.z):
        corners = obj.box3d.corners()
        uv = np.column_stack([cam.fx * corners[:, 0] / corners[:, 2] + cam.cx,
                              cam.fy * corners[:, 1] / corners[:, 2] + cam.cy])
        center = obj.box3d.center
        base = np.array(COLORS[obj.appearance], dtype=np.float64)
        faces = []
        for idx, shade in _FACES:
            pts = corners[list(idx)]
            fc = pts.mean(axis=0)
            # outward normal points away from the box center; keep faces seen from the origin
            normal = fc - center
            if np.dot(normal, -fc) <= 0:
                continue
            faces.append((float(np.linalg.norm(fc)), idx, shade))
        for _, idx, shade in sorted(faces, reverse=True):
            col = tuple(int(c) for c in np.clip(base * shade + 12.0 * (1 - shade), 0, 255))
            draw.polygon([tuple(uv[i]) for i in idx], fill=col)
    return np.asarray(img, dtype=np.uint8)
