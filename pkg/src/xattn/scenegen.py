"""Synthetic multi-camera scenes with planted, class-distinct objects.

A scene is a ring of ``n_c`` camera images over uniform background noise.
Each object is a filled primitive whose shape and color are a pure function
of its class id, placed entirely inside one camera. Object centers live in
panoramic coordinates: ``x`` in ``[0, n_c)`` (integer part = camera index,
fraction = horizontal position), ``y`` in ``[0, 1)``; the radius is a
fraction of the image height.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xattn.config import ScenegenParams
from xattn.tensorio import TensorIOError, load_tensor, save_tensor

BACKGROUND_GRAY = 0.5

# renderer lookup tables; (shape, color) pairs stay distinct for any two
# class ids below lcm(len(SHAPES), len(COLORS)) = 12
CLASS_SHAPES = ("circle", "square", "triangle", "diamond")
CLASS_COLORS = (
    (0.90, 0.15, 0.15),
    (0.15, 0.80, 0.20),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85),
    (0.10, 0.85, 0.85),
)
MAX_SEPARABLE_CLASSES = 12


class SceneTooCrowdedError(RuntimeError):
    pass


def class_style(class_id: int) -> tuple[str, tuple[float, float, float]]:
    """Shape and fill color for a class id."""
    return CLASS_SHAPES[class_id % len(CLASS_SHAPES)], CLASS_COLORS[class_id % len(CLASS_COLORS)]


@dataclass
class GroundTruthObject:
    class_id: int
    x: float  # panoramic, [0, n_c)
    y: float  # [0, 1)
    radius: float  # (0, 0.5], fraction of image height

    @property
    def camera(self) -> int:
        return int(math.floor(self.x))

    @property
    def frac_x(self) -> float:
        return self.x - math.floor(self.x)


@dataclass
class Scene:
    id: str
    images: np.ndarray  # [n_c, H, W, 3] float32 in [0, 1]
    objects: list[GroundTruthObject]
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and self.seed == other.seed
            and self.objects == other.objects
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
        )

    @property
    def n_cameras(self) -> int:
        return self.images.shape[0]


def _shape_mask(shape: str, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx = xs - cx
    dy = ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        half = r / math.sqrt(2.0)
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        # upward triangle inscribed in the circumradius circle
        top = (cx, cy - r)
        left = (cx - r * math.sqrt(3) / 2, cy + r / 2)
        right = (cx + r * math.sqrt(3) / 2, cy + r / 2)

        def half_plane(a, b):
            return (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])

        s1 = half_plane(top, right)
        s2 = half_plane(right, left)
        s3 = half_plane(left, top)
        return (s1 >= 0) & (s2 >= 0) & (s3 >= 0)
    raise ValueError(f"unknown shape {shape!r}")


def _circle_overlap_area(d: float, r1: float, r2: float) -> float:
    """Intersection area of two discs with center distance d."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        rm = min(r1, r2)
        return math.pi * rm * rm
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    a3 = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    return a1 + a2 - a3


def generate_scene(rng_seed: int, params: ScenegenParams, scene_id: str | None = None) -> Scene:
    """Deterministically render one scene from a seed.

    Placements are rejection-sampled so no two primitives overlap by more
    than ``params.max_overlap`` of the smaller one's area (circumradius
    approximation); raises :class:`SceneTooCrowdedError` after
    ``params.max_attempts`` failed draws for one object.
    """
    if params.n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if not 0.0 < params.radius_min <= params.radius_max <= 0.5:
        raise ValueError("radii must satisfy 0 < radius_min <= radius_max <= 0.5")
    h, w, n_c = params.image_h, params.image_w, params.n_c
    rng = np.random.default_rng(rng_seed)
    amp = params.noise_amplitude
    images = rng.uniform(BACKGROUND_GRAY - amp, BACKGROUND_GRAY + amp, size=(n_c, h, w, 3))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)

    objects: list[GroundTruthObject] = []
    for _ in range(params.n_objects):
        placed = None
        for _attempt in range(params.max_attempts):
            radius = float(rng.uniform(params.radius_min, params.radius_max))
            cam = int(rng.integers(0, n_c))
            margin_x = radius * h / w  # circumradius in pixels is radius*h
            if margin_x >= 0.5:
                continue
            fx = float(rng.uniform(margin_x, 1.0 - margin_x))
            y = float(rng.uniform(radius, 1.0 - radius))
            class_id = int(rng.integers(0, params.n_classes))
            candidate = GroundTruthObject(class_id=class_id, x=cam + fx, y=y, radius=radius)
            if _placement_ok(candidate, objects, params):
                placed = candidate
                break
        if placed is None:
            raise SceneTooCrowdedError("scene too crowded")
        objects.append(placed)

    for obj in objects:
        _render_object(images, obj, h, w)

    sid = scene_id if scene_id is not None else f"S{rng_seed}"
    return Scene(id=sid, images=images, objects=objects, seed=int(rng_seed))


def _placement_ok(obj: GroundTruthObject, others: list[GroundTruthObject], params: ScenegenParams) -> bool:
    h = params.image_h
    for o in others:
        if o.camera != obj.camera:
            continue
        dx = (obj.frac_x - o.frac_x) * params.image_w
        dy = (obj.y - o.y) * h
        d = math.hypot(dx, dy)
        r1 = obj.radius * h
        r2 = o.radius * h
        inter = _circle_overlap_area(d, r1, r2)
        limit = params.max_overlap * math.pi * min(r1, r2) ** 2
        if inter > limit:
            return False
    return True


def _render_object(images: np.ndarray, obj: GroundTruthObject, h: int, w: int) -> None:
    shape, color = class_style(obj.class_id)
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    mask = _shape_mask(shape, xs, ys, obj.frac_x * w, obj.y * h, obj.radius * h)
    images[obj.camera][mask] = np.asarray(color, dtype=np.float32)


def object_mask(obj: GroundTruthObject, h: int, w: int) -> np.ndarray:
    """Boolean pixel footprint of an object inside its camera image."""
    shape, _ = class_style(obj.class_id)
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return _shape_mask(shape, xs, ys, obj.frac_x * w, obj.y * h, obj.radius * h)


def make_dataset(
    seed: int,
    n_scenes: int,
    params: ScenegenParams,
    objects_min: int = 1,
    objects_max: int = 4,
) -> list[Scene]:
    """Generate a list of scenes with per-scene object counts drawn from a range."""
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n_scenes):
        n_objects = int(rng.integers(objects_min, objects_max + 1))
        scene_seed = int(rng.integers(0, 2**63 - 1))
        p = ScenegenParams(
            n_c=params.n_c,
            image_h=params.image_h,
            image_w=params.image_w,
            n_objects=n_objects,
            n_classes=params.n_classes,
            noise_amplitude=params.noise_amplitude,
            radius_min=params.radius_min,
            radius_max=params.radius_max,
            max_overlap=params.max_overlap,
            max_attempts=params.max_attempts,
        )
        scenes.append(generate_scene(scene_seed, p, scene_id=f"S{i}"))
    return scenes


def save_dataset(scenes: list[Scene], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    dims = None
    for scene in scenes:
        n_c, h, w, _ = scene.images.shape
        if dims is None:
            dims = {"n_c": n_c, "H": h, "W": w}
        files = []
        for c in range(n_c):
            name = f"{scene.id}_cam{c}.atns"
            save_tensor(out / name, scene.images[c])
            files.append(name)
        entries.append(
            {
                "id": scene.id,
                "seed": scene.seed,
                "images": files,
                "objects": [
                    {"class_id": o.class_id, "x": o.x, "y": o.y, "radius": o.radius}
                    for o in scene.objects
                ],
            }
        )
    manifest = {"version": 1, "dims": dims or {}, "scenes": entries}
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_dataset(in_dir: str | Path) -> list[Scene]:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise TensorIOError(manifest_path, "file not found") from None
    except json.JSONDecodeError as exc:
        raise TensorIOError(manifest_path, f"invalid JSON: {exc}") from None
    if manifest.get("version") != 1:
        raise TensorIOError(manifest_path, f"unsupported version {manifest.get('version')}")
    dims = manifest.get("dims", {})
    scenes = []
    for entry in manifest.get("scenes", []):
        images = []
        for name in entry["images"]:
            path = root / name
            if not path.exists():
                raise TensorIOError(manifest_path, f"missing tensor file {name}")
            arr = load_tensor(path)
            expected = (dims.get("H"), dims.get("W"), 3)
            if arr.shape != expected:
                raise TensorIOError(path, f"dimension mismatch {arr.shape}, manifest implies {expected}")
            images.append(arr)
        if len(images) != dims.get("n_c"):
            raise TensorIOError(manifest_path, f"scene {entry['id']} has {len(images)} cameras, dims imply {dims.get('n_c')}")
        objects = [
            GroundTruthObject(
                class_id=int(o["class_id"]),
                x=float(o["x"]),
                y=float(o["y"]),
                radius=float(o["radius"]),
            )
            for o in entry["objects"]
        ]
        scenes.append(
            Scene(
                id=str(entry["id"]),
                images=np.stack(images, axis=0),
                objects=objects,
                seed=int(entry["seed"]),
            )
        )
    return scenes
