"""Domain data model, synthetic dataset generation, annotation IO and scale statistics.

Boxes are kept in center format (x_center, y_center, width, height) everywhere
inside the package; the on-disk annotation JSON uses corner format
[x, y, w, h] like most detection datasets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, SchemaError

# Coordinates written to annotation JSON are rounded to this many decimals so
# that load -> save round-trips are idempotent at the JSON level.
_COORD_DECIMALS = 4


@dataclass
class Box:
    """Axis-aligned rectangle in center format, pixel units."""

    x_center: float
    y_center: float
    width: float
    height: float

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner representation."""
        return (
            self.x_center - self.width / 2,
            self.y_center - self.height / 2,
            self.x_center + self.width / 2,
            self.y_center + self.height / 2,
        )

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_corner_size(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x + w / 2, y + h / 2, w, h)

    def clipped(self, image_width: float, image_height: float) -> "Box":
        """Clip to the image rectangle. The clipped box must keep positive size."""
        x1, y1, x2, y2 = self.corners()
        x1, x2 = max(x1, 0.0), min(x2, image_width)
        y1, y2 = max(y1, 0.0), min(y2, image_height)
        if x2 <= x1 or y2 <= y1:
            raise ValueError(
                f"box {self} does not intersect image {image_width}x{image_height}"
            )
        return Box.from_corners(x1, y1, x2, y2)


@dataclass
class Annotation:
    box: Box
    category_id: int


@dataclass
class ImageSample:
    id: int
    width: int
    height: int
    pixels: np.ndarray  # [3, H, W] float32 in [0, 1]
    annotations: list[Annotation]


@dataclass
class Dataset:
    samples: list[ImageSample]
    categories: dict[int, str]  # insertion-ordered id -> name

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in dataset")
        if len(self.categories) < 1:
            raise ValueError("dataset needs at least one category")

    @property
    def num_categories(self) -> int:
        return len(self.categories)


@dataclass
class ScaleStats:
    """Per-image scale-variation statistic.

    ``per_image_ratio`` holds sqrt(max box area) / sqrt(min box area) for every
    image with at least two counted objects; ``fraction_gt_2x`` is the fraction
    of those ratios strictly greater than 2.
    """

    fraction_gt_2x: float
    per_image_ratio: list[float]


# ---------------------------------------------------------------------------
# Synthetic dataset generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    image_size: int = 128
    num_categories: int = 10
    num_images: int = 64
    objects_per_image: tuple[int, int] = (2, 6)
    object_size: tuple[float, float] = (6.0, 48.0)  # sqrt-area range, >= 8x span default
    # When set, the first two objects of every image are forced to the size
    # extremes (min, max) with square aspect, pinning the per-image ratio.
    force_size_extremes: bool = False
    aspect_jitter: float = 0.25
    noise_level: float = 0.04
    category_names: tuple[str, ...] = field(default=())

    def validate(self):
        lo, hi = self.objects_per_image
        if lo > hi or lo < 0:
            raise ConfigError(f"invalid objects_per_image range ({lo}, {hi})")
        smin, smax = self.object_size
        if smin > smax or smin <= 0:
            raise ConfigError(f"invalid object_size range ({smin}, {smax})")
        if smax >= self.image_size:
            raise ConfigError(
                f"object_size max {smax} does not fit image_size {self.image_size}"
            )
        if self.num_categories < 1:
            raise ConfigError("num_categories must be >= 1")
        if self.force_size_extremes and hi >= 2 and lo < 2:
            raise ConfigError("force_size_extremes needs objects_per_image >= 2")


# One visually distinct base color per category, cycled if K > 10.
_PALETTE = np.array(
    [
        (0.85, 0.30, 0.25),
        (0.25, 0.60, 0.85),
        (0.30, 0.75, 0.35),
        (0.90, 0.75, 0.20),
        (0.65, 0.35, 0.80),
        (0.90, 0.50, 0.15),
        (0.20, 0.75, 0.70),
        (0.80, 0.35, 0.60),
        (0.55, 0.65, 0.20),
        (0.45, 0.45, 0.90),
    ],
    dtype=np.float64,
)


def _category_texture(category_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Texture intensity in [0, 1] as a function of normalized object coords.

    Patterns are defined in coordinates normalized by the object size, so the
    same category renders the same texture at any scale.
    """
    freq = 2.0 + (category_id % 5)
    kind = category_id % 4
    if kind == 0:
        pat = np.sin(2 * np.pi * freq * u)
    elif kind == 1:
        pat = np.sin(2 * np.pi * freq * v)
    elif kind == 2:
        pat = np.sign(np.sin(2 * np.pi * freq * u) * np.sin(2 * np.pi * freq * v))
    else:
        r = np.sqrt((u - 0.5) ** 2 + (v - 0.5) ** 2)
        pat = np.sin(2 * np.pi * freq * r)
    return 0.5 + 0.5 * pat


def _shape_mask(category_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean fill mask of the category's shape in normalized coords."""
    kind = category_id % 3
    if kind == 0:  # rectangle fills its bounding box
        return (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if kind == 1:  # ellipse inscribed in the box
        return ((u - 0.5) * 2) ** 2 + ((v - 0.5) * 2) ** 2 <= 1.0
    # diamond
    return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5


def _render_object(pixels: np.ndarray, box: Box, category_id: int, shade: float):
    """Paint a filled textured shape in-place onto [3, H, W] pixels."""
    _, img_h, img_w = pixels.shape
    x1, y1, x2, y2 = box.corners()
    ix1, iy1 = max(int(math.floor(x1)), 0), max(int(math.floor(y1)), 0)
    ix2, iy2 = min(int(math.ceil(x2)), img_w), min(int(math.ceil(y2)), img_h)
    if ix2 <= ix1 or iy2 <= iy1:
        return
    xs = np.arange(ix1, ix2, dtype=np.float64) + 0.5
    ys = np.arange(iy1, iy2, dtype=np.float64) + 0.5
    u = (xs[None, :] - x1) / box.width
    v = (ys[:, None] - y1) / box.height
    u = np.broadcast_to(u, (len(ys), len(xs)))
    v = np.broadcast_to(v, (len(ys), len(xs)))
    mask = _shape_mask(category_id, u, v)
    if not mask.any():
        return
    tex = _category_texture(category_id, u, v)
    color = _PALETTE[category_id % len(_PALETTE)] * shade
    patch = pixels[:, iy1:iy2, ix1:ix2]
    intensity = (0.35 + 0.65 * tex)[None] * color[:, None, None]
    patch[:, mask] = np.clip(intensity[:, mask], 0.0, 1.0).astype(np.float32)


def generate_synthetic(config: SynthConfig, seed: int) -> Dataset:
    """Generate a deterministic synthetic detection dataset.

    Pure function of (config, seed): the same arguments always produce
    byte-identical pixel arrays and annotations. Every annotation box lies
    fully inside its image, and its geometry is exactly the geometry used to
    rasterize the object.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    size = config.image_size
    smin, smax = config.object_size
    names = list(config.category_names) or [
        f"class_{k}" for k in range(config.num_categories)
    ]
    if len(names) != config.num_categories:
        raise ConfigError(
            f"{len(names)} category names for {config.num_categories} categories"
        )

    samples = []
    for image_id in range(config.num_images):
        base = 0.10 + 0.05 * rng.random()
        pixels = np.full((3, size, size), base, dtype=np.float32)
        if config.noise_level > 0:
            pixels += rng.normal(0.0, config.noise_level, (3, size, size)).astype(
                np.float32
            )
            np.clip(pixels, 0.0, 1.0, out=pixels)

        n_objects = int(rng.integers(config.objects_per_image[0],
                                     config.objects_per_image[1] + 1))
        annotations = []
        for j in range(n_objects):
            category = int(rng.integers(config.num_categories))
            if config.force_size_extremes and j < 2:
                scale = smin if j == 0 else smax
                aspect = 1.0
            else:
                scale = float(rng.uniform(smin, smax))
                aspect = float(np.exp(rng.uniform(-config.aspect_jitter,
                                                  config.aspect_jitter)))
            w = scale * math.sqrt(aspect)
            h = scale / math.sqrt(aspect)
            # Keep the whole box inside the image so clipping is the identity.
            cx = float(rng.uniform(w / 2, size - w / 2))
            cy = float(rng.uniform(h / 2, size - h / 2))
            box = Box(cx, cy, w, h)
            _render_object(pixels, box, category, shade=float(rng.uniform(0.8, 1.0)))
            annotations.append(Annotation(box=box, category_id=category))

        samples.append(
            ImageSample(
                id=image_id,
                width=size,
                height=size,
                pixels=pixels,
                annotations=annotations,
            )
        )

    categories = {k: names[k] for k in range(config.num_categories)}
    return Dataset(samples=samples, categories=categories)


# ---------------------------------------------------------------------------
# Annotation IO (COCO-style corner boxes on disk)
# ---------------------------------------------------------------------------

def dataset_to_annotation_dict(dataset: Dataset) -> dict:
    """Build the annotation JSON structure (corner-format boxes)."""
    images = [
        {
            "id": s.id,
            "width": s.width,
            "height": s.height,
            "file_name": f"images/img_{s.id:06d}.png",
        }
        for s in dataset.samples
    ]
    annotations = []
    ann_id = 0
    for s in dataset.samples:
        for ann in s.annotations:
            x1, y1, _, _ = ann.box.corners()
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": s.id,
                    "category_id": ann.category_id,
                    "bbox": [
                        round(x1, _COORD_DECIMALS),
                        round(y1, _COORD_DECIMALS),
                        round(ann.box.width, _COORD_DECIMALS),
                        round(ann.box.height, _COORD_DECIMALS),
                    ],
                }
            )
            ann_id += 1
    categories = [{"id": k, "name": v} for k, v in dataset.categories.items()]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write PNG images plus annotations.json under out_dir; returns the JSON path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        arr = np.clip(np.rint(s.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(
            out / "images" / f"img_{s.id:06d}.png"
        )
    path = out / "annotations.json"
    path.write_text(json.dumps(dataset_to_annotation_dict(dataset), indent=2))
    return path


def _require(record: dict, key: str, context: str):
    if key not in record:
        raise SchemaError(f"{context}: missing required key '{key}'")
    return record[key]


def load_annotations(path: str | Path) -> Dataset:
    """Load a dataset from an annotation JSON file.

    Corner-format [x, y, w, h] boxes are converted to center format and clipped
    to their image. Malformed entries are rejected with the offending record
    named in the error message. Referenced image files are resolved relative to
    the JSON file's directory and must exist.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotation file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw or not isinstance(raw[key], list):
            raise SchemaError(f"{path}: missing or non-list top-level key '{key}'")

    categories: dict[int, str] = {}
    for record in raw["categories"]:
        cid = int(_require(record, "id", "category"))
        if cid in categories:
            raise SchemaError(f"category id={cid}: duplicate id")
        categories[cid] = str(_require(record, "name", f"category id={cid}"))
    if not categories:
        raise SchemaError(f"{path}: empty categories list")

    samples: dict[int, ImageSample] = {}
    for record in raw["images"]:
        img_id = int(_require(record, "id", "image"))
        ctx = f"image id={img_id}"
        width = int(_require(record, "width", ctx))
        height = int(_require(record, "height", ctx))
        file_name = _require(record, "file_name", ctx)
        img_path = path.parent / file_name
        if not img_path.exists():
            raise FileNotFoundError(f"{ctx}: image file not found: {img_path}")
        with Image.open(img_path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[:2] != (height, width):
            raise SchemaError(
                f"{ctx}: file is {arr.shape[1]}x{arr.shape[0]}, "
                f"annotation says {width}x{height}"
            )
        if img_id in samples:
            raise SchemaError(f"{ctx}: duplicate image id")
        samples[img_id] = ImageSample(
            id=img_id,
            width=width,
            height=height,
            pixels=np.ascontiguousarray(arr.transpose(2, 0, 1)),
            annotations=[],
        )

    for record in raw["annotations"]:
        ann_id = _require(record, "id", "annotation")
        ctx = f"annotation id={ann_id}"
        img_id = int(_require(record, "image_id", ctx))
        if img_id not in samples:
            raise SchemaError(f"{ctx}: unknown image_id {img_id}")
        category_id = int(_require(record, "category_id", ctx))
        if category_id not in categories:
            raise SchemaError(f"{ctx}: unknown category_id {category_id}")
        bbox = _require(record, "bbox", ctx)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise SchemaError(f"{ctx}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            raise SchemaError(f"{ctx}: nonpositive box size {w}x{h}")
        sample = samples[img_id]
        try:
            box = Box.from_corner_size(x, y, w, h).clipped(sample.width, sample.height)
        except ValueError as exc:
            raise SchemaError(f"{ctx}: {exc}") from exc
        sample.annotations.append(Annotation(box=box, category_id=category_id))

    ordered = [samples[k] for k in sorted(samples)]
    return Dataset(samples=ordered, categories=categories)


# ---------------------------------------------------------------------------
# Scale-variation statistic
# ---------------------------------------------------------------------------

def scale_variation_stats(dataset: Dataset, per_category: bool = False) -> ScaleStats:
    """Fraction of images whose object scales vary by more than a factor of 2.

    For every image with at least two counted objects the ratio
    sqrt(max box area) / sqrt(min box area) is recorded; images with fewer
    objects do not enter the denominator. With ``per_category=True`` the ratio
    is taken within categories (max over categories having >= 2 instances)
    instead of over all objects in the image.
    """
    ratios: list[float] = []
    for sample in dataset.samples:
        if per_category:
            by_cat: dict[int, list[float]] = {}
            for ann in sample.annotations:
                by_cat.setdefault(ann.category_id, []).append(ann.box.area)
            cat_ratios = [
                math.sqrt(max(areas)) / math.sqrt(min(areas))
                for areas in by_cat.values()
                if len(areas) >= 2
            ]
            if cat_ratios:
                ratios.append(max(cat_ratios))
        else:
            if len(sample.annotations) < 2:
                continue
            areas = [ann.box.area for ann in sample.annotations]
            ratios.append(math.sqrt(max(areas)) / math.sqrt(min(areas)))

    if not ratios:
        return ScaleStats(fraction_gt_2x=0.0, per_image_ratio=[])
    fraction = sum(1 for r in ratios if r > 2.0) / len(ratios)
    return ScaleStats(fraction_gt_2x=fraction, per_image_ratio=ratios)
