"""
Dataset side of pointbox: the synthetic blob generator, manifest and split
files, raster loading, and the stochastic operators used during training
(point sampling, coordinate jitter, cutout mask, horizontal flip).

Every sampler takes an explicit numpy Generator; nothing here touches global
random state.
"""
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .config import MaskConfig, PointSamplingConfig, SyntheticConfig
from .geometry import BoxCCWH, Point2, clamp_box
from .utils import ManifestError, SplitError, make_rng

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGE_DIR = "images"


@dataclass
class ImageSample:
    id: str
    raster: np.ndarray  # float32, H x W, values in [0, 1]

    def __post_init__(self):
        if self.raster.ndim != 2:
            raise ValueError(f"image {self.id}: raster must be 2-D, got {self.raster.shape}")

    @property
    def height(self):
        return self.raster.shape[0]

    @property
    def width(self):
        return self.raster.shape[1]


# --- manifest schema ---

class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ObjectAnnotation(_Record):
    class_id: int = Field(ge=0)
    box: BoxCCWH = Field(alias="bbox")
    provenance: Optional[Literal["ground_truth", "pseudo"]] = None

    @field_validator("box")
    @classmethod
    def _valid_box(cls, b):
        if not all(math.isfinite(v) for v in b):
            raise ValueError(f"non-finite bbox {list(b)}")
        if not (0 <= b.cx <= 1 and 0 <= b.cy <= 1):
            raise ValueError(f"bbox center outside [0,1]: {list(b)}")
        if not (0 < b.w <= 1 and 0 < b.h <= 1):
            raise ValueError(f"bbox size outside (0,1]: {list(b)}")
        return b


class PointAnnotation(_Record):
    x: float = Field(ge=0, le=1)
    y: float = Field(ge=0, le=1)
    class_id: int = Field(ge=0)
    source_object: Optional[int] = Field(default=None, ge=0)

    @property
    def point(self):
        return Point2(self.x, self.y)


class ManifestEntry(_Record):
    image: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    objects: List[ObjectAnnotation] = []
    points: Optional[List[PointAnnotation]] = None

    @property
    def id(self):
        return Path(self.image).stem

    @model_validator(mode="after")
    def _point_sources(self):
        for p in self.points or []:
            if p.source_object is None:
                continue
            if p.source_object >= len(self.objects):
                raise ValueError(f"point source_object {p.source_object} has no object")
            b = self.objects[p.source_object].box
            if not (abs(p.x - b.cx) <= b.w / 2 and abs(p.y - b.cy) <= b.h / 2):
                raise ValueError(f"point ({p.x}, {p.y}) lies outside its source box")
        return self


class Manifest(_Record):
    version: int = MANIFEST_VERSION
    classes: List[str]
    entries: List[ManifestEntry] = []

    def by_id(self):
        return {e.id: e for e in self.entries}

    def subset(self, ids):
        lookup = self.by_id()
        return self.model_copy(update={"entries": [lookup[i] for i in ids]})


class SplitPlan(_Record):
    fraction: float = Field(gt=0, le=1)
    seed: int
    fully_labeled: List[str]
    weak: List[str]
    test: List[str]

    @model_validator(mode="after")
    def _disjoint(self):
        groups = {"fully_labeled": self.fully_labeled, "weak": self.weak, "test": self.test}
        seen = {}
        for name, ids in groups.items():
            for i in ids:
                if i in seen:
                    raise ValueError(f"image {i!r} is in both {seen[i]} and {name}")
                seen[i] = name
        return self

    def missing_from(self, manifest: "Manifest"):
        known = manifest.by_id()
        return [i for i in self.fully_labeled + self.weak + self.test if i not in known]

    @property
    def train(self):
        return self.fully_labeled + self.weak


# --- synthetic generation ---

def _texture(kind, r, rng):
    if kind == "ring":
        return 0.35 + 0.65 * np.clip(r, 0.0, 1.0) ** 2
    if kind == "speckle":
        return 1.0 + 0.6 * (rng.random(r.shape) - 0.5)
    return np.ones_like(r)


def render_synthetic(cfg, seed, index, point_cfg=None):
    """One image and its annotations; depends only on (cfg, seed, index)."""
    rng = make_rng(seed, index)
    H, W = cfg.image_size
    raster = cfg.background + cfg.noise * rng.standard_normal((H, W))
    py = ((np.arange(H) + 0.5) / H)[:, None]
    px = ((np.arange(W) + 0.5) / W)[None, :]

    objects, points = [], []
    n = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    for k in range(n):
        class_id = int(rng.integers(cfg.num_classes))
        w = float(rng.uniform(*cfg.size))
        h = float(rng.uniform(*cfg.size))
        cx = float(rng.uniform(w / 2, 1 - w / 2))
        cy = float(rng.uniform(h / 2, 1 - h / 2))
        contrast = rng.uniform(*cfg.contrast)
        softness = rng.uniform(*cfg.softness)
        r = np.sqrt(((px - cx) / (w / 2)) ** 2 + ((py - cy) / (h / 2)) ** 2)
        # logistic falloff; exactly half contrast on the ellipse r == 1
        envelope = 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / softness, -50, 50)))
        kind = cfg.textures[class_id % len(cfg.textures)]
        raster = raster + contrast * envelope * _texture(kind, r, rng)
        box = BoxCCWH(cx, cy, w, h)
        objects.append(ObjectAnnotation(class_id=class_id, box=box))
        p = sample_point(box, rng, point_cfg)
        points.append(PointAnnotation(x=float(p.x), y=float(p.y), class_id=class_id, source_object=k))

    pixels = np.round(np.clip(raster, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, objects, points


def _render_to_disk(args):
    cfg, seed, index, out_dir, point_cfg = args
    pixels, objects, points = render_synthetic(cfg, seed, index, point_cfg)
    rel = f"{IMAGE_DIR}/{index:06d}.png"
    Image.fromarray(pixels).save(Path(out_dir) / rel)
    H, W = pixels.shape
    return ManifestEntry(image=rel, width=W, height=H, objects=objects, points=points)


def generate_synthetic(cfg: SyntheticConfig, seed: int, out_dir, workers=1, point_cfg=None):
    """
    Write `cfg.num_images` PNG rasters plus `manifest.json` under `out_dir`.
    Output is a pure function of (cfg, seed); images are rendered from
    per-index seeds so the worker count does not change the result.
    """
    out = Path(out_dir)
    try:
        (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ManifestError(f"cannot write to {out}: {e}") from e
    jobs = [(cfg, seed, i, str(out), point_cfg) for i in range(cfg.num_images)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_render_to_disk, jobs, chunksize=16))
    else:
        entries = [_render_to_disk(j) for j in jobs]

    classes = [f"{cfg.textures[c % len(cfg.textures)]}_{c}" for c in range(cfg.num_classes)]
    manifest = Manifest(classes=classes, entries=entries)
    save_manifest(manifest, out / "manifest.json")
    logger.info("Generated %d synthetic images in %s", len(entries), out)
    return manifest


# --- manifest / split files ---

def _dump(model):
    return json.dumps(model.model_dump(mode="json", by_alias=True, exclude_none=True), indent=2) + "\n"


def save_manifest(m: Manifest, path):
    Path(path).write_text(_dump(m), encoding="utf-8")


def load_manifest(path, check_images=True):
    """
    Read and validate a manifest. Errors name the entry index; image files
    are resolved relative to the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")

    raw_entries = doc.pop("entries", [])
    try:
        header = Manifest.model_validate({**doc, "entries": []})
    except ValidationError as e:
        raise ManifestError(f"{path}: {_first_error(e)}") from e
    if header.version != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.version}")

    entries = []
    for i, raw in enumerate(raw_entries):
        try:
            entry = ManifestEntry.model_validate(raw)
        except ValidationError as e:
            raise ManifestError(_first_error(e), entry_index=i) from e
        _check_classes(entry, len(header.classes), i)
        if check_images:
            _check_image(path.parent / entry.image, entry, i)
        entries.append(entry)
    return header.model_copy(update={"entries": entries})


def _first_error(e):
    err = e.errors()[0]
    loc = ".".join(str(x) for x in err["loc"]) or "<root>"
    return f"{loc}: {err['msg']}"


def _check_classes(entry, num_classes, index):
    for o in entry.objects:
        if o.class_id >= num_classes:
            raise ManifestError(f"class_id {o.class_id} >= {num_classes} classes", entry_index=index)
    for p in entry.points or []:
        if p.class_id >= num_classes:
            raise ManifestError(f"point class_id {p.class_id} >= {num_classes} classes", entry_index=index)


def _check_image(img_path, entry, index):
    if not img_path.is_file():
        raise ManifestError(f"missing image {img_path}", entry_index=index)
    with Image.open(img_path) as im:
        if im.size != (entry.width, entry.height):
            raise ManifestError(
                f"image {img_path} is {im.size[0]}x{im.size[1]}, manifest says {entry.width}x{entry.height}",
                entry_index=index,
            )


def save_split(plan: SplitPlan, path):
    Path(path).write_text(_dump(plan), encoding="utf-8")


def load_split(path):
    try:
        return SplitPlan.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise SplitError(f"split file not found: {path}") from e
    except ValidationError as e:
        raise SplitError(f"{path}: {_first_error(e)}") from e


def make_split(manifest: Manifest, fraction: float, seed: int) -> SplitPlan:
    """
    80:20 train/test partition, then `round(fraction * |train|)` fully
    labeled images drawn from train. The test set depends on the seed only,
    and for a fixed seed smaller fractions pick a prefix of larger ones.
    """
    if not (0 < fraction <= 1):
        raise SplitError(f"fraction {fraction} outside (0, 1]")
    ids = [e.id for e in manifest.entries]
    if len(set(ids)) != len(ids):
        raise SplitError("manifest has duplicate image ids")
    n = len(ids)
    n_test = int(math.floor(0.2 * n + 0.5))
    order = make_rng(seed, 0).permutation(n)
    test = [ids[i] for i in order[:n_test]]
    train = [ids[i] for i in order[n_test:]]
    n_full = int(math.floor(fraction * len(train) + 0.5))
    pick = make_rng(seed, 1).permutation(len(train))
    full = [train[i] for i in pick[:n_full]]
    weak = [train[i] for i in pick[n_full:]]
    return SplitPlan(fraction=fraction, seed=seed, fully_labeled=full, weak=weak, test=test)


# --- rasters ---

def load_image(root, entry: ManifestEntry) -> ImageSample:
    with Image.open(Path(root) / entry.image) as im:
        pixels = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return ImageSample(id=entry.id, raster=pixels)


def load_samples(manifest: Manifest, root, ids=None):
    """id -> ImageSample for the requested ids (all entries by default)."""
    lookup = manifest.by_id()
    ids = list(lookup) if ids is None else ids
    return {i: load_image(root, lookup[i]) for i in ids}


def hflip_image(img: ImageSample) -> ImageSample:
    return ImageSample(id=img.id, raster=img.raster[:, ::-1].copy())


# --- stochastic operators ---

def _box_extent(box):
    b = clamp_box(box)
    return b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2


def _strictly_inside(v, lo, hi):
    return lo < v < hi


def sample_point(box: BoxCCWH, rng, cfg: Optional[PointSamplingConfig] = None) -> Point2:
    """A point strictly inside `box`, uniform by default or center-biased Gaussian."""
    x1, y1, x2, y2 = _box_extent(box)
    gaussian = cfg is not None and cfg.mode == "gaussian"
    for _ in range(100):
        if gaussian:
            x = (x1 + x2) / 2 + cfg.gaussian_std * (x2 - x1) * rng.standard_normal()
            y = (y1 + y2) / 2 + cfg.gaussian_std * (y2 - y1) * rng.standard_normal()
        else:
            x = x1 + rng.random() * (x2 - x1)
            y = y1 + rng.random() * (y2 - y1)
        if _strictly_inside(x, x1, x2) and _strictly_inside(y, y1, y2):
            return Point2(float(x), float(y))
    return Point2((x1 + x2) / 2, (y1 + y2) / 2)


def sample_point_pair(box: BoxCCWH, rng, cfg=None):
    return sample_point(box, rng, cfg), sample_point(box, rng, cfg)


def jitter_point(p: Point2, rng, magnitude=0.05) -> Point2:
    dx, dy = rng.uniform(-magnitude, magnitude, size=2)
    return Point2(float(min(max(p.x + dx, 0.0), 1.0)), float(min(max(p.y + dy, 0.0), 1.0)))


def point_pixel(p: Point2, height, width):
    return min(int(p.y * height), height - 1), min(int(p.x * width), width - 1)


def _rect_size(rng, cfg, H, W):
    target = rng.uniform(cfg.min_area, cfg.max_area) * H * W
    aspect = rng.uniform(*cfg.aspect)
    h = int(min(max(round(math.sqrt(target * aspect)), 1), H))
    w = int(min(max(round(target / h), 1), W))
    lo, hi = cfg.min_area * H * W, cfg.max_area * H * W
    while h * w > hi and w > 1:
        w -= 1
    while h * w < lo and w < W:
        w += 1
    while h * w < lo and h < H:
        h += 1
    return h, w


def sample_mask(shape, rng, cfg: MaskConfig, protect):
    """
    Boolean cutout mask: 1..3 rectangles of 5-15% area each. `protect` is a
    point or a list of points whose pixels are never covered.
    """
    H, W = shape
    mask = np.zeros((H, W), dtype=bool)
    keep = [point_pixel(p, H, W) for p in _as_points(protect)]
    count = int(rng.integers(cfg.min_rects, cfg.max_rects + 1))
    for _ in range(count):
        h, w = _rect_size(rng, cfg, H, W)
        for _ in range(50):
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            if not any(top <= pr < top + h and left <= pc < left + w for pr, pc in keep):
                mask[top:top + h, left:left + w] = True
                break
    return mask


def _as_points(protect):
    if hasattr(protect, "x"):
        return [Point2(protect.x, protect.y)]
    return [Point2(p.x, p.y) for p in protect]


def apply_mask(img: ImageSample, rng, mask_cfg: MaskConfig, protect) -> ImageSample:
    mask = sample_mask(img.raster.shape, rng, mask_cfg, protect)
    raster = img.raster.copy()
    if mask.any():
        raster[mask] = img.raster.mean()
    return ImageSample(id=img.id, raster=raster)
