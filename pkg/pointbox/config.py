"""
Configuration schema.

Every block is a pydantic model that rejects unknown keys. A run is fully
described by a `RunConfig`; `load_run_config` merges built-in defaults, an
optional JSON file and dotted `key=value` overrides, in that order.
"""
import json
import logging
import math
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .utils import ConfigError

logger = logging.getLogger(__name__)

load_dotenv()

CONFIG_ENV = "POINTBOX_CONFIG"
INVOCATION_KEY = "invocation"
DEFAULT_FRACTIONS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0)
VARIANTS = ("box_only", "point_detr", "pbc", "multipoint_only", "symmetric_only")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticConfig(_Block):
    image_size: Tuple[int, int] = (128, 128)  # (height, width)
    num_classes: int = 3
    objects_per_image: Tuple[int, int] = (0, 3)
    contrast: Tuple[float, float] = (0.12, 0.3)
    background: float = 0.35
    noise: float = 0.06
    softness: Tuple[float, float] = (0.08, 0.2)
    size: Tuple[float, float] = (0.12, 0.32)  # box side as a fraction of the image
    num_images: int = 750
    textures: Tuple[str, ...] = ("uniform", "ring", "speckle")

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("objects_per_image", "contrast", "softness", "size"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if self.objects_per_image[0] < 0:
            raise ValueError("objects_per_image must be non-negative")
        if not (0 < self.size[0] and self.size[1] < 1):
            raise ValueError("size must lie in (0, 1)")
        if min(self.image_size) < 1:
            raise ValueError("image_size must be positive")
        if not self.textures:
            raise ValueError("textures must be non-empty")
        return self


class MaskConfig(_Block):
    min_rects: int = 1
    max_rects: int = 3
    min_area: float = 0.05
    max_area: float = 0.15
    aspect: Tuple[float, float] = (0.5, 2.0)

    @model_validator(mode="after")
    def _ranges(self):
        if not (0 <= self.min_rects <= self.max_rects):
            raise ValueError("need 0 <= min_rects <= max_rects")
        if not (0 < self.min_area <= self.max_area < 1):
            raise ValueError("need 0 < min_area <= max_area < 1")
        return self


class PointSamplingConfig(_Block):
    mode: Literal["uniform", "gaussian"] = "uniform"
    gaussian_std: float = 1.0 / 6.0  # relative to box size


class TeacherConfig(_Block):
    num_classes: int = 3
    image_size: Tuple[int, int] = (128, 128)
    width: int = 64
    backbone_channels: Tuple[int, ...] = (16, 32, 48, 64)
    backbone_strides: Tuple[int, ...] = (1, 2, 2, 2)
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: Optional[int] = None
    head_layers: int = 3
    dropout: float = 0.0
    temperature: float = 10000.0
    pos_scale: float = 2 * math.pi
    class_embed_scale: float = 0.1
    flip_axis: Literal["horizontal"] = "horizontal"

    @property
    def stride(self):
        return math.prod(self.backbone_strides)

    @property
    def ffn_width(self):
        return self.ffn_dim or 4 * self.width

    @model_validator(mode="after")
    def _shape(self):
        if self.width % 4:
            raise ValueError("width must be divisible by 4 (two even sinusoidal halves)")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("backbone_channels and backbone_strides differ in length")
        if self.backbone_channels[-1] != self.width:
            raise ValueError("last backbone channel count must equal width")
        if any(s % self.stride for s in self.image_size):
            raise ValueError(f"stride {self.stride} must divide image_size {self.image_size}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        return self


class StudentConfig(_Block):
    num_classes: int = 3
    image_size: Tuple[int, int] = (128, 128)
    backbone_channels: Tuple[int, ...] = (16, 32, 48, 64)
    backbone_strides: Tuple[int, ...] = (1, 2, 2, 2)
    head_convs: int = 2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    centerness: bool = True
    pseudo_weight: float = 1.0
    prior_prob: float = 0.01

    @property
    def stride(self):
        return math.prod(self.backbone_strides)

    @model_validator(mode="after")
    def _shape(self):
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("backbone_channels and backbone_strides differ in length")
        if any(s % self.stride for s in self.image_size):
            raise ValueError(f"stride {self.stride} must divide image_size {self.image_size}")
        if not (0 <= self.score_threshold <= 1):
            raise ValueError("score_threshold must be in [0, 1]")
        return self


class LossWeights(_Block):
    lambda_l1: float = Field(5.0, ge=0)
    lambda_giou: float = Field(2.0, ge=0)
    lambda_m: float = Field(1.0, ge=0)
    lambda_c: float = Field(1.0, ge=0)


class SymmetricConfig(_Block):
    jitter: float = Field(0.05, ge=0)
    mask: MaskConfig = MaskConfig()
    mask_on_flipped: bool = False
    stop_grad_flipped: bool = False


class TeacherOptimConfig(_Block):
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_clip: Optional[float] = 0.1


class StudentOptimConfig(_Block):
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    grad_clip: Optional[float] = 10.0


class EvalConfig(_Block):
    iou_thresholds: Tuple[float, ...] = (0.5,)
    score_floor: float = 0.0

    @field_validator("iou_thresholds")
    @classmethod
    def _thresholds(cls, v):
        if not v:
            raise ValueError("iou_thresholds must be non-empty")
        if any(not (0 < t < 1) for t in v):
            raise ValueError("iou_thresholds must lie in (0, 1)")
        return v


class DataPaths(_Block):
    root: str = "data"
    manifest: str = "data/manifest.json"
    split: Optional[str] = None


class BenchConfig(_Block):
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS
    seeds: Tuple[int, ...] = (1, 2, 3)
    variants: Tuple[str, ...] = ("box_only", "point_detr", "pbc")
    workers: int = Field(default_factory=lambda: int(os.getenv("POINTBOX_WORKERS", "1")))

    @field_validator("variants")
    @classmethod
    def _variants(cls, v):
        unknown = [x for x in v if x not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; choose from {VARIANTS}")
        return v

    @field_validator("fractions")
    @classmethod
    def _fractions(cls, v):
        if any(not (0 < f <= 1) for f in v):
            raise ValueError("fractions must lie in (0, 1]")
        return v


class RunConfig(_Block):
    seed: int = 1
    variant: Literal["box_only", "point_detr", "pbc", "multipoint_only", "symmetric_only"] = "pbc"
    fraction: float = Field(0.1, gt=0, le=1)
    data: DataPaths = DataPaths()
    synthetic: SyntheticConfig = SyntheticConfig()
    point_sampling: PointSamplingConfig = PointSamplingConfig()
    teacher: TeacherConfig = TeacherConfig()
    student: StudentConfig = StudentConfig()
    weights: LossWeights = LossWeights()
    symmetric: SymmetricConfig = SymmetricConfig()
    teacher_optim: TeacherOptimConfig = TeacherOptimConfig()
    student_optim: StudentOptimConfig = StudentOptimConfig()
    step1_epochs: int = 40
    step2_epochs: int = 20
    step3_epochs: int = 30
    step2_mode: Literal["mixed", "weak_only"] = "mixed"
    step2_mix: int = Field(1, ge=1)
    eval: EvalConfig = EvalConfig()
    bench: BenchConfig = BenchConfig()
    progress: bool = True

    @model_validator(mode="after")
    def _consistent(self):
        c = self.synthetic.num_classes
        if self.teacher.num_classes != c or self.student.num_classes != c:
            raise ValueError("teacher/student num_classes must match synthetic.num_classes")
        if self.teacher.image_size != self.synthetic.image_size or self.student.image_size != self.synthetic.image_size:
            raise ValueError("teacher/student image_size must match synthetic.image_size")
        return self

    def effective_weights(self):
        """Loss weights after the variant switches off its regularizers."""
        w = self.weights
        if self.variant == "point_detr":
            return w.model_copy(update={"lambda_m": 0.0, "lambda_c": 0.0})
        if self.variant == "multipoint_only":
            return w.model_copy(update={"lambda_c": 0.0})
        if self.variant == "symmetric_only":
            return w.model_copy(update={"lambda_m": 0.0})
        return w

    @property
    def uses_teacher(self):
        return self.variant != "box_only"


def _set_dotted(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        nxt = node.get(k)
        if not isinstance(nxt, dict):
            raise ConfigError(f"override '{dotted}': '{k}' is not a config section")
        node = nxt
    if keys[-1] not in node:
        raise ConfigError(f"override '{dotted}': unknown key '{keys[-1]}'")
    node[keys[-1]] = value


def parse_override(text):
    """'teacher.width=32' -> ('teacher.width', 32); values are JSON when they parse."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        if "," in raw:
            value = [_scalar(v) for v in raw.split(",") if v.strip()]
        else:
            value = raw
    return key.strip(), value


def _scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def load_run_config(path=None, overrides=(), **fields):
    """
    Defaults < file (explicit path or $POINTBOX_CONFIG) < overrides < fields.
    Raises ConfigError on a missing file or any validation failure.
    """
    path = path or os.getenv(CONFIG_ENV)
    doc = RunConfig().model_dump(mode="json")
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            file_doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        if isinstance(file_doc, dict):
            file_doc.pop(INVOCATION_KEY, None)
        _merge(doc, file_doc, where=str(p))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(doc, key, value)
    for key, value in fields.items():
        if value is not None:
            _set_dotted(doc, key, value)
    return validate_run_config(doc)


def validate_run_config(doc):
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(x) for x in first["loc"]) or "<root>"
        raise ConfigError(f"{loc}: {first['msg']} ({e.error_count()} error(s))") from e


def _merge(base, update, where):
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"{where}: unknown key '{k}'")
        if isinstance(v, dict) and isinstance(base[k], dict):
            _merge(base[k], v, where)
        else:
            base[k] = v


def save_resolved_config(cfg, out_dir, invocation=None):
    """
    Snapshot of the fully materialized config. `invocation` records the
    subcommand and its file inputs; `load_run_config` ignores that block so
    the snapshot can be passed back as --config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    doc = cfg.model_dump(mode="json")
    if invocation:
        doc[INVOCATION_KEY] = invocation
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path
