"""
Detection metrics: greedy matching, all-points interpolated AP, mAP.

Ground truths are anything with `.class_id` and `.box` (ObjectAnnotation,
TrainTarget); detections additionally carry `.score`.
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .config import EvalConfig
from .geometry import BoxCCWH, check_box, iou, to_corners
from .student_model import Detection
from .utils import EvalError, GeometryError

logger = logging.getLogger(__name__)

DETECTIONS_VERSION = 1


# --- 1. MATCHING ---
def _by_score(dets):
    # stable: equal scores keep input order
    return sorted(dets, key=lambda d: -d.score)


def _greedy(det_boxes, gt_boxes, iou_thresh, matched):
    """ccwh boxes in, one flag per detection; `matched` is updated in place."""
    gt_corners = [to_corners(g) for g in gt_boxes]
    flags = []
    for box in map(to_corners, det_boxes):
        best, best_iou = None, -1.0
        for j, g in enumerate(gt_corners):
            if j in matched:
                continue
            v = iou(box, g)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_thresh:
            matched.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def match_detections(dets, gts, iou_thresh: float) -> List[bool]:
    """
    TP/FP flag per detection, in descending score order. Each detection takes
    the unmatched ground truth of highest IoU when that IoU >= iou_thresh.
    """
    gt_boxes = [g.box if hasattr(g, "box") else g for g in gts]
    return _greedy([d.box for d in _by_score(dets)], gt_boxes, iou_thresh, set())


# --- 2. AVERAGE PRECISION ---
def average_precision(flags, num_gt: int) -> Optional[float]:
    """
    Area under the precision envelope, all-points interpolation.
    None when there is nothing to measure (no ground truth, no detections).
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.clip(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]), 0.0, 1.0))


# --- 3. REPORT ---
@dataclass
class EvalReport:
    thresholds: Tuple[float, ...]
    classes: Tuple[int, ...]
    ap: Dict[Tuple[int, float], Optional[float]]
    per_threshold: Dict[float, float]
    map: float
    gt_counts: Dict[int, int] = field(default_factory=dict)
    det_counts: Dict[int, int] = field(default_factory=dict)

    def rows(self):
        return [
            {"class": c, "threshold": t, "ap": self.ap[(c, t)]}
            for t in self.thresholds for c in self.classes
        ]

    def to_dict(self):
        return {
            "map": self.map,
            "per_threshold": {str(t): v for t, v in self.per_threshold.items()},
            "ap": self.rows(),
            "gt_counts": {str(c): n for c, n in self.gt_counts.items()},
            "det_counts": {str(c): n for c, n in self.det_counts.items()},
        }


def _mean(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def evaluate(dets_by_image, gts_by_image, cfg: EvalConfig = EvalConfig(), num_classes: int = None) -> EvalReport:
    """
    Per class and threshold: pool detections over images, rank by score,
    match within each image, compute AP. mAP averages the defined class APs,
    then the thresholds (0.0 when nothing is defined).
    """
    unknown_images = sorted(set(dets_by_image) - set(gts_by_image))
    if unknown_images:
        raise EvalError(f"detections reference images without ground truth: {unknown_images[:5]}")

    if num_classes is not None:
        known = set(range(num_classes))
    else:
        # classes seen on either side; a detected class with no ground truth scores AP 0
        known = {g.class_id for items in gts_by_image.values() for g in items}
        known |= {d.class_id for items in dets_by_image.values() for d in items}
    gt_counts, det_counts = Counter(), Counter()
    gts = {}
    for image_id, items in gts_by_image.items():
        for g in items:
            if g.class_id not in known:
                raise EvalError(f"image {image_id}: unknown ground-truth class {g.class_id}")
            gts.setdefault((image_id, g.class_id), []).append(g.box)
            gt_counts[g.class_id] += 1
    pooled = {}
    for image_id, items in dets_by_image.items():
        for d in items:
            if d.class_id not in known:
                raise EvalError(f"image {image_id}: unknown detection class {d.class_id}")
            if d.score < cfg.score_floor:
                continue
            pooled.setdefault(d.class_id, []).append((image_id, d))
            det_counts[d.class_id] += 1

    classes = tuple(sorted(known))
    ap, per_threshold = {}, {}
    for t in cfg.iou_thresholds:
        for c in classes:
            ranked = sorted(pooled.get(c, []), key=lambda item: -item[1].score)
            matched = {}
            flags = []
            for image_id, d in ranked:
                used = matched.setdefault(image_id, set())
                flags += _greedy([d.box], gts.get((image_id, c), []), t, used)
            ap[(c, t)] = average_precision(flags, gt_counts[c])
        per_threshold[t] = _mean(ap[(c, t)] for c in classes)
    overall = _mean(per_threshold.values())
    report = EvalReport(
        thresholds=tuple(cfg.iou_thresholds),
        classes=classes,
        ap=ap,
        per_threshold={t: (v if v is not None else 0.0) for t, v in per_threshold.items()},
        map=overall if overall is not None else 0.0,
        gt_counts=dict(gt_counts),
        det_counts=dict(det_counts),
    )
    logger.debug("evaluated %d images: mAP %.4f", len(gts_by_image), report.map)
    return report


def gts_from_manifest(manifest, ids=None):
    entries = manifest.entries if ids is None else [manifest.by_id()[i] for i in ids]
    return {e.id: list(e.objects) for e in entries}


def write_report(report: EvalReport, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    pd.DataFrame(report.rows(), columns=["class", "threshold", "ap"]).to_csv(out / "eval_report.csv", index=False)
    return out / "eval_report.json", out / "eval_report.csv"


# --- 4. DETECTIONS FILE ---
class DetectionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_id: str
    class_id: int
    bbox: Tuple[float, float, float, float]
    score: float

    @field_validator("bbox")
    @classmethod
    def _box(cls, v):
        try:
            check_box(BoxCCWH(*v))
        except GeometryError as e:
            raise ValueError(str(e)) from e
        return v

    @field_validator("score")
    @classmethod
    def _score(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"score {v} outside [0, 1]")
        return v


def save_detections(path, dets_by_image):
    records = [
        {"image_id": image_id, "class_id": d.class_id, "bbox": list(d.box), "score": d.score}
        for image_id, dets in dets_by_image.items() for d in dets
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"version": DETECTIONS_VERSION, "detections": records}, indent=1) + "\n",
                    encoding="utf-8")
    return path


def load_detections(path, image_ids=()):
    """image id -> list of Detection; ids in `image_ids` start with an empty list."""
    path = Path(path)
    if not path.is_file():
        raise EvalError(f"detections file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise EvalError(f"{path}: not valid JSON ({e})") from e
    if doc.get("version") != DETECTIONS_VERSION:
        raise EvalError(f"{path}: unsupported detections version {doc.get('version')}")
    out = {i: [] for i in image_ids}
    for n, raw in enumerate(doc.get("detections", [])):
        try:
            rec = DetectionRecord.model_validate(raw)
        except ValidationError as e:
            raise EvalError(f"{path}: detection {n}: {e.errors()[0]['msg']}") from e
        out.setdefault(rec.image_id, []).append(Detection(BoxCCWH(*rec.bbox), rec.class_id, rec.score))
    return out
