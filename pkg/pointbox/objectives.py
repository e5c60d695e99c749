"""
Differentiable training objectives for the teacher.

  loss_box         weighted L1 + (1 - GIoU), DETR weighting, identity matching
  loss_multipoint  mean L2 distance between boxes predicted from two points
                   of the same object
  loss_step1       loss_box on one point set + lambda_m * loss_multipoint
  loss_symmetric   lambda_c * mean L2 distance between the mirrored prediction
                   on a masked, jittered view and the prediction on the
                   mirrored image with the mirrored point
  loss_step2_batch step-1 loss on labeled images + symmetric loss on weak ones

Models are called as model(images, points, classes, valid) -> [B,N,4]; any
callable with that signature works, which is how the tests plug in stubs.
"""
import logging

import torch
from torch import Tensor

from .config import LossWeights, PointSamplingConfig, SymmetricConfig
from .data import apply_mask, hflip_image, jitter_point, sample_point_pair
from .geometry import box_cxcywh_to_xyxy, clamp_boxes_t, giou_pairwise_t, hflip_boxes_t, hflip_point
from .teacher_model import image_tensor, model_dtype, pad_queries

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = LossWeights()
DEFAULT_SYMMETRIC = SymmetricConfig()


def _boxes(boxes, dtype=None) -> Tensor:
    if torch.is_tensor(boxes):
        return boxes if dtype is None else boxes.to(dtype)
    return torch.tensor([list(b) for b in boxes], dtype=dtype or torch.get_default_dtype()).reshape(-1, 4)


def loss_box(pred, gt, w: LossWeights = DEFAULT_WEIGHTS) -> Tensor:
    pred = _boxes(pred)
    gt = _boxes(gt, pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"loss_box: {tuple(pred.shape)} predictions vs {tuple(gt.shape)} targets")
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    l1 = (pred - gt).abs().sum(-1)
    g = giou_pairwise_t(box_cxcywh_to_xyxy(clamp_boxes_t(pred)), box_cxcywh_to_xyxy(clamp_boxes_t(gt)))
    return (w.lambda_l1 * l1 + w.lambda_giou * (1.0 - g)).mean()


def loss_multipoint(pred1, pred2) -> Tensor:
    pred1 = _boxes(pred1)
    pred2 = _boxes(pred2, pred1.dtype)
    if pred1.shape != pred2.shape:
        raise ValueError(f"loss_multipoint: {tuple(pred1.shape)} vs {tuple(pred2.shape)}")
    if pred1.shape[0] == 0:
        return pred1.sum() * 0.0
    return torch.linalg.vector_norm(pred1 - pred2, dim=-1).mean()


def loss_step1_batch(model, batch, rng, w: LossWeights = DEFAULT_WEIGHTS,
                     sampling: PointSamplingConfig = None):
    """
    `batch` is a list of (ImageSample, objects). One point pair is drawn per
    object; images without objects are skipped. Returns None when nothing
    in the batch has an object.
    """
    kept = []
    for img, objects in batch:
        if objects:
            kept.append((img, objects))
        else:
            logger.debug("step1: image %s has no objects, skipped", img.id)
    if not kept:
        return None

    dtype = model_dtype(model)
    first, second, gts = [], [], []
    for _, objects in kept:
        p1, p2 = [], []
        for o in objects:
            a, b = sample_point_pair(o.box, rng, sampling)
            p1.append((a.x, a.y, o.class_id))
            p2.append((b.x, b.y, o.class_id))
        first.append(p1)
        second.append(p2)
        gts.append([tuple(o.box) for o in objects])

    images = image_tensor([img for img, _ in kept], dtype)
    points1, classes, valid = pad_queries(first, dtype)
    target = torch.zeros(valid.shape + (4,), dtype=dtype)
    for i, boxes in enumerate(gts):
        target[i, :len(boxes)] = torch.tensor(boxes, dtype=dtype)

    pred1 = model(images, points1, classes, valid)
    loss = loss_box(pred1[valid], target[valid], w)
    if w.lambda_m == 0:
        return loss
    points2, _, _ = pad_queries(second, dtype)
    pred2 = model(images, points2, classes, valid)
    return loss + w.lambda_m * loss_multipoint(pred1[valid], pred2[valid])


def loss_step1(model, img, gt_objects, rng, w: LossWeights = DEFAULT_WEIGHTS, sampling=None) -> Tensor:
    loss = loss_step1_batch(model, [(img, gt_objects)], rng, w, sampling)
    if loss is None:
        return torch.zeros((), dtype=model_dtype(model))
    return loss


def loss_symmetric_batch(model, batch, rng, w: LossWeights = DEFAULT_WEIGHTS,
                         sym: SymmetricConfig = DEFAULT_SYMMETRIC):
    """
    `batch` is a list of (ImageSample, points). Each image contributes all of
    its points as queries. Returns None when no image has a point.
    """
    kept = [(img, pts) for img, pts in batch if pts]
    if not kept:
        return None
    if w.lambda_c == 0:
        return torch.zeros((), dtype=model_dtype(model))

    dtype = model_dtype(model)
    views, jittered, flipped_imgs, flipped_pts = [], [], [], []
    for img, pts in kept:
        mirrored = hflip_image(img)
        mirrored_pts = [hflip_point(p.point if hasattr(p, "point") else p) for p in pts]
        if sym.mask_on_flipped:
            views.append(apply_mask(mirrored, rng, sym.mask, mirrored_pts))
        else:
            views.append(apply_mask(img, rng, sym.mask, pts))
        jittered.append([(*jitter_point(_xy(p), rng, sym.jitter), p.class_id) for p in pts])
        flipped_imgs.append(mirrored)
        flipped_pts.append([(q.x, q.y, p.class_id) for q, p in zip(mirrored_pts, pts)])

    pts_a, classes, valid = pad_queries(jittered, dtype)
    pred_a = hflip_boxes_t(model(image_tensor(views, dtype), pts_a, classes, valid))
    pts_b, _, _ = pad_queries(flipped_pts, dtype)
    pred_b = model(image_tensor(flipped_imgs, dtype), pts_b, classes, valid)
    if sym.stop_grad_flipped:
        pred_b = pred_b.detach()
    return w.lambda_c * torch.linalg.vector_norm(pred_a[valid] - pred_b[valid], dim=-1).mean()


def _xy(p):
    return p.point if hasattr(p, "point") else p


def loss_symmetric(model, point, img, rng, w: LossWeights = DEFAULT_WEIGHTS,
                   sym: SymmetricConfig = DEFAULT_SYMMETRIC) -> Tensor:
    return loss_symmetric_batch(model, [(img, [point])], rng, w, sym)


def loss_step2_batch(model, labeled_batch, weak_batch, rng, w: LossWeights = DEFAULT_WEIGHTS,
                     sampling=None, sym: SymmetricConfig = DEFAULT_SYMMETRIC):
    if not labeled_batch and not weak_batch:
        raise ValueError("loss_step2_batch: both labeled and weak batches are empty")
    parts = [
        loss_step1_batch(model, labeled_batch, rng, w, sampling) if labeled_batch else None,
        loss_symmetric_batch(model, weak_batch, rng, w, sym) if weak_batch else None,
    ]
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]
