"""
Single-level anchor-free student detector.

Every cell of the stride-8 feature grid predicts C class logits, four
non-negative distances (left, top, right, bottom; normalized image units)
and a centerness logit. Ground-truth and pseudo boxes go through the same
assignment and loss; provenance only selects a per-location weight.
"""
import logging
import math
from typing import List, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import batched_nms, sigmoid_focal_loss
from torchvision.ops import nms as box_nms

from .backbone import ConvBackbone
from .checkpoint import load_into, read_state, save_state
from .config import StudentConfig
from .encoding import grid_centers
from .geometry import BoxCCWH, box_cxcywh_to_xyxy, clamp_box, giou_pairwise_t, to_corners
from .teacher_model import image_tensor
from .utils import torch_generator

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "student"


class Detection(NamedTuple):
    box: BoxCCWH
    class_id: int
    score: float


class TrainTarget(NamedTuple):
    class_id: int
    box: BoxCCWH
    provenance: str = "ground_truth"


class StudentOutput(NamedTuple):
    cls_logits: Tensor  # [B,C,h,w]
    distances: Tensor   # [B,4,h,w], l t r b
    centerness: Tensor  # [B,1,h,w]


class AssignedTargets(NamedTuple):
    labels: Tensor      # [h*w] long, -1 = negative
    ltrb: Tensor        # [h*w,4]
    centerness: Tensor  # [h*w]
    weights: Tensor     # [h*w]


def _conv_block(c):
    return nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(math.gcd(8, c), c), nn.ReLU(inplace=True))


class StudentModel(nn.Module):
    def __init__(self, cfg: StudentConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ConvBackbone(cfg.backbone_channels, cfg.backbone_strides)
        c = self.backbone.out_channels
        self.tower = nn.Sequential(*[_conv_block(c) for _ in range(cfg.head_convs)])
        self.cls_logits = nn.Conv2d(c, cfg.num_classes, 3, padding=1)
        self.bbox_pred = nn.Conv2d(c, 4, 3, padding=1)
        self.centerness = nn.Conv2d(c, 1, 3, padding=1)
        nn.init.constant_(self.cls_logits.bias, -float(np.log((1 - cfg.prior_prob) / cfg.prior_prob)))
        # one grid cell per unit of raw regression output
        self.dist_scale = cfg.stride / min(cfg.image_size)

    def forward(self, images: Tensor) -> StudentOutput:
        _, _, H, W = images.shape
        s = self.backbone.stride
        if H % s or W % s:
            raise ValueError(f"image {H}x{W} is not divisible by backbone stride {s}")
        x = self.tower(self.backbone(images))
        return StudentOutput(self.cls_logits(x), F.softplus(self.bbox_pred(x)) * self.dist_scale, self.centerness(x))


def init_student(cfg: StudentConfig, seed: int) -> StudentModel:
    g = torch_generator(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
        model = StudentModel(cfg)
    model.eval()
    return model


def student_forward(m, img) -> StudentOutput:
    """`img` is an ImageSample, a list of them, or an image tensor [B,1,H,W]."""
    if not torch.is_tensor(img):
        samples = img if isinstance(img, list) else [img]
        dtype = next(m.parameters()).dtype
        img = image_tensor(samples, dtype)
    return m(img)


def assign_targets(targets: List[TrainTarget], grid, pseudo_weight: float = 1.0, dtype=None) -> AssignedTargets:
    """
    A location is positive iff its cell center lies strictly inside a target
    box; overlapping boxes go to the smallest one.
    """
    h, w = grid
    dtype = dtype or torch.get_default_dtype()
    centers = grid_centers(h, w, dtype).reshape(-1, 2)
    n = centers.shape[0]
    labels = torch.full((n,), -1, dtype=torch.long)
    ltrb = torch.zeros((n, 4), dtype=dtype)
    ctr = torch.zeros((n,), dtype=dtype)
    weights = torch.ones((n,), dtype=dtype)
    if not targets:
        return AssignedTargets(labels, ltrb, ctr, weights)

    boxes = box_cxcywh_to_xyxy(torch.tensor([list(t.box) for t in targets], dtype=dtype))
    x, y = centers[:, 0:1], centers[:, 1:2]
    dist = torch.stack([x - boxes[:, 0], y - boxes[:, 1], boxes[:, 2] - x, boxes[:, 3] - y], dim=-1)  # [n,K,4]
    inside = dist.min(dim=-1).values > 0
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    masked = torch.where(inside, areas.expand(n, -1), torch.full_like(dist[..., 0], float("inf")))
    best = masked.argmin(dim=1)
    pos = inside.any(dim=1)

    sel = dist[torch.arange(n), best]
    cls = torch.tensor([t.class_id for t in targets], dtype=torch.long)
    wts = torch.tensor([pseudo_weight if t.provenance == "pseudo" else 1.0 for t in targets], dtype=dtype)
    labels[pos] = cls[best[pos]]
    ltrb[pos] = sel[pos]
    weights[pos] = wts[best[pos]]
    l, t, r, b = sel[pos].unbind(-1)
    lr = torch.minimum(l, r) / torch.maximum(l, r)
    tb = torch.minimum(t, b) / torch.maximum(t, b)
    ctr[pos] = torch.sqrt(lr * tb)
    return AssignedTargets(labels, ltrb, ctr, weights)


def _stack(assigned: List[AssignedTargets]) -> AssignedTargets:
    return AssignedTargets(*(torch.cat(parts) for parts in zip(*assigned)))


def _location_boxes(centers: Tensor, ltrb: Tensor) -> Tensor:
    x, y = centers[:, 0], centers[:, 1]
    return torch.stack([x - ltrb[:, 0], y - ltrb[:, 1], x + ltrb[:, 2], y + ltrb[:, 3]], dim=-1)


def loss_student(pred: StudentOutput, assigned, cfg: StudentConfig = StudentConfig()) -> Tensor:
    """
    Focal loss over all locations + (1 - GIoU) and centerness cross-entropy
    over positives, each normalized by max(#positives, 1). The centerness
    term is reported relative to the target's own entropy, so it is zero at
    the optimum and has the same gradient as plain BCE.
    """
    if isinstance(assigned, AssignedTargets):
        assigned = [assigned]
    B, C, h, w = pred.cls_logits.shape
    if len(assigned) != B:
        raise ValueError(f"{len(assigned)} target sets for a batch of {B}")
    t = _stack(assigned)
    cls = pred.cls_logits.permute(0, 2, 3, 1).reshape(-1, C)
    dist = pred.distances.permute(0, 2, 3, 1).reshape(-1, 4)
    ctr_logit = pred.centerness.permute(0, 2, 3, 1).reshape(-1)

    pos = t.labels >= 0
    num_pos = max(int(pos.sum()), 1)
    onehot = torch.zeros_like(cls)
    onehot[pos, t.labels[pos]] = 1.0
    focal = sigmoid_focal_loss(cls, onehot, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma, reduction="none").sum(-1)
    focal = torch.where(pos, focal * t.weights, focal)
    loss = focal.sum() / num_pos

    if not pos.any():
        return loss + (dist.sum() + ctr_logit.sum()) * 0.0

    centers = grid_centers(h, w, dist.dtype).reshape(-1, 2).repeat(B, 1)[pos]
    wts = t.weights[pos]
    g = giou_pairwise_t(_location_boxes(centers, dist[pos].clamp(min=1e-6)), _location_boxes(centers, t.ltrb[pos]))
    loss = loss + (wts * (1.0 - g)).sum() / num_pos
    if cfg.centerness:
        target = t.centerness[pos]
        bce = F.binary_cross_entropy_with_logits(ctr_logit[pos], target, reduction="none")
        entropy = F.binary_cross_entropy(target, target, reduction="none")
        loss = loss + (wts * (bce - entropy)).sum() / num_pos
    return loss


def decode(pred: StudentOutput, cfg: StudentConfig = StudentConfig(), index: int = 0, pre_nms_top: int = 1000):
    """Detections for image `index` of the batch, per-class NMS applied, best first."""
    cls = torch.sigmoid(pred.cls_logits[index].detach().double())
    scores = cls * torch.sigmoid(pred.centerness[index].detach().double()) if cfg.centerness else cls
    C, h, w = scores.shape
    dist = pred.distances[index].detach().double().permute(1, 2, 0).reshape(-1, 4)
    centers = grid_centers(h, w, torch.float64).reshape(-1, 2)

    flat = scores.reshape(C, -1)
    keep = flat >= cfg.score_threshold
    if not keep.any():
        return []
    cand_c, cand_loc = keep.nonzero(as_tuple=True)
    cand_s = flat[cand_c, cand_loc]
    if cand_s.numel() > pre_nms_top:
        top = torch.topk(cand_s, pre_nms_top).indices
        cand_c, cand_loc, cand_s = cand_c[top], cand_loc[top], cand_s[top]

    boxes = _location_boxes(centers[cand_loc], dist[cand_loc]).clamp(0.0, 1.0)
    dets = []
    for c, (x1, y1, x2, y2), s in zip(cand_c.tolist(), boxes.tolist(), cand_s.tolist()):
        box = clamp_box(BoxCCWH((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1))
        dets.append(Detection(box, c, min(max(s, 0.0), 1.0)))
    keep = batched_nms(_corners_t(dets), _scores_t(dets), cand_c, cfg.nms_iou)
    return [dets[i] for i in keep[:cfg.max_detections].tolist()]


def _corners_t(dets):
    return torch.tensor([list(to_corners(d.box)) for d in dets], dtype=torch.float64).reshape(-1, 4)


def _scores_t(dets):
    return torch.tensor([d.score for d in dets], dtype=torch.float64)


def nms(dets: List[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy NMS: keep the best box, drop any with IoU > iou_thresh against a kept box."""
    if not dets:
        return []
    keep = box_nms(_corners_t(dets), _scores_t(dets), iou_thresh)
    return [dets[i] for i in keep.tolist()]


def save_checkpoint(m: StudentModel, path, step=0, epoch=0, rng_state=None, optimizer=None, extra=None):
    return save_state(path, CHECKPOINT_KIND, m.cfg.model_dump(mode="json"), m, step, epoch,
                      rng_state, optimizer, extra)


def load_checkpoint(path, with_meta=False):
    meta, arrays = read_state(path, kind=CHECKPOINT_KIND)
    model = StudentModel(StudentConfig.model_validate(meta["config"]))
    if any(v.dtype == np.float64 for k, v in arrays.items() if k.startswith("param/")):
        model = model.double()
    load_into(model, arrays, path)
    model.eval()
    return (model, meta, arrays) if with_meta else model
