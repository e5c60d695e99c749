import numpy as np
import pytest
import torch
from torchvision.ops import sigmoid_focal_loss

from pointbox import student_model
from pointbox.config import StudentConfig, SyntheticConfig
from pointbox.data import ImageSample, render_synthetic
from pointbox.geometry import BoxCCWH, iou, to_corners
from pointbox.student_model import (
    Detection, StudentOutput, TrainTarget, assign_targets, decode, init_student, loss_student, nms,
    student_forward,
)
from pointbox.teacher_model import image_tensor


def _det(cx, cy, w, h, score, c=0):
    return Detection(BoxCCWH(cx, cy, w, h), c, score)


def test_default_student_grid(random_image):
    model = init_student(StudentConfig(), seed=0)
    out = student_forward(model, random_image(size=128))
    assert out.cls_logits.shape == (1, 3, 16, 16)
    assert out.distances.shape == (1, 4, 16, 16)
    assert out.centerness.shape == (1, 1, 16, 16)
    assert (out.distances >= 0).all()


def test_indivisible_image_rejected(student_cfg):
    with pytest.raises(ValueError, match="stride"):
        init_student(student_cfg, 0)(torch.rand(1, 1, 36, 36))


def test_single_centered_box_has_one_positive():
    assigned = assign_targets([TrainTarget(1, BoxCCWH(0.375, 0.375, 0.5, 0.5))], (4, 4), dtype=torch.float64)
    pos = (assigned.labels >= 0).nonzero().flatten().tolist()
    assert pos == [5]
    assert assigned.labels[5].item() == 1
    assert assigned.centerness[5].item() == 1.0
    assert assigned.ltrb[5].tolist() == [0.25, 0.25, 0.25, 0.25]


def test_smallest_box_wins_overlaps():
    targets = [TrainTarget(0, BoxCCWH(0.5, 0.5, 0.9, 0.9)), TrainTarget(1, BoxCCWH(0.5, 0.5, 0.3, 0.3))]
    labels = assign_targets(targets, (4, 4)).labels.reshape(4, 4)
    assert labels[1:3, 1:3].eq(1).all()
    assert labels[0, 0].item() == 0
    assert labels[3, 0].item() == 0


def test_no_targets_means_no_positives():
    assigned = assign_targets([], (4, 4))
    assert (assigned.labels == -1).all()


def test_loss_without_positives_is_pure_focal():
    g = torch.Generator().manual_seed(0)
    pred = StudentOutput(torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64, requires_grad=True),
                         torch.rand(1, 4, 4, 4, generator=g, dtype=torch.float64, requires_grad=True),
                         torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64, requires_grad=True))
    loss = loss_student(pred, assign_targets([], (4, 4), dtype=torch.float64))
    logits = pred.cls_logits.permute(0, 2, 3, 1).reshape(-1, 2)
    focal = sigmoid_focal_loss(logits, torch.zeros_like(logits), reduction="sum")
    assert loss.item() == pytest.approx(focal.item(), rel=1e-12)
    loss.backward()
    assert torch.equal(pred.distances.grad, torch.zeros_like(pred.distances))


def _perfect_output(assigned, C=2, grid=(4, 4)):
    h, w = grid
    logits = torch.full((h * w, C), -20.0, dtype=torch.float64)
    pos = assigned.labels >= 0
    logits[pos, assigned.labels[pos]] = 20.0
    dist = torch.where(pos[:, None], assigned.ltrb, torch.full_like(assigned.ltrb, 0.1))
    ctr = torch.logit(assigned.centerness, eps=1e-9)
    return StudentOutput(logits.T.reshape(1, C, h, w), dist.T.reshape(1, 4, h, w), ctr.reshape(1, 1, h, w))


def test_perfect_prediction_has_near_zero_loss():
    targets = [TrainTarget(0, BoxCCWH(0.3, 0.35, 0.4, 0.5)), TrainTarget(1, BoxCCWH(0.75, 0.7, 0.3, 0.4))]
    assigned = assign_targets(targets, (4, 4), dtype=torch.float64)
    assert (assigned.labels >= 0).sum() >= 2
    assert loss_student(_perfect_output(assigned), assigned).item() < 1e-3


def test_provenance_only_selects_a_weight():
    g = torch.Generator().manual_seed(1)
    pred = StudentOutput(torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64),
                         torch.rand(1, 4, 4, 4, generator=g, dtype=torch.float64) * 0.3,
                         torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64))
    box = BoxCCWH(0.5, 0.5, 0.5, 0.5)
    gt = assign_targets([TrainTarget(1, box, "ground_truth")], (4, 4), dtype=torch.float64)
    pseudo = assign_targets([TrainTarget(1, box, "pseudo")], (4, 4), dtype=torch.float64)
    assert loss_student(pred, gt).item() == loss_student(pred, pseudo).item()
    down = assign_targets([TrainTarget(1, box, "pseudo")], (4, 4), pseudo_weight=0.5, dtype=torch.float64)
    assert loss_student(pred, down).item() < loss_student(pred, gt).item()


def test_gradient_of_student_loss(student_cfg, random_image, fd_check):
    model = init_student(student_cfg, 0).double()
    model.train()
    img = image_tensor([random_image()], torch.float64)
    assigned = assign_targets([TrainTarget(0, BoxCCWH(0.4, 0.45, 0.5, 0.6)), TrainTarget(1, BoxCCWH(0.8, 0.8, 0.3, 0.3))],
                              (4, 4), dtype=torch.float64)
    err = fd_check(lambda: loss_student(model(img), assigned, student_cfg), model.parameters())
    assert err <= 1e-3


def test_decode_nothing_above_threshold():
    pred = StudentOutput(torch.full((1, 2, 4, 4), -30.0), torch.full((1, 4, 4, 4), 0.1), torch.zeros(1, 1, 4, 4))
    assert decode(pred) == []


def test_decode_one_confident_location():
    logits = torch.full((1, 2, 4, 4), -30.0)
    logits[0, 1, 2, 1] = 10.0
    pred = StudentOutput(logits, torch.full((1, 4, 4, 4), 0.1), torch.full((1, 1, 4, 4), 10.0))
    dets = decode(pred, StudentConfig(num_classes=2, image_size=(32, 32), backbone_channels=(8, 16),
                                      backbone_strides=(2, 4)))
    assert len(dets) == 1
    d = dets[0]
    assert d.class_id == 1
    assert d.box.cx == pytest.approx(0.375) and d.box.cy == pytest.approx(0.625)
    assert d.box.w == pytest.approx(0.2) and d.box.h == pytest.approx(0.2)
    assert 0.99 < d.score <= 1.0


def test_decoded_boxes_stay_in_the_image():
    g = torch.Generator().manual_seed(2)
    pred = StudentOutput(torch.randn(1, 3, 8, 8, generator=g) + 2.0, torch.rand(1, 4, 8, 8, generator=g),
                         torch.randn(1, 1, 8, 8, generator=g))
    dets = decode(pred, StudentConfig(max_detections=20))
    assert 0 < len(dets) <= 20
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    for d in dets:
        x1, y1, x2, y2 = to_corners(d.box)
        assert -1e-12 <= x1 < x2 <= 1 + 1e-12 and -1e-12 <= y1 < y2 <= 1 + 1e-12


def test_nms_chain():
    a = _det(0.30, 0.5, 0.2, 0.2, 0.9)
    b = _det(0.35, 0.5, 0.2, 0.2, 0.8)
    c = _det(0.40, 0.5, 0.2, 0.2, 0.7)
    assert nms([c, b, a], 0.5) == [a, c]
    assert nms([], 0.5) == []


def test_nms_keeps_disjoint_and_drops_duplicates():
    a, b = _det(0.2, 0.2, 0.1, 0.1, 0.6), _det(0.8, 0.8, 0.1, 0.1, 0.7)
    assert nms([a, b], 0.5) == [b, a]
    dup = _det(0.8, 0.8, 0.1, 0.1, 0.5)
    assert nms([a, b, dup], 0.5) == [b, a]


def _nms_oracle(dets, thresh):
    kept = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(iou(to_corners(d.box), to_corners(k.box)) <= thresh for k in kept):
            kept.append(d)
    return kept


@pytest.mark.parametrize("seed", range(10))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    dets = [
        _det(*rng.uniform(0.3, 0.7, size=2), *rng.uniform(0.1, 0.3, size=2), float(rng.random()))
        for _ in range(int(rng.integers(1, 30)))
    ]
    assert nms(dets, 0.5) == _nms_oracle(dets, 0.5)


def test_checkpoint_round_trip(student_cfg, tmp_path):
    model = init_student(student_cfg, 4)
    path = student_model.save_checkpoint(model, tmp_path / "s.npz")
    loaded = student_model.load_checkpoint(path)
    x = torch.rand(3, 1, 32, 32, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        for a, b in zip(model(x), loaded(x)):
            assert torch.equal(a, b)


@pytest.mark.slow
def test_overfits_a_small_set():
    syn = SyntheticConfig(image_size=(64, 64), num_classes=2, objects_per_image=(1, 2), size=(0.25, 0.45))
    cfg = StudentConfig(num_classes=2, image_size=(64, 64), backbone_channels=(16, 32, 32),
                        backbone_strides=(2, 2, 2), head_convs=1, score_threshold=0.0)
    samples, assigned, gts = [], [], []
    for i in range(8):
        pixels, objects, _ = render_synthetic(syn, 11, i)
        samples.append(ImageSample(str(i), pixels.astype(np.float32) / 255.0))
        assigned.append(assign_targets([TrainTarget(o.class_id, o.box) for o in objects], (8, 8)))
        gts.append([o.box for o in objects])
    images = image_tensor(samples)

    model = init_student(cfg, 0)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for _ in range(300):
        opt.zero_grad()
        loss_student(model(images), assigned, cfg).backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        pred = model(images)
    best = []
    for k, boxes in enumerate(gts):
        top = decode(pred, cfg, index=k)[0]
        best.append(max(iou(to_corners(top.box), to_corners(b)) for b in boxes))
    assert np.mean(best) >= 0.7
