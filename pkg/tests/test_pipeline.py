import logging

import pandas as pd
import pytest
import torch
from torch import nn

from pointbox import student_model, teacher_model
from pointbox.data import SplitPlan, save_split
from pointbox.pipeline import (
    PSEUDO_MANIFEST, STEP1_CKPT, STEP2_CKPT, STUDENT_CKPT, CellData, TeacherStep2Trainer, evaluate_teacher,
    generate_pseudo_labels, load_cell_data, refine_teacher_step2, run_cell, train_student_step3,
    train_teacher_step1,
)
from pointbox.utils import PipelineError, SplitError


class OracleTeacher(nn.Module):
    """Answers every annotated point with the box it was sampled from."""

    def __init__(self, manifest):
        super().__init__()
        self.anchor = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.boxes = {
            (p.x, p.y): list(e.objects[p.source_object].box)
            for e in manifest.entries for p in (e.points or [])
        }

    def forward(self, images, points, classes, valid=None):
        out = torch.zeros(points.shape[:-1] + (4,), dtype=points.dtype)
        for b in range(points.shape[0]):
            for n in range(points.shape[1]):
                if valid is None or valid[b, n]:
                    key = (float(points[b, n, 0]), float(points[b, n, 1]))
                    out[b, n] = torch.tensor(self.boxes[key], dtype=points.dtype)
        return out + 0.0 * self.anchor


def _same_weights(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_pseudo_labels_from_an_oracle_teacher_match_ground_truth(run_cfg):
    data = load_cell_data(run_cfg())
    weak = data.split.weak
    pseudo = generate_pseudo_labels(OracleTeacher(data.manifest), data.manifest, weak, data.root)

    lookup = data.manifest.by_id()
    with_points = [i for i in weak if lookup[i].points]
    assert [e.id for e in pseudo.entries] == with_points
    assert sum(len(e.objects) for e in pseudo.entries) == sum(len(lookup[i].points) for i in weak)
    for entry in pseudo.entries:
        source = lookup[entry.id]
        for obj, point, gt in zip(entry.objects, entry.points, source.objects):
            assert obj.provenance == "pseudo"
            assert obj.class_id == gt.class_id
            assert obj.box == pytest.approx(tuple(gt.box), abs=1e-12)
            assert point.source_object is None


def test_split_naming_unknown_images_is_rejected(run_cfg, tmp_path):
    data = load_cell_data(run_cfg())
    plan = data.split.model_copy(update={"test": data.split.test[1:] + ["ghost"]})
    save_split(plan, tmp_path / "split.json")
    with pytest.raises(SplitError, match="ghost"):
        load_cell_data(run_cfg(data={"split": str(tmp_path / "split.json")}))


def test_step1_needs_labeled_images(run_cfg):
    cfg = run_cfg()
    data = load_cell_data(cfg)
    split = SplitPlan(fraction=cfg.fraction, seed=cfg.seed, fully_labeled=[], weak=data.split.train,
                      test=data.split.test)
    with pytest.raises(PipelineError):
        train_teacher_step1(cfg, CellData(data.manifest, split, data.root), "unused")


def test_step3_needs_some_targets(run_cfg, tmp_path):
    cfg = run_cfg()
    data = load_cell_data(cfg)
    split = SplitPlan(fraction=cfg.fraction, seed=cfg.seed, fully_labeled=[], weak=data.split.train,
                      test=data.split.test)
    with pytest.raises(PipelineError):
        train_student_step3(cfg, CellData(data.manifest, split, data.root), None, tmp_path)


def test_step1_writes_checkpoint_and_loss_curve(run_cfg, tmp_path):
    cfg = run_cfg(step1_epochs=2)
    path = train_teacher_step1(cfg, load_cell_data(cfg), tmp_path)
    assert path == tmp_path / STEP1_CKPT
    _, meta, _ = teacher_model.load_checkpoint(path, with_meta=True)
    assert meta["epoch"] == 2 and meta["extra"]["stage"] == "teacher_step1"
    curve = pd.read_csv(tmp_path / "teacher_step1_loss.csv")
    assert curve["epoch"].tolist() == [1, 2]
    assert curve["loss"].notna().all()


def test_step2_without_weak_points_keeps_step1(run_cfg, tmp_path, caplog):
    cfg = run_cfg(fraction=1.0)
    data = load_cell_data(cfg)
    assert data.split.weak == []
    ck1 = train_teacher_step1(cfg, data, tmp_path)
    with caplog.at_level(logging.WARNING, logger="pointbox.pipeline"):
        ck2 = refine_teacher_step2(cfg, data, ck1, tmp_path)
    assert ck2 == tmp_path / STEP2_CKPT
    assert "weak set is empty" in caplog.text
    assert _same_weights(teacher_model.load_checkpoint(ck1), teacher_model.load_checkpoint(ck2))


def test_step2_plan_pairs_weak_with_labeled_batches(run_cfg, tmp_path):
    cfg = run_cfg(step2_mix=2)
    data = load_cell_data(cfg)
    trainer = TeacherStep2Trainer(cfg, data, teacher_model.init_teacher(cfg.teacher, 0), tmp_path)
    plan = trainer.plan_epoch(trainer.rng)
    weak_batches = [w for _, w in plan if w]
    assert len(plan) == 2 * len(weak_batches)
    assert all(labeled for labeled, _ in plan)
    assert sorted(i for w in weak_batches for i in w) == sorted(trainer.weak)

    weak_only = TeacherStep2Trainer(cfg.model_copy(update={"step2_mode": "weak_only"}), data,
                                    teacher_model.init_teacher(cfg.teacher, 0), tmp_path)
    assert all(not labeled for labeled, _ in weak_only.plan_epoch(weak_only.rng))


def test_teacher_with_oracle_scores_perfectly(run_cfg):
    cfg = run_cfg()
    data = load_cell_data(cfg)
    everything = [e.id for e in data.manifest.entries]
    split = data.split.model_copy(update={"test": everything})
    report = evaluate_teacher(OracleTeacher(data.manifest), CellData(data.manifest, split, data.root), cfg)
    assert report.map == pytest.approx(1.0)


def test_box_only_cell_skips_the_teacher(run_cfg, tmp_path):
    record = run_cell(run_cfg(variant="box_only"), tmp_path)
    assert record["status"] == "ok"
    assert record["teacher_map"] is None
    assert 0.0 <= record["student_map"] <= 1.0
    assert (tmp_path / STUDENT_CKPT).is_file()
    assert not (tmp_path / STEP1_CKPT).exists()
    assert (tmp_path / "resolved_config.json").is_file()


@pytest.mark.slow
def test_full_cell_is_deterministic_and_resumable(run_cfg, tmp_path):
    cfg = run_cfg(variant="pbc")
    first = run_cell(cfg, tmp_path / "a")
    second = run_cell(cfg, tmp_path / "b")
    assert first["teacher_map"] == second["teacher_map"]
    assert first["student_map"] == second["student_map"]
    assert (tmp_path / "a" / PSEUDO_MANIFEST).is_file()

    again = run_cell(cfg, tmp_path / "a")
    assert again["student_map"] == first["student_map"]


@pytest.mark.slow
def test_zero_regularizer_weights_reproduce_the_baseline(run_cfg, tmp_path):
    baseline = run_cell(run_cfg(variant="point_detr"), tmp_path / "base")
    zeroed = run_cell(run_cfg(variant="pbc", weights={"lambda_m": 0.0, "lambda_c": 0.0}), tmp_path / "zero")
    assert baseline["teacher_map"] == zeroed["teacher_map"]
    assert baseline["student_map"] == zeroed["student_map"]
    assert _same_weights(teacher_model.load_checkpoint(tmp_path / "base" / STEP2_CKPT),
                         teacher_model.load_checkpoint(tmp_path / "zero" / STEP2_CKPT))
    assert _same_weights(student_model.load_checkpoint(tmp_path / "base" / STUDENT_CKPT),
                         student_model.load_checkpoint(tmp_path / "zero" / STUDENT_CKPT))


@pytest.mark.slow
def test_interrupted_training_resumes_bit_identically(run_cfg, tmp_path):
    two = run_cfg(step1_epochs=2)
    one = run_cfg(step1_epochs=1)
    data = load_cell_data(two)
    straight = train_teacher_step1(two, data, tmp_path / "straight")
    train_teacher_step1(one, data, tmp_path / "resumed")
    resumed = train_teacher_step1(two, data, tmp_path / "resumed")
    assert _same_weights(teacher_model.load_checkpoint(straight), teacher_model.load_checkpoint(resumed))
    a = pd.read_csv(tmp_path / "straight" / "teacher_step1_loss.csv")
    b = pd.read_csv(tmp_path / "resumed" / "teacher_step1_loss.csv")
    assert a["loss"].tolist() == b["loss"].tolist()


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_step1_loss_goes_down(run_cfg, tmp_path, seed):
    cfg = run_cfg(fraction=1.0, step1_epochs=5, seed=seed)
    train_teacher_step1(cfg, load_cell_data(cfg), tmp_path)
    losses = pd.read_csv(tmp_path / "teacher_step1_loss.csv")["loss"].tolist()
    increases = sum(b > a for a, b in zip(losses, losses[1:]))
    assert increases <= 1
    assert losses[-1] < losses[0]
