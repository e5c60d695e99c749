"""
Three-step orchestration.

  step 1  train the teacher on fully-labeled images (loss_step1)
  step 2  fine-tune it with symmetric consistency on weak images, mixed
          with labeled batches (loss_step2_batch)
  pseudo  one teacher box per weak point
  step 3  train the student on ground-truth + pseudo boxes (loss_student)

Each step checkpoints after every epoch (model, optimizer, numpy and torch
RNG state), so re-running into the same directory resumes where it stopped
and a finished step is simply reloaded.
"""
import logging
import shutil
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import torch
from tqdm import tqdm

from . import student_model, teacher_model
from .checkpoint import load_into, load_optimizer, read_state, restore_torch_rng
from .config import RunConfig, save_resolved_config
from .data import (
    Manifest, ManifestEntry, ObjectAnnotation, PointAnnotation, SplitPlan,
    load_manifest, load_samples, load_split, make_split, save_manifest,
)
from .evalsuite import EvalReport, evaluate
from .geometry import clamp_box
from .objectives import loss_step1_batch, loss_step2_batch
from .student_model import Detection, TrainTarget, assign_targets, decode, init_student, loss_student
from .teacher_model import image_tensor, init_teacher, teacher_forward
from .utils import PipelineError, SplitError, make_rng, restore_rng, rng_state

logger = logging.getLogger(__name__)

STEP1_CKPT = "teacher_step1.npz"
STEP2_CKPT = "teacher_step2.npz"
STUDENT_CKPT = "student.npz"
PSEUDO_MANIFEST = "pseudo_manifest.json"

# rng streams per step, all derived from the run seed
_STREAM = {"teacher_step1": 10, "teacher_step2": 20, "student": 30}


@dataclass
class CellData:
    manifest: Manifest
    split: SplitPlan
    root: Path

    def entries(self, ids):
        lookup = self.manifest.by_id()
        return [lookup[i] for i in ids]


def load_cell_data(cfg: RunConfig) -> CellData:
    manifest_path = Path(cfg.data.manifest)
    manifest = load_manifest(manifest_path)
    split = load_split(cfg.data.split) if cfg.data.split else make_split(manifest, cfg.fraction, cfg.seed)
    missing = split.missing_from(manifest)
    if missing:
        raise SplitError(f"split names {len(missing)} image(s) absent from {manifest_path}, e.g. {missing[0]!r}")
    return CellData(manifest, split, manifest_path.parent)


def _chunks(ids, size):
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def _no_progress(cfg: RunConfig):
    return not (cfg.progress and sys.stderr.isatty())


class EpochTrainer:
    """
    Epoch loop shared by the three steps. Subclasses provide `plan_epoch`
    (a list of batches) and `batch_loss` (a scalar tensor, or None to skip).
    """

    name = "trainer"

    def __init__(self, cfg: RunConfig, model, optimizer, epochs, grad_clip, ckpt_path, save_fn):
        self.cfg = cfg
        self.model = model
        self.optimizer = optimizer
        self.epochs = epochs
        self.grad_clip = grad_clip
        self.ckpt_path = Path(ckpt_path)
        self.curve_path = self.ckpt_path.with_name(self.ckpt_path.stem + "_loss.csv")
        self.save_fn = save_fn
        self.rng = make_rng(cfg.seed, _STREAM[self.name])
        self.epoch = 0
        self.step = 0
        self.curve = []

    def plan_epoch(self, rng):
        raise NotImplementedError

    def batch_loss(self, batch, rng):
        raise NotImplementedError

    def _resume(self):
        if not self.ckpt_path.is_file():
            return
        meta, arrays = read_state(self.ckpt_path)
        if meta.get("extra", {}).get("stage") != self.name:
            return
        load_into(self.model, arrays, self.ckpt_path)
        load_optimizer(self.optimizer, meta, arrays)
        restore_torch_rng(arrays)
        self.rng = restore_rng(meta["rng"])
        self.epoch, self.step = meta["epoch"], meta["step"]
        if self.curve_path.is_file():
            self.curve = pd.read_csv(self.curve_path).to_dict("records")[:self.epoch]
        logger.info("%s: resuming from epoch %d (%s)", self.name, self.epoch, self.ckpt_path)

    def _save(self):
        self.save_fn(self.model, self.ckpt_path, step=self.step, epoch=self.epoch, rng_state=rng_state(self.rng),
                     optimizer=self.optimizer, extra={"stage": self.name, "seed": self.cfg.seed})
        pd.DataFrame(self.curve, columns=["epoch", "loss", "steps"]).to_csv(self.curve_path, index=False)

    def fit(self, resume=True):
        if resume:
            self._resume()
        while self.epoch < self.epochs:
            self.model.train()
            batches = self.plan_epoch(self.rng)
            total, steps = 0.0, 0
            bar = tqdm(batches, desc=f"{self.name} {self.epoch + 1}/{self.epochs}", leave=False,
                       disable=_no_progress(self.cfg))
            for batch in bar:
                loss = self.batch_loss(batch, self.rng)
                if loss is None:
                    continue
                total += float(loss.detach())
                steps += 1
                if not loss.requires_grad:
                    continue
                self.optimizer.zero_grad()
                loss.backward()
                if self.grad_clip:
                    torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
                self.optimizer.step()
                self.step += 1
            self.epoch += 1
            mean = total / steps if steps else float("nan")
            self.curve.append({"epoch": self.epoch, "loss": mean, "steps": steps})
            logger.info("%s epoch %d/%d loss %.5f", self.name, self.epoch, self.epochs, mean)
            self._save()
        if not self.ckpt_path.is_file():
            self._save()
        self.model.eval()
        return self.ckpt_path


def _teacher_optimizer(cfg: RunConfig, model):
    o = cfg.teacher_optim
    return torch.optim.Adam(model.parameters(), lr=o.lr, weight_decay=o.weight_decay)


class TeacherStep1Trainer(EpochTrainer):
    name = "teacher_step1"

    def __init__(self, cfg: RunConfig, data: CellData, out_dir, model=None):
        ids = list(data.split.fully_labeled)
        if not ids:
            raise PipelineError("step 1 needs at least one fully labeled image")
        if model is None:
            model = init_teacher(cfg.teacher, cfg.seed)
        super().__init__(cfg, model, _teacher_optimizer(cfg, model), cfg.step1_epochs,
                         cfg.teacher_optim.grad_clip, Path(out_dir) / STEP1_CKPT, teacher_model.save_checkpoint)
        self.ids = ids
        self.samples = load_samples(data.manifest, data.root, ids)
        self.objects = {e.id: list(e.objects) for e in data.entries(ids)}
        self.weights = cfg.effective_weights()

    def plan_epoch(self, rng):
        order = [self.ids[i] for i in rng.permutation(len(self.ids))]
        return _chunks(order, self.cfg.teacher_optim.batch_size)

    def batch_loss(self, batch, rng):
        return loss_step1_batch(self.model, [(self.samples[i], self.objects[i]) for i in batch], rng,
                                self.weights, self.cfg.point_sampling)


class TeacherStep2Trainer(EpochTrainer):
    name = "teacher_step2"

    def __init__(self, cfg: RunConfig, data: CellData, model, out_dir):
        super().__init__(cfg, model, _teacher_optimizer(cfg, model), cfg.step2_epochs,
                         cfg.teacher_optim.grad_clip, Path(out_dir) / STEP2_CKPT, teacher_model.save_checkpoint)
        self.labeled = list(data.split.fully_labeled) if cfg.step2_mode == "mixed" else []
        self.weak = [e.id for e in data.entries(data.split.weak) if e.points]
        self.samples = load_samples(data.manifest, data.root, self.labeled + self.weak)
        lookup = data.manifest.by_id()
        self.objects = {i: list(lookup[i].objects) for i in self.labeled}
        self.points = {i: list(lookup[i].points) for i in self.weak}
        self.weights = cfg.effective_weights()

    def plan_epoch(self, rng):
        bs = self.cfg.teacher_optim.batch_size
        weak = _chunks([self.weak[i] for i in rng.permutation(len(self.weak))], bs)
        if not self.labeled:
            return [([], w) for w in weak]
        lab = _chunks([self.labeled[i] for i in rng.permutation(len(self.labeled))], bs)
        plan = []
        k = 0
        for w in weak:
            for extra in range(self.cfg.step2_mix):
                plan.append((lab[k % len(lab)], w if extra == 0 else []))
                k += 1
        return plan

    def batch_loss(self, batch, rng):
        labeled, weak = batch
        return loss_step2_batch(
            self.model,
            [(self.samples[i], self.objects[i]) for i in labeled],
            [(self.samples[i], self.points[i]) for i in weak],
            rng, self.weights, self.cfg.point_sampling, self.cfg.symmetric,
        )


def train_teacher_step1(cfg: RunConfig, data: CellData, out_dir, resume=True) -> Path:
    trainer = TeacherStep1Trainer(cfg, data, out_dir)
    return trainer.fit(resume)


def refine_teacher_step2(cfg: RunConfig, data: CellData, ckpt, out_dir, resume=True) -> Path:
    """Fine-tune the step-1 teacher. Without weak points the step is a no-op."""
    out = Path(out_dir) / STEP2_CKPT
    if not any(e.points for e in data.entries(data.split.weak)):
        logger.warning("step 2: weak set is empty, keeping the step-1 teacher")
        out.parent.mkdir(parents=True, exist_ok=True)
        if Path(ckpt).resolve() != out.resolve():
            shutil.copyfile(ckpt, out)
        return out
    trainer = TeacherStep2Trainer(cfg, data, teacher_model.load_checkpoint(ckpt), out_dir)
    return trainer.fit(resume)


def generate_pseudo_labels(teacher, manifest: Manifest, ids, root) -> Manifest:
    """
    One pseudo box per point for every weak image. `teacher` is a model or a
    checkpoint path; images without points are skipped.
    """
    if isinstance(teacher, (str, Path)):
        teacher = teacher_model.load_checkpoint(teacher)
    lookup = manifest.by_id()
    samples = load_samples(manifest, root, [i for i in ids if lookup[i].points])
    entries = []
    for image_id in ids:
        entry = lookup[image_id]
        if not entry.points:
            logger.warning("pseudo-label: weak image %s has no points, skipped", image_id)
            continue
        boxes = teacher_forward(teacher, samples[image_id], entry.points)
        objects = [
            ObjectAnnotation(class_id=p.class_id, box=clamp_box(b), provenance="pseudo")
            for p, b in zip(entry.points, boxes)
        ]
        points = [PointAnnotation(x=p.x, y=p.y, class_id=p.class_id) for p in entry.points]
        entries.append(ManifestEntry(image=entry.image, width=entry.width, height=entry.height,
                                     objects=objects, points=points))
    pseudo = Manifest.model_validate(
        Manifest(classes=manifest.classes, entries=entries).model_dump(mode="json", by_alias=True)
    )
    logger.info("pseudo-label: %d boxes on %d images", sum(len(e.objects) for e in entries), len(entries))
    return pseudo


class StudentTrainer(EpochTrainer):
    name = "student"

    def __init__(self, cfg: RunConfig, data: CellData, pseudo: Manifest, out_dir):
        model = init_student(cfg.student, cfg.seed)
        o = cfg.student_optim
        optimizer = torch.optim.SGD(model.parameters(), lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay)
        super().__init__(cfg, model, optimizer, cfg.step3_epochs, o.grad_clip,
                         Path(out_dir) / STUDENT_CKPT, student_model.save_checkpoint)
        targets = {
            e.id: [TrainTarget(o.class_id, o.box, "ground_truth") for o in e.objects]
            for e in data.entries(data.split.fully_labeled)
        }
        for e in (pseudo.entries if pseudo is not None else []):
            targets[e.id] = [TrainTarget(o.class_id, o.box, "pseudo") for o in e.objects]
        if not targets:
            raise PipelineError("step 3 needs labeled or pseudo-labeled images")
        self.ids = list(targets)
        self.samples = load_samples(data.manifest, data.root, self.ids)
        H, W = cfg.student.image_size
        grid = (H // cfg.student.stride, W // cfg.student.stride)
        dtype = next(model.parameters()).dtype
        self.assigned = {i: assign_targets(t, grid, cfg.student.pseudo_weight, dtype) for i, t in targets.items()}
        self.targets = targets

    def plan_epoch(self, rng):
        order = [self.ids[i] for i in rng.permutation(len(self.ids))]
        return _chunks(order, self.cfg.student_optim.batch_size)

    def batch_loss(self, batch, rng):
        dtype = next(self.model.parameters()).dtype
        pred = self.model(image_tensor([self.samples[i] for i in batch], dtype))
        return loss_student(pred, [self.assigned[i] for i in batch], self.cfg.student)


def train_student_step3(cfg: RunConfig, data: CellData, pseudo: Manifest = None, out_dir=".", resume=True) -> Path:
    return StudentTrainer(cfg, data, pseudo, out_dir).fit(resume)


# --- evaluation helpers ---

def predict_student(model, samples, cfg=None, batch_size=16):
    """image id -> decoded detections."""
    cfg = cfg or model.cfg
    ids = list(samples)
    dtype = next(model.parameters()).dtype
    out = {}
    model.eval()
    with torch.no_grad():
        for chunk in _chunks(ids, batch_size):
            pred = model(image_tensor([samples[i] for i in chunk], dtype))
            for k, image_id in enumerate(chunk):
                out[image_id] = decode(pred, cfg, index=k)
    return out


def evaluate_student(model, data: CellData, cfg: RunConfig) -> EvalReport:
    ids = list(data.split.test)
    dets = predict_student(model, load_samples(data.manifest, data.root, ids), cfg.student)
    gts = {e.id: list(e.objects) for e in data.entries(ids)}
    return evaluate(dets, gts, cfg.eval, num_classes=len(data.manifest.classes))


def evaluate_teacher(model, data: CellData, cfg: RunConfig) -> EvalReport:
    """Point-conditioned mAP: each test point yields one score-1 box of the point's class."""
    entries = data.entries(data.split.test)
    samples = load_samples(data.manifest, data.root, [e.id for e in entries if e.points])
    dets = {}
    for e in entries:
        if not e.points:
            dets[e.id] = []
            continue
        boxes = teacher_forward(model, samples[e.id], e.points)
        dets[e.id] = [Detection(clamp_box(b), p.class_id, 1.0) for p, b in zip(e.points, boxes)]
    gts = {e.id: list(e.objects) for e in entries}
    return evaluate(dets, gts, cfg.eval, num_classes=len(data.manifest.classes))


def run_cell(cfg: RunConfig, out_dir, resume=True) -> dict:
    """Run one (variant, fraction, seed) cell end to end and return its metrics."""
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_resolved_config(cfg, out)
    data = load_cell_data(cfg)

    teacher_map = None
    pseudo = None
    if cfg.uses_teacher:
        ck1 = train_teacher_step1(cfg, data, out, resume)
        ck2 = refine_teacher_step2(cfg, data, ck1, out, resume)
        teacher = teacher_model.load_checkpoint(ck2)
        teacher_map = evaluate_teacher(teacher, data, cfg).map
        pseudo = generate_pseudo_labels(teacher, data.manifest, data.split.weak, data.root)
        save_manifest(pseudo, out / PSEUDO_MANIFEST)

    ck3 = train_student_step3(cfg, data, pseudo, out, resume)
    student_map = evaluate_student(student_model.load_checkpoint(ck3), data, cfg).map
    record = {
        "variant": cfg.variant,
        "fraction": cfg.fraction,
        "seed": cfg.seed,
        "teacher_map": teacher_map,
        "student_map": student_map,
        "wall_time": time.perf_counter() - start,
        "status": "ok",
    }
    logger.info("cell %s/%.2f/%d: teacher mAP %s, student mAP %.4f", cfg.variant, cfg.fraction, cfg.seed,
                "-" if teacher_map is None else f"{teacher_map:.4f}", student_map)
    return record
