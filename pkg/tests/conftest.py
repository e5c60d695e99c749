import copy

import numpy as np
import pytest
import torch

from pointbox.config import StudentConfig, SyntheticConfig, TeacherConfig, validate_run_config
from pointbox.data import ImageSample, generate_synthetic

TINY = {
    "synthetic": {
        "image_size": [32, 32],
        "num_classes": 2,
        "objects_per_image": [0, 2],
        "size": [0.25, 0.5],
        "num_images": 20,
    },
    "teacher": {
        "num_classes": 2,
        "image_size": [32, 32],
        "width": 16,
        "backbone_channels": [8, 16],
        "backbone_strides": [2, 4],
        "encoder_layers": 1,
        "decoder_layers": 1,
        "heads": 2,
        "head_layers": 2,
    },
    "student": {
        "num_classes": 2,
        "image_size": [32, 32],
        "backbone_channels": [8, 16],
        "backbone_strides": [2, 4],
        "head_convs": 1,
    },
    "teacher_optim": {"batch_size": 4, "lr": 1e-3},
    "student_optim": {"batch_size": 4},
    "fraction": 0.5,
    "step1_epochs": 1,
    "step2_epochs": 1,
    "step3_epochs": 1,
    "progress": False,
}


def tiny_doc(**updates):
    doc = copy.deepcopy(TINY)
    doc.update(updates)
    return doc


@pytest.fixture
def teacher_cfg():
    return TeacherConfig(**TINY["teacher"])


@pytest.fixture
def student_cfg():
    return StudentConfig(**TINY["student"])


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(SyntheticConfig(**TINY["synthetic"]), seed=7, out_dir=out)
    return out


@pytest.fixture
def run_cfg(dataset_dir):
    """Tiny RunConfig pointing at the session dataset."""
    def make(**updates):
        doc = tiny_doc(**updates)
        doc.setdefault("data", {})
        doc["data"] = {**doc["data"], "root": str(dataset_dir), "manifest": str(dataset_dir / "manifest.json")}
        return validate_run_config(doc)
    return make


@pytest.fixture
def random_image():
    def make(seed=0, size=32, image_id="img"):
        rng = np.random.default_rng(seed)
        return ImageSample(id=image_id, raster=rng.random((size, size)).astype(np.float32))
    return make


def finite_difference_check(loss_fn, params, seed=0, coords=3, eps=1e-6, min_grad=1e-5):
    """
    Largest relative error between autograd and central differences over
    `coords` randomly chosen parameter coordinates with a non-negligible
    gradient. `loss_fn` must be deterministic.
    """
    rng = np.random.default_rng(seed)
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    candidates = [(p, g) for p, g in zip(params, grads) if g is not None]
    errors = []
    for _ in range(500):
        if len(errors) == coords:
            break
        p, g = candidates[int(rng.integers(len(candidates)))]
        i = int(rng.integers(p.numel()))
        analytic = float(g.reshape(-1)[i])
        if abs(analytic) < min_grad:
            continue
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            plus = float(loss_fn())
            flat[i] = orig - eps
            minus = float(loss_fn())
            flat[i] = orig
        numeric = (plus - minus) / (2 * eps)
        errors.append(abs(numeric - analytic) / max(abs(numeric), abs(analytic)))
    assert len(errors) == coords, "not enough coordinates with a usable gradient"
    return max(errors)


@pytest.fixture
def fd_check():
    return finite_difference_check
