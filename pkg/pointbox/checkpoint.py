"""
Checkpoint container shared by the teacher and the student.

Layout: a NumPy `.npz` archive (a zip of `.npy` members; each member header
records dtype with explicit byte order and the array shape).

  __meta__          uint8 array holding UTF-8 JSON:
                    {format_version, kind, config, step, epoch, extra, rng,
                     torch_rng (member name), optim_groups}
  param/<name>      one member per model parameter or buffer
  optim/<i>/<key>   tensor entries of the optimizer state for parameter i
  __torch_rng__     uint8 torch CPU generator state

All arrays are stored little-endian.
"""
import json
import logging
import zipfile
from pathlib import Path

import numpy as np
import torch

from .utils import CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _le(arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_state(path, kind, config, model, step=0, epoch=0, rng_state=None, optimizer=None, extra=None):
    arrays = {f"param/{k}": _le(v.detach().cpu().numpy()) for k, v in model.state_dict().items()}
    groups = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        groups = sd["param_groups"]
        for idx, st in sd["state"].items():
            for key, val in st.items():
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                arrays[f"optim/{idx}/{key}"] = _le(arr)
    arrays["__torch_rng__"] = torch.get_rng_state().numpy()
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "step": int(step),
        "epoch": int(epoch),
        "rng": rng_state,
        "optim_groups": groups,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)
    return path


def read_state(path, kind=None):
    """Return (meta, arrays). Distinct errors for truncation, version and kind."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError) as e:
        raise CheckpointTruncatedError(f"{path}: unreadable or truncated checkpoint ({e})") from e
    if "__meta__" not in arrays:
        raise CheckpointTruncatedError(f"{path}: missing metadata member")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {meta.get('format_version')} is not supported (expected {FORMAT_VERSION})"
        )
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {meta.get('kind')} checkpoint, expected {kind}")
    return meta, arrays


def load_into(model, arrays, path="<checkpoint>"):
    """Copy `param/*` arrays into `model`, checking names and shapes."""
    state = model.state_dict()
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    missing = sorted(set(state) - set(params))
    unexpected = sorted(set(params) - set(state))
    if missing or unexpected:
        raise CheckpointShapeError(f"{path}: parameter names differ (missing={missing}, unexpected={unexpected})")
    for name, arr in params.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CheckpointShapeError(
                f"{path}: {name} has shape {tuple(arr.shape)}, model expects {tuple(state[name].shape)}"
            )
    model.load_state_dict({k: torch.from_numpy(np.array(v)).to(state[k].dtype) for k, v in params.items()})
    return model


def load_optimizer(optimizer, meta, arrays):
    if meta.get("optim_groups") is None:
        return optimizer
    state = {}
    for key, arr in arrays.items():
        if not key.startswith("optim/"):
            continue
        _, idx, name = key.split("/", 2)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(arr))
    optimizer.load_state_dict({"state": state, "param_groups": meta["optim_groups"]})
    return optimizer


def restore_torch_rng(arrays):
    if "__torch_rng__" in arrays:
        torch.set_rng_state(torch.from_numpy(np.array(arrays["__torch_rng__"])))
