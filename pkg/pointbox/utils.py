# utils.py
import logging
import os
import sys

import numpy as np
import torch

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class PointboxError(Exception):
    """Base class for every error raised on purpose by pointbox."""

    category = "runtime"


class GeometryError(PointboxError, ValueError):
    category = "geometry"


class ConfigError(PointboxError):
    category = "config"


class ManifestError(PointboxError):
    """Manifest problem; `entry_index` points at the offending record when known."""

    category = "manifest"

    def __init__(self, message, entry_index=None):
        self.entry_index = entry_index
        if entry_index is not None:
            message = f"entry {entry_index}: {message}"
        super().__init__(message)


class SplitError(PointboxError, ValueError):
    category = "split"


class CheckpointError(PointboxError):
    category = "checkpoint"


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class EvalError(PointboxError):
    category = "eval"


class PipelineError(PointboxError):
    category = "pipeline"


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever sys.stderr is at emit time, like logging.lastResort."""

    def __init__(self):
        super().__init__(sys.stderr)

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def setup_logging(level=None):
    """
    Configure the root logger once. Level comes from the argument,
    then POINTBOX_LOG_LEVEL, then INFO.
    """
    level = level or os.getenv("POINTBOX_LOG_LEVEL", "INFO")
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    root = logging.getLogger()
    if not any(getattr(h, "_pointbox", False) for h in root.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._pointbox = True
        root.addHandler(handler)
    root.setLevel(level)
    return root


def make_rng(seed, *stream):
    """Numpy generator for (seed, *stream); distinct streams never collide."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def rng_state(rng):
    return rng.bit_generator.state


def restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def parse_csv_list(text, cast=str):
    """'0.05, 0.1' -> [0.05, 0.1]; empty items dropped."""
    if not text:
        return []
    return [cast(t.strip()) for t in str(text).split(",") if t.strip()]
