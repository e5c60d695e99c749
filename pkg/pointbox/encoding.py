"""
Fixed sinusoidal codes for points and feature-grid cells, and the learnable
class-embedding table. An object query is the sum of a point's positional
code and its class row.
"""
import math

import torch
from torch import Tensor, nn

DEFAULT_TEMPERATURE = 10000.0
DEFAULT_SCALE = 2 * math.pi


def sinusoidal_encode(v, d: int, temperature: float = DEFAULT_TEMPERATURE,
                      scale: float = DEFAULT_SCALE, dtype=None) -> Tensor:
    """
    Encode scalar(s) `v` into `d` values: angle_i = scale * v / temperature^(2i/d),
    laid out as [sin a_0, cos a_0, sin a_1, cos a_1, ...]. Accepts a float or a
    tensor of any shape; the code is appended as a trailing dimension.
    """
    if d % 2:
        raise ValueError(f"encoding width must be even, got {d}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    v = torch.as_tensor(v, dtype=dtype or torch.get_default_dtype())
    i = torch.arange(d // 2, dtype=v.dtype)
    freqs = temperature ** (2 * i / d)
    angles = (scale * v)[..., None] / freqs
    return torch.stack([angles.sin(), angles.cos()], dim=-1).flatten(-2)


def encode_points(points: Tensor, q: int, temperature=DEFAULT_TEMPERATURE, scale=DEFAULT_SCALE) -> Tensor:
    """[..., 2] (x, y) -> [..., q]: x code then y code, q/2 values each."""
    if q % 2:
        raise ValueError(f"code width must be even, got {q}")
    half = q // 2
    x = sinusoidal_encode(points[..., 0], half, temperature, scale, dtype=points.dtype)
    y = sinusoidal_encode(points[..., 1], half, temperature, scale, dtype=points.dtype)
    return torch.cat([x, y], dim=-1)


def encode_point(p, q: int = 64, temperature=DEFAULT_TEMPERATURE, scale=DEFAULT_SCALE, dtype=None) -> Tensor:
    pt = torch.tensor([p[0], p[1]], dtype=dtype or torch.get_default_dtype())
    return encode_points(pt, q, temperature, scale)


def grid_centers(h: int, w: int, dtype=None) -> Tensor:
    """[h, w, 2] normalized (x, y) cell centers, (col + 0.5) / w and (row + 0.5) / h."""
    dtype = dtype or torch.get_default_dtype()
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def encode_grid(h: int, w: int, q: int = 64, temperature=DEFAULT_TEMPERATURE,
                scale=DEFAULT_SCALE, dtype=None) -> Tensor:
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    return encode_points(grid_centers(h, w, dtype), q, temperature, scale)


class ClassEmbeddingTable(nn.Module):
    """C x q learnable class codes, rows drawn zero-mean with std `scale`."""

    def __init__(self, num_classes: int, q: int, scale: float = 0.1, generator=None):
        super().__init__()
        w = torch.randn(num_classes, q, generator=generator) * scale
        w = w - w.mean(dim=1, keepdim=True)
        self.weight = nn.Parameter(w)

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def forward(self, class_ids: Tensor) -> Tensor:
        return self.weight[class_ids]


def make_queries(points: Tensor, class_ids: Tensor, table: ClassEmbeddingTable,
                 temperature=DEFAULT_TEMPERATURE, scale=DEFAULT_SCALE) -> Tensor:
    """Batched V_f = V_p + V_c. Points carry no gradient."""
    if class_ids.numel() and (class_ids.min() < 0 or class_ids.max() >= table.num_classes):
        raise ValueError(f"class id out of range [0, {table.num_classes})")
    pos = encode_points(points.detach().to(table.weight.dtype), table.weight.shape[1], temperature, scale)
    return pos + table(class_ids)


def make_query(p, class_id: int, table: ClassEmbeddingTable,
               temperature=DEFAULT_TEMPERATURE, scale=DEFAULT_SCALE) -> Tensor:
    pt = torch.tensor([[p[0], p[1]]], dtype=table.weight.dtype)
    ids = torch.tensor([class_id], dtype=torch.long)
    return make_queries(pt, ids, table, temperature, scale)[0]
