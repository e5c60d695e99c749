"""
Point-conditioned box regressor (the teacher).

Image -> conv backbone -> flattened features + grid codes -> transformer
encoder. Each annotated point becomes a query (positional code + class row)
that a transformer decoder attends to the encoded image; a shared MLP head
maps every decoded query to one normalized (cx, cy, w, h) box.
"""
import logging

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import ConvBackbone
from .checkpoint import load_into, read_state, save_state
from .config import TeacherConfig
from .data import ImageSample
from .encoding import ClassEmbeddingTable, encode_grid, make_queries
from .geometry import MIN_SIZE, BoxCCWH
from .utils import torch_generator

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "teacher"


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, num_layers):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class TeacherModel(nn.Module):
    def __init__(self, cfg: TeacherConfig, generator=None):
        super().__init__()
        self.cfg = cfg
        q = cfg.width
        self.backbone = ConvBackbone(cfg.backbone_channels, cfg.backbone_strides)
        enc_layer = nn.TransformerEncoderLayer(q, cfg.heads, cfg.ffn_width, cfg.dropout, batch_first=True)
        dec_layer = nn.TransformerDecoderLayer(q, cfg.heads, cfg.ffn_width, cfg.dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.encoder_layers, enable_nested_tensor=False)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.decoder_layers)
        self.class_table = ClassEmbeddingTable(cfg.num_classes, q, cfg.class_embed_scale, generator)
        self.head = MLP(q, q, 4, cfg.head_layers)

    def forward(self, images: Tensor, points: Tensor, classes: Tensor, valid: Tensor = None) -> Tensor:
        """
        images [B,1,H,W], points [B,N,2] (x, y), classes [B,N] long,
        valid [B,N] bool (padding = False) -> boxes [B,N,4] ccwh in (0,1).
        """
        B, _, H, W = images.shape
        s = self.backbone.stride
        if H % s or W % s:
            raise ValueError(f"image {H}x{W} is not divisible by backbone stride {s}")
        feats = self.backbone(images)
        h, w = feats.shape[-2:]
        pos = encode_grid(h, w, self.cfg.width, self.cfg.temperature, self.cfg.pos_scale, dtype=feats.dtype)
        memory = self.encoder(feats.flatten(2).transpose(1, 2) + pos.reshape(1, h * w, -1))

        queries = make_queries(points, classes, self.class_table, self.cfg.temperature, self.cfg.pos_scale)
        pad = None if valid is None or bool(valid.all()) else ~valid
        decoded = self.decoder(queries, memory, tgt_key_padding_mask=pad)
        boxes = torch.sigmoid(self.head(decoded))
        return torch.cat([boxes[..., :2], boxes[..., 2:].clamp(min=MIN_SIZE)], dim=-1)


def init_teacher(cfg: TeacherConfig, seed: int) -> TeacherModel:
    g = torch_generator(seed)
    # nn.Module constructors draw from the global generator; fork it so the
    # caller's global stream is left untouched.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
        model = TeacherModel(cfg, generator=g)
    model.eval()
    return model


def model_dtype(model, default=torch.float32):
    p = next(iter(getattr(model, "parameters", lambda: iter(()))()), None)
    return default if p is None else p.dtype


def image_tensor(samples, dtype=torch.float32) -> Tensor:
    """List of ImageSample -> [B,1,H,W]."""
    return torch.stack([torch.as_tensor(s.raster, dtype=dtype) for s in samples])[:, None]


def pad_queries(point_lists, dtype=torch.float32):
    """
    Pack per-image point lists (each a list of (x, y, class_id)) into
    points [B,N,2], classes [B,N], valid [B,N].
    """
    B = len(point_lists)
    N = max((len(p) for p in point_lists), default=0)
    points = torch.full((B, N, 2), 0.5, dtype=dtype)
    classes = torch.zeros((B, N), dtype=torch.long)
    valid = torch.zeros((B, N), dtype=torch.bool)
    for i, plist in enumerate(point_lists):
        for j, (x, y, c) in enumerate(plist):
            points[i, j, 0], points[i, j, 1] = x, y
            classes[i, j] = c
            valid[i, j] = True
    return points, classes, valid


def teacher_forward(m, img: ImageSample, points) -> list:
    """One box per point, order-aligned. `points` are PointAnnotation-like (x, y, class_id)."""
    if not points:
        raise ValueError("teacher_forward needs at least one point")
    dtype = model_dtype(m)
    pts, cls, valid = pad_queries([[(p.x, p.y, p.class_id) for p in points]], dtype)
    with torch.no_grad():
        out = m(image_tensor([img], dtype), pts, cls, valid)[0]
    return [BoxCCWH(*map(float, row)) for row in out]


def save_checkpoint(m: TeacherModel, path, step=0, epoch=0, rng_state=None, optimizer=None, extra=None):
    return save_state(path, CHECKPOINT_KIND, m.cfg.model_dump(mode="json"), m, step, epoch,
                      rng_state, optimizer, extra)


def load_checkpoint(path, with_meta=False):
    meta, arrays = read_state(path, kind=CHECKPOINT_KIND)
    cfg = TeacherConfig.model_validate(meta["config"])
    model = TeacherModel(cfg)
    if any(v.dtype == np.float64 for k, v in arrays.items() if k.startswith("param/")):
        model = model.double()
    load_into(model, arrays, path)
    model.eval()
    return (model, meta, arrays) if with_meta else model
