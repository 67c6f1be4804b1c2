"""Relative-position buckets and the additive attention bias B = B1D + BH + BV."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .layout import Document

SCALE_RANGE = (0.8, 1.25)


@dataclass(frozen=True)
class BucketConfig:
    num_buckets: int = 32
    max_distance: int = 128
    bidirectional: bool = True

    def __post_init__(self) -> None:
        if self.num_buckets % 2:
            raise ValueError("num_buckets must be even")
        if self.max_distance <= self.num_buckets // 4:
            raise ValueError("max_distance must exceed num_buckets / 4")


SEQ_BUCKETS = BucketConfig(32, 128)
AXIS_BUCKETS = BucketConfig(32, 64)
DECODER_BUCKETS = BucketConfig(32, 128, bidirectional=False)


def bucket_1d(d: int, cfg: BucketConfig = SEQ_BUCKETS) -> int:
    """Bucket of the signed offset ``d = key - query``.

    Bidirectional: positive offsets use the upper half. Within a half, small
    distances get their own bucket and the rest share log-spaced buckets up
    to ``max_distance``, beyond which everything lands in the last bucket.
    Unidirectional (causal) buckets only look at ``-d`` for ``d <= 0``.
    """
    n = cfg.num_buckets
    offset = 0
    if cfg.bidirectional:
        n //= 2
        if d > 0:
            offset = n
        dist = abs(d)
    else:
        dist = max(-d, 0)
    exact = n // 2
    if dist < exact:
        return offset + dist
    large = exact + int(math.floor(exact * math.log(dist / exact) / math.log(cfg.max_distance / exact)))
    return offset + min(large, n - 1)


def bucket_axis(dc: int, cfg: BucketConfig = AXIS_BUCKETS) -> int:
    return bucket_1d(dc, cfg)


@lru_cache(maxsize=None)
def _lookup(cfg: BucketConfig) -> tuple[torch.Tensor, int]:
    # distances >= max_distance always clamp to the last bucket of their half
    span = cfg.max_distance + 1
    table = torch.tensor([bucket_1d(d, cfg) for d in range(-span, span + 1)], dtype=torch.long)
    return table, span


def bucket_tensor(d: torch.Tensor, cfg: BucketConfig) -> torch.Tensor:
    """Vectorised ``bucket_1d`` over an integer tensor of offsets."""
    table, span = _lookup(cfg)
    return table[d.clamp(-span, span) + span]


class BiasParams(nn.Module):
    """Learned per-(bucket, head) scalars for the sequential and 2D axes."""

    def __init__(self, num_heads: int, num_buckets: int = 32, init_std: float = 0.02):
        super().__init__()
        self.num_heads = num_heads
        self.seq = nn.Parameter(torch.randn(num_buckets, num_heads) * init_std)
        self.horiz = nn.Parameter(torch.randn(num_buckets, num_heads) * init_std)
        self.vert = nn.Parameter(torch.randn(num_buckets, num_heads) * init_std)


def relative_buckets(
    centers: torch.Tensor, seq_cfg: BucketConfig = SEQ_BUCKETS, axis_cfg: BucketConfig = AXIS_BUCKETS
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Bucket ids for every (query, key) pair. ``centers`` is [..., n, 2]."""
    n = centers.shape[-2]
    pos = torch.arange(n)
    seq = bucket_tensor(pos[None, :] - pos[:, None], seq_cfg)
    cx, cy = centers[..., 0], centers[..., 1]
    horiz = bucket_tensor(cx[..., None, :] - cx[..., :, None], axis_cfg)
    vert = bucket_tensor(cy[..., None, :] - cy[..., :, None], axis_cfg)
    return seq, horiz, vert


def build_bias(
    centers: torch.Tensor, params: BiasParams, spatial: bool = True
) -> torch.Tensor:
    """Assemble B[h, i, j] for ``centers`` [n, 2] (or batched [b, n, 2]).

    With ``spatial=False`` only the sequential term is used.
    """
    seq_ids, h_ids, v_ids = relative_buckets(centers)
    bias = params.seq[seq_ids]  # [n, n, H]
    if centers.dim() == 3:
        bias = bias.unsqueeze(0)
    if spatial:
        bias = bias + params.horiz[h_ids] + params.vert[v_ids]
    return bias.movedim(-1, -3)


def causal_bias(n: int, table: torch.Tensor, cfg: BucketConfig = DECODER_BUCKETS) -> torch.Tensor:
    """Decoder self-attention bias [H, n, n] from a unidirectional table."""
    pos = torch.arange(n)
    return table[bucket_tensor(pos[None, :] - pos[:, None], cfg)].movedim(-1, 0)


def sample_scale_factors(rng: np.random.Generator, low: float = SCALE_RANGE[0], high: float = SCALE_RANGE[1]) -> tuple[float, float]:
    return float(rng.uniform(low, high)), float(rng.uniform(low, high))


def scale_boxes(boxes: np.ndarray, fx: float, fy: float, page_w: float, page_h: float) -> np.ndarray:
    out = np.asarray(boxes, dtype=np.float64).copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]] * fx, 0, page_w)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]] * fy, 0, page_h)
    return out


def spatial_scale_augment(
    doc: Document, rng: np.random.Generator | None = None, factors: tuple[float, float] | None = None
) -> Document:
    """Stretch or squeeze the page layout about its origin.

    Factors are drawn independently per axis from [0.8, 1.25] unless given.
    The training pipeline applies the same scaling only to the boxes that feed
    the bias, so visual features stay aligned with the raster.
    """
    if factors is None:
        if rng is None:
            raise ValueError("need either rng or explicit factors")
        factors = sample_scale_factors(rng)
    fx, fy = factors
    if fx == 1.0 and fy == 1.0:
        return doc
    w, h = doc.page.width, doc.page.height
    tokens = [replace(t, bbox=t.bbox.scale(fx, fy).clamp(w, h)) for t in doc.tokens]
    return doc.with_tokens(tokens)
