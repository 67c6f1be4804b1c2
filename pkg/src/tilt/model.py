"""Encoder-decoder transformer fusing text, layout bias and image features."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import vocab
from .layout import quantize_boxes, resize_image
from .numerics import rms_norm, softmax_rows
from .objectives import Seq2SeqExample
from .spatial_bias import DECODER_BUCKETS, BiasParams, build_bias, causal_bias, scale_boxes
from .vision import FEATURE_CHANNELS, UNet, roi_pool_many

NEG_INF = -1e9


@dataclass
class TiltConfig:
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    vocab_size: int = vocab.VOCAB_SIZE
    max_src_len: int = 256
    max_tgt_len: int = 32
    dropout: float = 0.0
    attn_scale: str = "d_head"  # or "n_tokens" for the literal sqrt(n) divisor
    image_width: int = 512
    image_height: int = 384
    unet_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    grid_w: int = 64
    grid_h: int = 48
    num_buckets: int = 32

    def __post_init__(self) -> None:
        self.unet_channels = tuple(self.unet_channels)
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}")
        if min(self.max_src_len, self.max_tgt_len, self.enc_layers, self.dec_layers) <= 0:
            raise ValueError("lengths and layer counts must be positive")
        if self.attn_scale not in ("d_head", "n_tokens"):
            raise ValueError(f"unknown attn_scale {self.attn_scale!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_channels"] = list(self.unet_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TiltConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TiltConfig fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# featurisation


@dataclass
class EncoderFeatures:
    ids: np.ndarray  # [n]
    centers: np.ndarray  # [n, 2] grid cells for the bias
    roi_boxes: np.ndarray  # [k, 4] page boxes of tokens that take image features
    roi_index: np.ndarray  # [n] row into roi_boxes, -1 for none
    image: np.ndarray  # [H, W] at the model's raster size
    page_size: tuple[float, float]
    truncated: bool = False


def featurize(
    example: Seq2SeqExample,
    cfg: TiltConfig,
    bias_scale: tuple[float, float] | None = None,
) -> EncoderFeatures:
    """Expand tokens to byte ids; every id inherits its token's box.

    Words and prompt words end with a space byte. Prompt and separator ids
    get no image features. ``bias_scale`` stretches the boxes that drive
    the 2D bias only.
    """
    ids: list[int] = []
    boxes: list[list[float]] = []
    roi_boxes: list[list[float]] = []
    roi_index: list[int] = []
    for tok in example.source:
        if tok.kind in ("word", "prompt"):
            tok_ids = vocab.encode_text(tok.text) + [ord(" ")]
        elif tok.kind == "sentinel":
            tok_ids = [vocab.sentinel(int(vocab.SENTINEL_RE.fullmatch(tok.text).group(1)))]
        elif tok.kind == "sep":
            tok_ids = [vocab.SEP]
        else:
            tok_ids = [vocab.IMG]
        r = -1
        if tok.kind in ("word", "sentinel", "image_anchor"):
            r = len(roi_boxes)
            roi_boxes.append(tok.bbox.as_list())
        ids.extend(tok_ids)
        boxes.extend([tok.bbox.as_list()] * len(tok_ids))
        roi_index.extend([r] * len(tok_ids))

    truncated = example.truncated
    if len(ids) > cfg.max_src_len:
        truncated = True
        ids, boxes, roi_index = ids[: cfg.max_src_len], boxes[: cfg.max_src_len], roi_index[: cfg.max_src_len]

    page = example.page
    box_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    if bias_scale is not None:
        box_arr = scale_boxes(box_arr, bias_scale[0], bias_scale[1], page.width, page.height)
    centers = quantize_boxes(box_arr, page.width, page.height, cfg.grid_w, cfg.grid_h)
    if page.image is None:
        image = np.ones((cfg.image_height, cfg.image_width), dtype=np.float32)
    else:
        image = resize_image(page.image, cfg.image_width, cfg.image_height)
    return EncoderFeatures(
        ids=np.array(ids, dtype=np.int64),
        centers=centers,
        roi_boxes=np.array(roi_boxes, dtype=np.float64).reshape(-1, 4),
        roi_index=np.array(roi_index, dtype=np.int64),
        image=image,
        page_size=(float(page.width), float(page.height)),
        truncated=truncated,
    )


def target_ids(target: str, cfg: TiltConfig) -> list[int]:
    ids = vocab.encode_target(target)[: cfg.max_tgt_len - 1]
    return ids + [vocab.EOS]


@dataclass
class Batch:
    ids: torch.Tensor  # [B, n]
    key_mask: torch.Tensor  # [B, n] True for real positions
    centers: torch.Tensor  # [B, n, 2]
    images: torch.Tensor  # [B, 1, H, W]
    roi_boxes: list[np.ndarray]
    roi_index: torch.Tensor  # [B, n]
    page_sizes: list[tuple[float, float]]
    dec_in: torch.Tensor | None = None  # [B, m]
    labels: torch.Tensor | None = None  # [B, m], PAD where ignored
    truncated: list[bool] = field(default_factory=list)


def collate(
    feats: Sequence[EncoderFeatures],
    targets: Sequence[str] | None,
    cfg: TiltConfig,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    b = len(feats)
    n = max(max(len(f.ids) for f in feats), 1)
    ids = torch.full((b, n), vocab.PAD, dtype=torch.long)
    mask = torch.zeros((b, n), dtype=torch.bool)
    centers = torch.zeros((b, n, 2), dtype=torch.long)
    roi_index = torch.full((b, n), -1, dtype=torch.long)
    for i, f in enumerate(feats):
        k = len(f.ids)
        ids[i, :k] = torch.from_numpy(f.ids)
        mask[i, :k] = True
        centers[i, :k] = torch.from_numpy(f.centers)
        roi_index[i, :k] = torch.from_numpy(f.roi_index)
    images = torch.from_numpy(np.stack([f.image for f in feats])).to(dtype).unsqueeze(1)
    batch = Batch(
        ids, mask, centers, images, [f.roi_boxes for f in feats], roi_index,
        [f.page_size for f in feats], truncated=[f.truncated for f in feats],
    )
    if targets is not None:
        seqs = [target_ids(t, cfg) for t in targets]
        m = max(len(s) for s in seqs)
        labels = torch.full((b, m), vocab.PAD, dtype=torch.long)
        dec_in = torch.full((b, m), vocab.PAD, dtype=torch.long)
        for i, s in enumerate(seqs):
            labels[i, : len(s)] = torch.tensor(s)
            dec_in[i, : len(s)] = torch.tensor([vocab.BOS] + s[:-1])
        batch.dec_in, batch.labels = dec_in, labels
    return batch


# ---------------------------------------------------------------------------
# layers


class RMSNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rms_norm(x, self.weight)


class Attention(nn.Module):
    def __init__(self, cfg: TiltConfig):
        super().__init__()
        d = cfg.d_model
        self.h = cfg.num_heads
        self.dh = d // cfg.num_heads
        self.scale_mode = cfg.attn_scale
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.h, self.dh).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        kv: torch.Tensor,
        bias: torch.Tensor | None,
        key_mask: torch.Tensor,
        keep_weights: bool = False,
    ) -> torch.Tensor:
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        if self.scale_mode == "d_head":
            div = math.sqrt(self.dh)
        else:
            div = key_mask.sum(-1).clamp(min=1).to(q.dtype).sqrt().view(-1, 1, 1, 1)
        logits = q @ k.transpose(-1, -2) / div
        if bias is not None:
            logits = logits + bias
        logits = logits.masked_fill(~key_mask[:, None, None, :], NEG_INF)
        weights = softmax_rows(logits)
        if keep_weights:
            self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, cfg: TiltConfig):
        super().__init__()
        self.wi = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.wo = nn.Linear(cfg.d_ff, cfg.d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.wo(F.gelu(self.wi(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: TiltConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.norm2 = RMSNorm(cfg.d_model)
        self.ff = FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, bias, mask, keep_weights=False):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, bias, mask, keep_weights))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: TiltConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.d_model)
        self.self_attn = Attention(cfg)
        self.norm2 = RMSNorm(cfg.d_model)
        self.cross_attn = Attention(cfg)
        self.norm3 = RMSNorm(cfg.d_model)
        self.ff = FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, self_bias, self_mask, memory, mem_mask):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, self_bias, self_mask))
        y = y + self.drop(self.cross_attn(self.norm2(y), memory, None, mem_mask))
        return y + self.drop(self.ff(self.norm3(y)))


# ---------------------------------------------------------------------------
# model


class Tilt(nn.Module):
    """Text + layout + image encoder-decoder.

    ``spatial_bias`` and ``vision`` switch the 2D bias terms and the image
    embeddings on or off without changing the parameter set.
    """

    def __init__(self, cfg: TiltConfig, spatial_bias: bool = True, vision: bool = True):
        super().__init__()
        self.cfg = cfg
        self.spatial_bias = spatial_bias
        self.vision_enabled = vision
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.bias = BiasParams(cfg.num_heads, cfg.num_buckets)
        self.dec_bias = nn.Parameter(torch.randn(cfg.num_buckets, cfg.num_heads) * 0.02)
        self.unet = UNet(cfg.unet_channels, FEATURE_CHANNELS)
        self.vision_proj = nn.Linear(FEATURE_CHANNELS, cfg.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.enc_norm = RMSNorm(cfg.d_model)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.dec_norm = RMSNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self._init_weights()

    def _init_weights(self) -> None:
        for name, p in self.named_parameters():
            if name.startswith(("bias.", "dec_bias")) or p.dim() == 1:
                continue
            if name == "embed.weight":
                nn.init.normal_(p, std=1.0)
            elif name.startswith("unet."):
                continue  # torch's conv defaults
            else:
                nn.init.normal_(p, std=p.shape[1] ** -0.5)

    # -- encoder --------------------------------------------------------

    def image_embeddings(self, batch: Batch) -> torch.Tensor:
        """U: [B, n, d_model], zero for ids without image features."""
        b, n = batch.ids.shape
        dtype = self.embed.weight.dtype
        if not self.vision_enabled:
            return torch.zeros(b, n, self.cfg.d_model, dtype=dtype)
        fm = self.unet(batch.images.to(dtype))
        rows = []
        for i in range(b):
            pooled = roi_pool_many(fm[i], batch.roi_boxes[i], *batch.page_sizes[i])
            u = self.vision_proj(pooled)
            u = torch.cat([u, u.new_zeros(1, u.shape[1])])  # row -1 -> zeros
            rows.append(u[batch.roi_index[i]])
        return torch.stack(rows)

    def encode(self, batch: Batch, keep_weights: bool = False) -> torch.Tensor:
        x = self.embed(batch.ids) + self.image_embeddings(batch)
        x = self.drop(x)
        bias = build_bias(batch.centers, self.bias, spatial=self.spatial_bias)
        for layer in self.encoder:
            x = layer(x, bias, batch.key_mask, keep_weights)
        return self.enc_norm(x)

    # -- decoder --------------------------------------------------------

    def decode_logits(self, memory: torch.Tensor, mem_mask: torch.Tensor, dec_in: torch.Tensor) -> torch.Tensor:
        m = dec_in.shape[1]
        y = self.drop(self.embed(dec_in))
        causal = torch.ones(m, m, dtype=torch.bool).tril()
        self_bias = causal_bias(m, self.dec_bias, DECODER_BUCKETS)[None]
        self_bias = self_bias.masked_fill(~causal, NEG_INF)
        self_mask = torch.ones(dec_in.shape, dtype=torch.bool)
        for layer in self.decoder:
            y = layer(y, self_bias, self_mask, memory, mem_mask)
        y = self.dec_norm(y) * self.cfg.d_model**-0.5
        return y @ self.embed.weight.T

    def loss(self, batch: Batch) -> torch.Tensor:
        if batch.labels is None or batch.labels.shape[1] == 0:
            raise ValueError("decode loss needs a non-empty target")
        memory = self.encode(batch)
        logits = self.decode_logits(memory, batch.key_mask, batch.dec_in)
        return decode_loss(logits, batch.labels)

    @torch.no_grad()
    def generate(self, batch: Batch, max_len: int | None = None) -> list[str]:
        """Greedy decoding until EOS or ``max_len`` ids per example."""
        max_len = self.cfg.max_tgt_len if max_len is None else max_len
        b = batch.ids.shape[0]
        if max_len <= 0:
            return [""] * b
        memory = self.encode(batch)
        dec = torch.full((b, 1), vocab.BOS, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        for _ in range(max_len):
            logits = self.decode_logits(memory, batch.key_mask, dec)[:, -1]
            logits[:, [vocab.PAD, vocab.BOS]] = float("-inf")
            nxt = logits.argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, vocab.EOS), nxt)
            dec = torch.cat([dec, nxt[:, None]], dim=1)
            done |= nxt == vocab.EOS
            if bool(done.all()):
                break
        return [vocab.decode(row[1:].tolist()) for row in dec]


def decode_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over non-pad target positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=vocab.PAD)


def make_batch(
    examples: Sequence[Seq2SeqExample],
    cfg: TiltConfig,
    with_targets: bool = True,
    bias_scales: Sequence[tuple[float, float] | None] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    scales = bias_scales or [None] * len(examples)
    feats = [featurize(ex, cfg, s) for ex, s in zip(examples, scales)]
    return collate(feats, [ex.target for ex in examples] if with_targets else None, cfg, dtype)
