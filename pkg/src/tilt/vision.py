"""Truncated U-Net backbone, per-token ROI features and image augmentations."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .layout import BACKGROUND, BBox, Document

FEATURE_STRIDE = 8
FEATURE_CHANNELS = 128

ROTATION_RANGE = (-5.0, 5.0)
TRANSLATION_RANGE = (-0.05, 0.05)
SCALE_RANGE = (0.9, 1.1)
SHEAR_RANGE = (-5.0, 5.0)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv2(F.gelu(self.conv1(x)))
        return F.gelu(y + (x if self.skip is None else self.skip(x)))


class StemBlock(nn.Module):
    """Strided entry convolution to 1/2 followed by a residual block."""

    def __init__(self, cout: int):
        super().__init__()
        self.stem = nn.Conv2d(1, cout, 3, stride=2, padding=1)
        self.block = ResBlock(cout, cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(F.gelu(self.stem(x)))


class UpBlock(nn.Module):
    def __init__(self, cin: int, cskip: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cin, 2, stride=2)
        self.block = ResBlock(cin + cskip, cskip)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.block(torch.cat([self.up(x), skip], dim=1))


class UNet(nn.Module):
    """U-Net whose decoder stops at 1/8 of the input resolution.

    ``channels[k]`` is the width of the encoder stage at stride 2**(k+1);
    the default five stages reach 1/32. Decoding climbs back to 1/8 with
    skip connections from the matching encoder stages, then a 1x1 head
    produces ``out_channels`` features.
    """

    def __init__(
        self,
        channels: Sequence[int] = (16, 32, 64, 128, 128),
        out_channels: int = FEATURE_CHANNELS,
    ):
        super().__init__()
        if len(channels) < 3:
            raise ValueError("need at least three encoder stages to reach 1/8")
        self.channels = tuple(channels)
        self.depth = len(channels)
        self.add_module("enc1", StemBlock(channels[0]))
        for k in range(1, self.depth):
            self.add_module(f"enc{k + 1}", ResBlock(channels[k - 1], channels[k]))
        for k in range(self.depth - 1, 2, -1):
            # decoder stage k lands on encoder stage k (stride 2**k)
            self.add_module(f"dec{k}", UpBlock(channels[k], channels[k - 1]))
        self.head = nn.Conv2d(channels[2], out_channels, 1)

    @property
    def stride(self) -> int:
        return 2**self.depth

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``image`` [B, 1, H, W] in [0, 1] (white = 1) -> [B, C, H/8, W/8]."""
        if image.dim() != 4 or image.shape[1] != 1:
            raise ValueError(f"expected [B, 1, H, W], got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image {w}x{h} is not a multiple of {self.stride}")
        feats = [self.enc1(1.0 - image)]
        for k in range(2, self.depth + 1):
            feats.append(getattr(self, f"enc{k}")(F.max_pool2d(feats[-1], 2)))
        y = feats[-1]
        for k in range(self.depth - 1, 2, -1):
            y = getattr(self, f"dec{k}")(y, feats[k - 1])
        return self.head(y)


def unet_forward(image: torch.Tensor, net: UNet) -> torch.Tensor:
    """Single page [H, W] -> feature map [C, H/8, W/8]."""
    if image.dim() != 2:
        raise ValueError(f"expected a single [H, W] page, got {tuple(image.shape)}")
    return net(image[None, None])[0]


def roi_cells(
    bbox: Sequence[float], page_w: float, page_h: float, grid_w: int, grid_h: int
) -> tuple[int, int, int, int]:
    """Inclusive (c0, r0, c1, r1) feature cells covered by a page-space box."""
    x0, y0, x1, y1 = bbox
    sx, sy = grid_w / page_w, grid_h / page_h

    def cover(a: float, b: float, s: float, n: int) -> tuple[int, int]:
        lo = min(max(int(math.floor(a * s)), 0), n - 1)
        hi = min(max(int(math.ceil(b * s)) - 1, lo), n - 1)
        return lo, hi

    c0, c1 = cover(x0, x1, sx, grid_w)
    r0, r1 = cover(y0, y1, sy, grid_h)
    return c0, r0, c1, r1


def roi_pool(fm: torch.Tensor, bbox: BBox | Sequence[float], page_w: float, page_h: float) -> torch.Tensor:
    """Channelwise max over the cells a box covers; ``fm`` is [C, h, w]."""
    if isinstance(bbox, BBox):
        bbox = bbox.as_list()
    c0, r0, c1, r1 = roi_cells(bbox, page_w, page_h, fm.shape[-1], fm.shape[-2])
    return fm[:, r0 : r1 + 1, c0 : c1 + 1].amax(dim=(1, 2))


def roi_pool_many(fm: torch.Tensor, boxes: np.ndarray, page_w: float, page_h: float) -> torch.Tensor:
    """[C, h, w] x [n, 4] -> [n, C]."""
    if len(boxes) == 0:
        return fm.new_zeros((0, fm.shape[0]))
    return torch.stack([roi_pool(fm, b, page_w, page_h) for b in np.asarray(boxes).tolist()])


def project_embed(pooled: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    return proj(pooled)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0  # degrees
    tx: float = 0.0  # fraction of page width
    ty: float = 0.0  # fraction of page height
    scale: float = 1.0
    shear: float = 0.0  # degrees

    @classmethod
    def sample(cls, rng: np.random.Generator) -> AffineParams:
        return cls(
            rotation=float(rng.uniform(*ROTATION_RANGE)),
            tx=float(rng.uniform(*TRANSLATION_RANGE)),
            ty=float(rng.uniform(*TRANSLATION_RANGE)),
            scale=float(rng.uniform(*SCALE_RANGE)),
            shear=float(rng.uniform(*SHEAR_RANGE)),
        )

    def matrix(self, width: float, height: float) -> np.ndarray:
        """3x3 homogeneous map of page points, centred on the page middle."""
        cx, cy = width / 2, height / 2
        a = math.radians(self.rotation)
        rot = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
        shear = np.array([[1, math.tan(math.radians(self.shear)), 0], [0, 1, 0], [0, 0, 1]])
        scale = np.diag([self.scale, self.scale, 1.0])
        to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
        back = np.array(
            [[1, 0, cx + self.tx * width], [0, 1, cy + self.ty * height], [0, 0, 1]], dtype=np.float64
        )
        return back @ rot @ shear @ scale @ to_origin


def transform_points(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ m[:2, :2].T + m[:2, 2]


def warp_image(image: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Resample ``image`` under the page map ``m`` (bilinear, white outside)."""
    inv = np.linalg.inv(m)
    # ndimage works in (row, col) index space with pixel centres at +0.5
    a = inv[:2, :2][::-1, ::-1]
    t = inv[:2, 2][::-1]
    offset = a @ np.array([0.5, 0.5]) + t - 0.5
    out = ndimage.affine_transform(
        image.astype(np.float64), a, offset=offset, order=1, mode="constant", cval=BACKGROUND
    )
    return out.astype(np.float32)


def transform_boxes(boxes: np.ndarray, m: np.ndarray, width: float, height: float) -> np.ndarray:
    """Axis-aligned envelope of each transformed box, clamped to the page."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    corners = np.stack(
        [boxes[:, [0, 1]], boxes[:, [2, 1]], boxes[:, [0, 3]], boxes[:, [2, 3]]], axis=1
    )
    moved = transform_points(m, corners.reshape(-1, 2)).reshape(-1, 4, 2)
    lo, hi = moved.min(axis=1), moved.max(axis=1)
    out = np.concatenate([lo, hi], axis=1)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def affine_augment(
    doc: Document,
    rng: np.random.Generator,
    p: float = 0.9,
    params: AffineParams | None = None,
) -> Document:
    """With probability ``p`` warp the page and move every box with it."""
    if rng.random() >= p:
        return doc
    params = params or AffineParams.sample(rng)
    w, h = doc.page.width, doc.page.height
    m = params.matrix(w, h)
    boxes = np.array([t.bbox.as_list() for t in doc.tokens], dtype=np.float64).reshape(-1, 4)
    moved = transform_boxes(boxes, m, w, h)
    tokens = [replace(t, bbox=BBox(*b)) for t, b in zip(doc.tokens, moved.tolist())]
    image = None if doc.page.image is None else warp_image(doc.page.image, m)
    return replace(doc, page=replace(doc.page, image=image), tokens=tuple(tokens))


def mask_image_regions(
    image: np.ndarray,
    boxes: np.ndarray,
    rng: np.random.Generator,
    p: float = 0.8,
) -> tuple[np.ndarray, np.ndarray]:
    """Blank each box's pixels independently with probability ``p``.

    Returns the new image and a boolean array marking which boxes were blanked.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    hit = rng.random(len(boxes)) < p
    out = image.copy()
    h, w = image.shape
    for (x0, y0, x1, y1), blank in zip(boxes.tolist(), hit):
        if not blank:
            continue
        c0, c1 = max(int(math.floor(x0)), 0), min(int(math.ceil(x1)), w)
        r0, r1 = max(int(math.floor(y0)), 0), min(int(math.ceil(y1)), h)
        out[r0:r1, c0:c1] = BACKGROUND
    return out, hit
