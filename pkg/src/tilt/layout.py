"""Document data model, dataset I/O, text rendering and page geometry helpers.

Coordinates are page pixels with the origin at the top-left corner. Page
rasters are float32 grayscale arrays in [0, 1] where 1.0 is white paper.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

CANONICAL_WIDTH = 512
CANONICAL_HEIGHT = 384
BACKGROUND = 1.0
INK = 0.0

TOKEN_KINDS = ("word", "image_anchor", "prompt", "sep", "sentinel")
TASKS = ("qa", "kie", "classify")


class DatasetError(ValueError):
    """Raised for malformed dataset lines; the message names the line."""


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"inverted bbox {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def clamp(self, width: float, height: float) -> BBox:
        def c(v: float, hi: float) -> float:
            return min(max(v, 0.0), hi)

        return BBox(c(self.x0, width), c(self.y0, height), c(self.x1, width), c(self.y1, height))

    def scale(self, fx: float, fy: float) -> BBox:
        return BBox(self.x0 * fx, self.y0 * fy, self.x1 * fx, self.y1 * fy)

    def union(self, other: BBox) -> BBox:
        return BBox(
            min(self.x0, other.x0),
            min(self.y0, other.y0),
            max(self.x1, other.x1),
            max(self.y1, other.y1),
        )


@dataclass(frozen=True)
class Token:
    text: str
    bbox: BBox
    kind: str = "word"

    def __post_init__(self) -> None:
        if self.kind not in TOKEN_KINDS:
            raise ValueError(f"unknown token kind {self.kind!r}")
        if self.kind == "word" and not self.text:
            raise ValueError("word tokens need non-empty text")
        if self.kind == "image_anchor" and self.text:
            raise ValueError("image anchor tokens carry no text")


@dataclass(frozen=True, eq=False)
class Page:
    width: int
    height: int
    image: np.ndarray | None = None
    image_path: str | None = None

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"page dimensions must be positive, got {self.width}x{self.height}")
        if self.image is not None and self.image.shape != (self.height, self.width):
            raise ValueError(
                f"raster is {self.image.shape[1]}x{self.image.shape[0]}, page declares "
                f"{self.width}x{self.height}"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Page):
            return NotImplemented
        if (self.width, self.height) != (other.width, other.height):
            return False
        if self.image is None or other.image is None:
            return self.image is None and other.image is None
        return bool(np.array_equal(self.image, other.image))

    def blank(self) -> np.ndarray:
        return np.full((self.height, self.width), BACKGROUND, dtype=np.float32)


@dataclass(frozen=True)
class TaskInstance:
    task: str
    prompt: str
    answers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        object.__setattr__(self, "answers", tuple(self.answers))


@dataclass(frozen=True)
class Document:
    id: str
    page: Page
    tokens: tuple[Token, ...]
    annotations: tuple[TaskInstance, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens if t.kind == "word"]

    def with_tokens(self, tokens: Iterable[Token]) -> Document:
        return replace(self, tokens=tuple(tokens))

    def with_image(self, image: np.ndarray | None) -> Document:
        return replace(self, page=replace(self.page, image=image))


# ---------------------------------------------------------------------------
# raster I/O


def read_raster(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) as grayscale floats in [0, 1]."""
    with Image.open(path) as im:
        if im.format not in ("PPM", "PGM"):
            raise DatasetError(f"{path}: expected a PGM/PPM raster, got {im.format}")
        gray = im.convert("L")
        return np.asarray(gray, dtype=np.float32) / 255.0


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PPM")


# ---------------------------------------------------------------------------
# dataset I/O


def parse_document(obj: dict, base_dir: Path | None = None, where: str = "document") -> Document:
    try:
        page_obj = obj["page"]
        width, height = int(page_obj["width"]), int(page_obj["height"])
        image_path = page_obj.get("image_path")
        raw_tokens = obj["tokens"]
        doc_id = str(obj["id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: missing or invalid field {exc}") from exc

    image = None
    if image_path:
        full = Path(image_path)
        if base_dir is not None and not full.is_absolute():
            full = base_dir / full
        image = read_raster(full)
        if image.shape != (height, width):
            raise DatasetError(
                f"{where}: raster {full} is {image.shape[1]}x{image.shape[0]}, "
                f"page declares {width}x{height}"
            )
    page = Page(width, height, image, image_path)

    tokens = []
    for k, t in enumerate(raw_tokens):
        text = t.get("text", "")
        x0, y0, x1, y1 = (float(v) for v in t["bbox"])
        if x0 > x1 or y0 > y1:
            raise DatasetError(f"{where}: token {k} ({text!r}) has inverted bbox {t['bbox']}")
        kind = t.get("kind", "word")
        try:
            tokens.append(Token(text, BBox(x0, y0, x1, y1).clamp(width, height), kind))
        except ValueError as exc:
            raise DatasetError(f"{where}: token {k} ({text!r}): {exc}") from exc

    annotations = []
    for a in obj.get("annotations", []):
        try:
            annotations.append(TaskInstance(a["task"], a["prompt"], tuple(a.get("answers", []))))
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{where}: bad annotation {a!r}: {exc}") from exc
    return Document(doc_id, page, tuple(tokens), tuple(annotations))


def load_dataset(path: str | Path) -> Iterator[Document]:
    """Stream Documents from a JSONL file; image paths resolve against its folder."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            yield parse_document(obj, path.parent, where=f"{path}:{lineno}")


def document_to_json(doc: Document) -> dict:
    return {
        "id": doc.id,
        "page": {
            "width": doc.page.width,
            "height": doc.page.height,
            "image_path": doc.page.image_path,
        },
        "tokens": [
            {"text": t.text, "bbox": t.bbox.as_list()}
            | ({} if t.kind == "word" else {"kind": t.kind})
            for t in doc.tokens
        ],
        "annotations": [
            {"task": a.task, "prompt": a.prompt, "answers": list(a.answers)}
            for a in doc.annotations
        ],
    }


def save_dataset(docs: Iterable[Document], path: str | Path, image_dir: str = "images") -> int:
    """Write JSONL; page rasters go to PGM files next to it. Returns the count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as fh:
        for doc in docs:
            if doc.page.image is not None:
                rel = Path(image_dir) / f"{doc.id}.pgm"
                (path.parent / rel).parent.mkdir(parents=True, exist_ok=True)
                write_pgm(path.parent / rel, doc.page.image)
                doc = replace(doc, page=replace(doc.page, image_path=rel.as_posix()))
            fh.write(json.dumps(document_to_json(doc)) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# rendering


def rasterize(
    width: int,
    height: int,
    tokens: Iterable[Token],
    styles: Sequence[str] | None = None,
) -> np.ndarray:
    """Draw each character of each word as an ink rectangle.

    ``styles`` (one per token) chooses ``"solid"`` cells or ``"outline"``
    cells; this is the only visual cue that distinguishes otherwise
    identical layouts.
    """
    img = np.full((height, width), BACKGROUND, dtype=np.float32)
    tokens = list(tokens)
    styles = styles or ["solid"] * len(tokens)
    for tok, style in zip(tokens, styles):
        if tok.kind != "word":
            continue
        b = tok.bbox
        n = max(len(tok.text), 1)
        cw = (b.x1 - b.x0) / n
        for k in range(n):
            x0 = int(round(b.x0 + k * cw)) + 1
            x1 = int(round(b.x0 + (k + 1) * cw)) - 1
            y0 = int(round(b.y0)) + 1
            y1 = int(round(b.y1)) - 1
            x0, y0 = max(x0, 0), max(y0, 0)
            x1, y1 = min(x1, width), min(y1, height)
            if x1 <= x0 or y1 <= y0:
                continue
            if style == "outline":
                img[y0:y1, x0] = INK
                img[y0:y1, x1 - 1] = INK
                img[y0, x0:x1] = INK
                img[y1 - 1, x0:x1] = INK
            else:
                img[y0:y1, x0:x1] = INK
    return img


def render_plaintext(
    text: str,
    page_w: int = CANONICAL_WIDTH,
    page_h: int = CANONICAL_HEIGHT,
    font_w: int = 8,
    font_h: int = 12,
    doc_id: str = "plain",
    with_image: bool = True,
) -> Document:
    """Lay out whitespace-separated words on a monospace grid.

    Words flow left to right and wrap to the next row. A word wider than a
    whole row starts on a fresh row and spills over as many rows as it needs;
    the document then carries a ``hard-wrap`` warning.
    """
    if min(page_w, page_h, font_w, font_h) <= 0:
        raise ValueError("page and font dimensions must be positive")
    cols, rows = page_w // font_w, page_h // font_h
    if cols < 1 or rows < 1:
        raise ValueError(f"a {font_w}x{font_h} font does not fit a {page_w}x{page_h} page")

    tokens: list[Token] = []
    warnings: list[str] = []
    row, col = 0, 0
    for word in text.split():
        n = len(word)
        if n > cols:
            if col > 0:
                row, col = row + 1, 0
            span_rows = math.ceil(n / cols)
            bbox = BBox(0, row * font_h, cols * font_w, (row + span_rows) * font_h)
            warnings.append(f"hard-wrap: {word!r} is wider than a {cols}-column row")
            row += span_rows
            col = 0
        else:
            if col > 0 and col + 1 + n > cols:
                row, col = row + 1, 0
            elif col > 0:
                col += 1
            bbox = BBox(col * font_w, row * font_h, (col + n) * font_w, (row + 1) * font_h)
            col += n
        if bbox.y1 > page_h:
            raise ValueError(f"text does not fit on a {page_w}x{page_h} page")
        tokens.append(Token(word, bbox))

    page = Page(page_w, page_h, rasterize(page_w, page_h, tokens) if with_image else None)
    return Document(doc_id, page, tuple(tokens), warnings=tuple(warnings))


# ---------------------------------------------------------------------------
# geometry


def grid_for_count(count: int) -> tuple[int, int]:
    """(cols, rows) closest to square with cols * rows == count, cols >= rows."""
    if count < 1:
        raise ValueError(f"anchor count must be positive, got {count}")
    rows = max(r for r in range(1, math.isqrt(count) + 1) if count % r == 0)
    cols = count // rows
    if count > 1 and rows == 1:
        raise ValueError(f"{count} anchors only factor into a 1x{count} strip")
    return cols, rows


def image_anchor_tokens(page: Page, count: int = 16) -> list[Token]:
    """Textless tokens whose boxes tile the page in a near-square grid."""
    cols, rows = grid_for_count(count)
    xs = [page.width * c / cols for c in range(cols + 1)]
    ys = [page.height * r / rows for r in range(rows + 1)]
    return [
        Token("", BBox(xs[c], ys[r], xs[c + 1], ys[r + 1]), kind="image_anchor")
        for r in range(rows)
        for c in range(cols)
    ]


def quantize_boxes(
    boxes: np.ndarray, page_w: float, page_h: float, grid_w: int = 64, grid_h: int = 48
) -> np.ndarray:
    """Integer grid cells of box centers; ``boxes`` is [n, 4]. Returns [n, 2]."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2 * grid_w / page_w
    cy = (boxes[:, 1] + boxes[:, 3]) / 2 * grid_h / page_h
    out = np.stack([np.floor(cx), np.floor(cy)], axis=1)
    out[:, 0] = np.clip(out[:, 0], 0, grid_w - 1)
    out[:, 1] = np.clip(out[:, 1], 0, grid_h - 1)
    return out.astype(np.int64)


def quantize_centers(doc: Document, grid_w: int = 64, grid_h: int = 48) -> list[tuple[int, int]]:
    boxes = np.array([t.bbox.as_list() for t in doc.tokens], dtype=np.float64).reshape(-1, 4)
    cells = quantize_boxes(boxes, doc.page.width, doc.page.height, grid_w, grid_h)
    return [(int(x), int(y)) for x, y in cells]


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    if image.shape == (height, width):
        return image
    im = Image.fromarray(image.astype(np.float32), mode="F")
    return np.asarray(im.resize((width, height), Image.BILINEAR), dtype=np.float32)


def rescale_document(
    doc: Document, width: int = CANONICAL_WIDTH, height: int = CANONICAL_HEIGHT
) -> Document:
    """Map a page of any size onto ``width`` x ``height``, boxes scaled alike."""
    if (doc.page.width, doc.page.height) == (width, height):
        return doc
    fx, fy = width / doc.page.width, height / doc.page.height
    tokens = [replace(t, bbox=t.bbox.scale(fx, fy).clamp(width, height)) for t in doc.tokens]
    image = None if doc.page.image is None else resize_image(doc.page.image, width, height)
    return replace(doc, page=Page(width, height, image, doc.page.image_path), tokens=tuple(tokens))
