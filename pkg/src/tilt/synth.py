"""Synthetic forms and layout-dependent QA pages for tests and ablations.

Everything is drawn on a monospace character grid so the generator's own
placement is the ground truth for every question it emits.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .layout import (
    CANONICAL_HEIGHT,
    CANONICAL_WIDTH,
    BBox,
    Document,
    Page,
    TaskInstance,
    Token,
    rasterize,
)

FONT_W, FONT_H = 8, 12


@dataclass
class _Grid:
    cols: int
    rows: int

    def __post_init__(self) -> None:
        self.used = np.zeros((self.rows, self.cols), dtype=bool)

    def fits(self, row: int, col: int, height: int, width: int) -> bool:
        if row < 0 or col < 0 or row + height > self.rows or col + width > self.cols:
            return False
        r0, c0 = max(row - 1, 0), max(col - 1, 0)
        return not self.used[r0 : row + height + 1, c0 : col + width + 1].any()

    def claim(self, row: int, col: int, height: int, width: int) -> None:
        self.used[row : row + height, col : col + width] = True

    def place(self, rng: np.random.Generator, height: int, width: int, tries: int = 400) -> tuple[int, int]:
        for _ in range(tries):
            row = int(rng.integers(0, max(self.rows - height + 1, 1)))
            col = int(rng.integers(0, max(self.cols - width + 1, 1)))
            if self.fits(row, col, height, width):
                self.claim(row, col, height, width)
                return row, col
        raise ValueError(f"page is full: no room for a {width}x{height}-cell block")


def _words_at(text: str, row: int, col: int) -> list[Token]:
    out, c = [], col
    for w in text.split():
        out.append(Token(w, BBox(c * FONT_W, row * FONT_H, (c + len(w)) * FONT_W, (row + 1) * FONT_H)))
        c += len(w) + 1
    return out


def synth_form(
    seed: int,
    spec: Mapping,
    page_w: int = CANONICAL_WIDTH,
    page_h: int = CANONICAL_HEIGHT,
    doc_id: str | None = None,
) -> Document:
    """Render key/value fields and an optional table onto a blank page.

    ``spec`` is either ``{"fields": {...}, "table": [[...], ...]}`` or a
    plain mapping of fields. Values sit right of their key; table cells sit
    below their header. Reading order is shuffled per block so only the
    geometry links a key to its value.
    """
    if "fields" in spec or "table" in spec:
        fields = dict(spec.get("fields", {}))
        table = [list(r) for r in spec.get("table", [])]
    else:
        fields, table = dict(spec), []
    rng = np.random.default_rng(seed)
    grid = _Grid(page_w // FONT_W, page_h // FONT_H)
    blocks: list[list[Token]] = []
    annotations: list[TaskInstance] = []

    for key, value in fields.items():
        width = len(key) + 2 + len(value)
        row, col = grid.place(rng, 1, width)
        blocks.append(_words_at(key, row, col))
        blocks.append(_words_at(value, row, col + len(key) + 2))
        annotations.append(TaskInstance("qa", f"what is the {key.lower()}?", (value,)))
        annotations.append(TaskInstance("kie", key, (value,)))

    if table:
        ncols = max(len(r) for r in table)
        widths = [max(len(r[j]) if j < len(r) else 0 for r in table) + 2 for j in range(ncols)]
        height = 2 * len(table) - 1
        row, col = grid.place(rng, height, sum(widths))
        for i, r in enumerate(table):
            c = col
            for j, cell in enumerate(r):
                if cell:
                    blocks.append(_words_at(cell, row + 2 * i, c))
                c += widths[j]
        if len(table) > 1:
            for j, header in enumerate(table[0]):
                if j < len(table[1]) and table[1][j]:
                    annotations.append(
                        TaskInstance("qa", f"what is the value below {header}?", (table[1][j],))
                    )

    order = rng.permutation(len(blocks))
    tokens = [t for k in order for t in blocks[k]]
    image = rasterize(page_w, page_h, tokens)
    return Document(doc_id or f"form-{seed}", Page(page_w, page_h, image), tuple(tokens), tuple(annotations))


# ---------------------------------------------------------------------------
# ablation tasks

LETTERS = string.ascii_uppercase
DIGITS = string.digits
ANCHOR_MARK = "*"


def layout_qa_doc(
    rng: np.random.Generator,
    doc_id: str,
    cols: int = 3,
    rows: int = 3,
    page_w: int = CANONICAL_WIDTH,
    page_h: int = CANONICAL_HEIGHT,
    marker: str = ANCHOR_MARK,
) -> Document:
    """A grid of one-letter cells plus one marker cell, in random reading order.

    The question asks for the cell directly below, or directly right of, the
    marker. Text and reading order carry no cue; only the 2D arrangement
    identifies the answer.
    """
    labels = list(rng.choice(list(LETTERS), size=rows * cols, replace=False))
    candidates = [("below", r, c) for r in range(rows - 1) for c in range(cols)]
    candidates += [("right of", r, c) for r in range(rows) for c in range(cols - 1)]
    rel, mr, mc = candidates[int(rng.integers(len(candidates)))]
    labels[mr * cols + mc] = marker
    step_x = int(rng.integers(3, 6))  # character cells between columns
    step_y = int(rng.integers(2, 4))
    max_col = page_w // FONT_W - step_x * (cols - 1) - 1
    max_row = page_h // FONT_H - step_y * (rows - 1) - 1
    c0, r0 = int(rng.integers(0, max_col)), int(rng.integers(0, max_row))
    cells = {}
    for r in range(rows):
        for c in range(cols):
            col, row = c0 + c * step_x, r0 + r * step_y
            cells[r, c] = Token(
                str(labels[r * cols + c]),
                BBox(col * FONT_W, row * FONT_H, (col + 1) * FONT_W, (row + 1) * FONT_H),
            )
    answer = cells[mr + 1, mc] if rel == "below" else cells[mr, mc + 1]
    tokens = [cells[k] for k in sorted(cells)]
    tokens = [tokens[i] for i in rng.permutation(len(tokens))]
    image = rasterize(page_w, page_h, tokens)
    return Document(
        doc_id, Page(page_w, page_h, image), tuple(tokens), (TaskInstance("qa", f"{rel} {marker}", (answer.text,)),)
    )


def font_style_doc(
    rng: np.random.Generator,
    doc_id: str,
    n_words: int = 4,
    page_w: int = CANONICAL_WIDTH,
    page_h: int = CANONICAL_HEIGHT,
) -> Document:
    """Scattered one-letter words, exactly one drawn solid and the rest outlined.

    The question asks which word is bold; text and layout carry no cue.
    """
    labels = rng.choice(list(LETTERS), size=n_words, replace=False)
    grid = _Grid(page_w // (2 * FONT_W), page_h // (2 * FONT_H))
    tokens = []
    for lab in labels:
        row, col = grid.place(rng, 1, 1)
        x, y = col * 2 * FONT_W, row * 2 * FONT_H
        tokens.append(Token(str(lab), BBox(x, y, x + 2 * FONT_W, y + 2 * FONT_H)))
    bold = int(rng.integers(n_words))
    styles = ["solid" if i == bold else "outline" for i in range(n_words)]
    image = rasterize(page_w, page_h, tokens, styles)
    return Document(
        doc_id,
        Page(page_w, page_h, image),
        tuple(tokens),
        (TaskInstance("qa", "bold", (tokens[bold].text,)),),
    )


TASK_GENERATORS = {"layout-qa": layout_qa_doc, "font-style": font_style_doc}


def synth_corpus(kind: str, n: int, seed: int) -> list[Document]:
    """``n`` documents of one synthetic family, deterministic in ``seed``."""
    if kind == "form":
        return [synth_form(seed * 100_003 + i, random_form_spec(np.random.default_rng([seed, i])), doc_id=f"form-{seed}-{i}") for i in range(n)]
    if kind not in TASK_GENERATORS:
        raise ValueError(f"unknown synthetic family {kind!r}")
    gen = TASK_GENERATORS[kind]
    return [gen(np.random.default_rng([seed, i]), f"{kind}-{seed}-{i}") for i in range(n)]


FIELD_NAMES = ("TOTAL", "DATE", "NAME", "TAX", "ITEM", "SHOP", "CODE", "CASH")


def random_form_spec(rng: np.random.Generator, n_fields: int = 2) -> dict:
    keys = rng.choice(FIELD_NAMES, size=n_fields, replace=False)
    fields = {}
    for k in keys:
        if k in ("TOTAL", "TAX", "CASH"):
            fields[str(k)] = f"{rng.integers(1, 100)}.{rng.integers(0, 100):02d}"
        elif k == "DATE":
            fields[str(k)] = f"{rng.integers(1, 29):02d}/{rng.integers(1, 13):02d}"
        else:
            fields[str(k)] = "".join(rng.choice(list(LETTERS), size=3))
    return {"fields": fields}


def overfit_fixture(n: int = 16, seed: int = 0) -> list[Document]:
    return synth_corpus("form", n, seed)


def yes_no_doc(seed: int, threshold: float = 4.0) -> Document:
    """Receipt with a total and a yes/no question about it."""
    rng = np.random.default_rng(seed)
    value = float(rng.integers(1, 10)) + 0.5
    doc = synth_form(seed, {"TOTAL": f"{value:.2f}"})
    answer = "yes" if value > threshold else "no"
    q = TaskInstance("qa", f"is total > {threshold:g}?", (answer,))
    return Document(doc.id, doc.page, doc.tokens, (q,))
