"""Training-example construction: span corruption, task formatting, case copies."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import vocab
from .layout import BBox, Document, Page, TaskInstance, Token, image_anchor_tokens
from .vision import mask_image_regions

MASK_BUDGET = 0.15
MEAN_SPAN = 3
IMAGE_MASK_P = 0.8
NONE_ANSWER = "None"
PROMPT_FONT = (8, 12)
NUM_ANCHORS = 16

_DIGIT = re.compile(r"\d")
_SENTENCE_END = re.compile(r"[.!?]$")
_STRIP = re.compile(r"^\W+|\W+$")


@dataclass(frozen=True)
class Seq2SeqExample:
    """Encoder tokens (with geometry), the page they sit on, and a target string."""

    source: tuple[Token, ...]
    target: str
    page: Page
    doc_id: str = ""
    truncated: bool = False


def token_length(tok: Token) -> int:
    """Number of vocabulary ids a source token expands to."""
    if tok.kind in ("word", "prompt"):
        return len(tok.text.encode("utf-8")) + 1
    return 1


# ---------------------------------------------------------------------------
# salient span masking


def _is_salient(text: str, sentence_initial: bool) -> bool:
    if _DIGIT.search(text):
        return True
    core = _STRIP.sub("", text)
    letters = [c for c in core if c.isalpha()]
    if len(letters) >= 2 and all(c.isupper() for c in letters):
        return True
    return bool(core) and core[0].isupper() and not sentence_initial


def salient_spans(doc: Document) -> list[tuple[int, int]]:
    """Maximal runs of entity-looking words as (start, length) over ``doc.tokens``.

    A word is salient when it carries a digit (amounts, dates, ids), is
    written in capitals, or is capitalised somewhere other than the start
    of a sentence.
    """
    spans: list[tuple[int, int]] = []
    start = None
    sentence_initial = True
    for i, tok in enumerate(doc.tokens):
        salient = tok.kind == "word" and _is_salient(tok.text, sentence_initial)
        if tok.kind == "word":
            sentence_initial = bool(_SENTENCE_END.search(tok.text))
        if salient and start is None:
            start = i
        elif not salient and start is not None:
            spans.append((start, i - start))
            start = None
    if start is not None:
        spans.append((start, len(doc.tokens) - start))
    return spans


def choose_spans(
    doc: Document,
    rng: np.random.Generator,
    budget: float = MASK_BUDGET,
    mean_span: int = MEAN_SPAN,
) -> list[tuple[int, int]]:
    """Pick disjoint, non-adjacent spans covering ~``budget`` of the words.

    Salient spans are taken first (in random order, clipped to what is left
    of the budget); random spans of mean length ``mean_span`` fill the rest.
    The budget is rounded stochastically so it is exact in expectation.
    """
    maskable = np.array([t.kind == "word" for t in doc.tokens], dtype=bool)
    n_words = int(maskable.sum())
    remaining = int(np.floor(budget * n_words + rng.random()))
    taken = np.zeros(len(doc.tokens) + 2, dtype=bool)  # padded by one on each side
    chosen: list[tuple[int, int]] = []
    max_spans = vocab.NUM_SENTINELS - 1

    def free(start: int, length: int) -> bool:
        if start < 0 or start + length > len(doc.tokens):
            return False
        if not maskable[start : start + length].all():
            return False
        return not taken[start : start + length + 2].any()

    def take(start: int, length: int) -> None:
        nonlocal remaining
        taken[start + 1 : start + length + 1] = True
        chosen.append((start, length))
        remaining -= length

    candidates = salient_spans(doc)
    for k in rng.permutation(len(candidates)):
        if remaining <= 0 or len(chosen) >= max_spans:
            break
        start, length = candidates[k]
        length = min(length, remaining)
        if free(start, length):
            take(start, length)

    attempts = 0
    while remaining > 0 and len(chosen) < max_spans and attempts < 200:
        attempts += 1
        length = int(min(max(1, rng.poisson(mean_span - 1) + 1), remaining))
        starts = [s for s in range(len(doc.tokens) - length + 1) if free(s, length)]
        if not starts:
            if length == 1:
                break
            continue
        take(int(starts[rng.integers(len(starts))]), length)
    return sorted(chosen)


def span_corrupt(
    doc: Document,
    spans: Sequence[tuple[int, int]],
    rng: np.random.Generator,
    image_mask_p: float = IMAGE_MASK_P,
) -> Seq2SeqExample:
    """Replace each span by a sentinel and move its text to the target.

    The sentinel takes the envelope of its span's boxes. Page regions under
    the masked words are blanked independently with ``image_mask_p``.
    """
    spans = sorted(spans)
    if len(spans) >= vocab.NUM_SENTINELS:
        raise ValueError(f"at most {vocab.NUM_SENTINELS - 1} spans fit the sentinel range")
    end = 0
    for start, length in spans:
        if length < 1 or start < 0 or start + length > len(doc.tokens):
            raise ValueError(f"span {(start, length)} does not fit a {len(doc.tokens)}-token document")
        if start < end:
            raise ValueError(f"span {(start, length)} overlaps the previous span")
        end = start + length

    source: list[Token] = []
    target: list[str] = []
    masked_boxes: list[list[float]] = []
    starts = {s: (k, n) for k, (s, n) in enumerate(spans)}
    i = 0
    while i < len(doc.tokens):
        if i in starts:
            k, n = starts[i]
            toks = doc.tokens[i : i + n]
            box = toks[0].bbox
            for t in toks[1:]:
                box = box.union(t.bbox)
            source.append(Token(vocab.sentinel_text(k), box, "sentinel"))
            target.append(f"{vocab.sentinel_text(k)} {' '.join(t.text for t in toks)} ")
            masked_boxes.extend(t.bbox.as_list() for t in toks)
            i += n
        else:
            source.append(doc.tokens[i])
            i += 1
    target.append(vocab.sentinel_text(len(spans)))

    page = doc.page
    if page.image is not None and masked_boxes:
        image, _ = mask_image_regions(page.image, np.array(masked_boxes), rng, image_mask_p)
        page = replace(page, image=image)
    return Seq2SeqExample(tuple(source), "".join(target), page, doc.id)


def uncorrupt(source: Sequence[Token], target: str) -> list[str]:
    """Word sequence recovered by putting target spans back into the source."""
    parts = vocab.SENTINEL_RE.split(target)
    # split yields [prefix, idx0, text0, idx1, text1, ...]
    fills = {int(parts[k]): parts[k + 1].split() for k in range(1, len(parts) - 1, 2)}
    words: list[str] = []
    for tok in source:
        if tok.kind == "sentinel":
            words.extend(fills[int(vocab.SENTINEL_RE.fullmatch(tok.text).group(1))])
        elif tok.kind == "word":
            words.append(tok.text)
    return words


def pretrain_example(
    doc: Document, rng: np.random.Generator, image_mask_p: float = IMAGE_MASK_P
) -> Seq2SeqExample:
    return span_corrupt(doc, choose_spans(doc, rng), rng, image_mask_p)


# ---------------------------------------------------------------------------
# case augmentation

CASE_MODES = ("identity", "lower", "upper")


def _case(text: str, mode: str) -> str:
    if mode == "identity":
        return text
    fn = str.lower if mode == "lower" else str.upper
    pieces = vocab.SENTINEL_RE.split(text)
    # odd pieces are sentinel indices and must survive untouched
    return "".join(
        fn(p) if k % 2 == 0 else vocab.sentinel_text(int(p)) for k, p in enumerate(pieces)
    )


def case_augment(example: Seq2SeqExample, mode: str) -> Seq2SeqExample:
    """Lower- or upper-case the document words and the target together."""
    if mode not in CASE_MODES:
        raise ValueError(f"case mode must be one of {CASE_MODES}, got {mode!r}")
    if mode == "identity":
        return example
    source = tuple(
        replace(t, text=_case(t.text, mode)) if t.kind == "word" else t for t in example.source
    )
    return replace(example, source=source, target=_case(example.target, mode))


def case_copies(example: Seq2SeqExample) -> list[Seq2SeqExample]:
    return [case_augment(example, m) for m in CASE_MODES]


# ---------------------------------------------------------------------------
# supervised formatting


def prompt_tokens(prompt: str, font: tuple[int, int] = PROMPT_FONT) -> list[Token]:
    """Prompt words on a reserved row just above the page (negative y)."""
    fw, fh = font
    out, x = [], 0
    for word in prompt.split():
        out.append(Token(word, BBox(x, -fh, x + len(word) * fw, 0), "prompt"))
        x += (len(word) + 1) * fw
    return out


def target_for(task: TaskInstance) -> str:
    answers = [a for a in task.answers if a.strip()]
    if task.task == "kie":
        return answers[0] if answers and answers[0] != NONE_ANSWER else NONE_ANSWER
    return answers[0] if answers else ""


def to_seq2seq(
    doc: Document, task: TaskInstance, max_src_len: int | None = None
) -> Seq2SeqExample:
    """Prompt ++ separator ++ (anchors) ++ document words -> answer string.

    Missing KIE values become ``None``. Classification pages, and pages with
    no words at all, get 16 image anchor tokens right after the separator.
    When the source is too long the document tail is dropped; the prompt is
    never cut.
    """
    if not task.prompt or not task.prompt.strip():
        raise ValueError(f"document {doc.id}: task has no prompt")
    head = prompt_tokens(task.prompt)
    x_end = head[-1].bbox.x1
    head.append(Token("", BBox(x_end, -PROMPT_FONT[1], x_end, 0), "sep"))
    body = [t for t in doc.tokens if t.kind in ("word", "image_anchor")]
    has_anchor = any(t.kind == "image_anchor" for t in body)
    if not has_anchor and (task.task == "classify" or not any(t.kind == "word" for t in body)):
        head.extend(image_anchor_tokens(doc.page, NUM_ANCHORS))

    truncated = False
    if max_src_len is not None:
        used = sum(token_length(t) for t in head)
        if used > max_src_len:
            raise ValueError(f"document {doc.id}: prompt alone needs {used} > {max_src_len} positions")
        kept = []
        for t in body:
            used += token_length(t)
            if used > max_src_len:
                truncated = True
                break
            kept.append(t)
        body = kept
    return Seq2SeqExample(tuple(head + body), target_for(task), doc.page, doc.id, truncated)


def supervised_examples(
    doc: Document, max_src_len: int | None = None, case_augmentation: bool = False
) -> list[Seq2SeqExample]:
    out = []
    for task in doc.annotations:
        ex = to_seq2seq(doc, task, max_src_len)
        out.extend(case_copies(ex) if case_augmentation else [ex])
    return out
