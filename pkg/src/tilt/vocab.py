"""Byte-level vocabulary: 256 byte ids followed by a few reserved ids."""

from __future__ import annotations

import re
from typing import Iterable

NUM_BYTES = 256
PAD = 256
BOS = 257
EOS = 258
SEP = 259
IMG = 260
SENTINEL_BASE = 261
NUM_SENTINELS = 16
VOCAB_SIZE = SENTINEL_BASE + NUM_SENTINELS

SENTINEL_RE = re.compile(r"<s(\d+)>")


def sentinel(i: int) -> int:
    if not 0 <= i < NUM_SENTINELS:
        raise ValueError(f"sentinel index {i} out of range (max {NUM_SENTINELS - 1})")
    return SENTINEL_BASE + i


def sentinel_text(i: int) -> str:
    return f"<s{i}>"


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def encode_target(text: str) -> list[int]:
    """Bytes of ``text`` with ``<sN>`` markers mapped to sentinel ids."""
    ids: list[int] = []
    pos = 0
    for m in SENTINEL_RE.finditer(text):
        ids.extend(encode_text(text[pos : m.start()]))
        ids.append(sentinel(int(m.group(1))))
        pos = m.end()
    ids.extend(encode_text(text[pos:]))
    return ids


def decode(ids: Iterable[int]) -> str:
    """Inverse of :func:`encode_target`; stops at the first EOS."""
    out: list[str] = []
    buf = bytearray()

    def flush() -> None:
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
            buf.clear()

    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i < NUM_BYTES:
            buf.append(i)
        elif i >= SENTINEL_BASE:
            flush()
            out.append(sentinel_text(i - SENTINEL_BASE))
    flush()
    return "".join(out)
