"""Evaluation metrics: ANLS, entity F1 and exact-match accuracy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

ANLS_THRESHOLD = 0.5
NONE_ANSWER = "none"


def normalize(s: str) -> str:
    """Trim, collapse internal whitespace, lowercase."""
    return " ".join(s.split()).lower()


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(pred: str, golds: Sequence[str], tau: float = ANLS_THRESHOLD) -> float:
    """Best thresholded normalised Levenshtein similarity against any gold."""
    if not golds:
        raise ValueError("anls needs at least one gold answer")
    p = normalize(pred)
    best = 0.0
    for gold in golds:
        g = normalize(gold)
        longest = max(len(p), len(g))
        nl = levenshtein(p, g) / longest if longest else 0.0
        if nl <= tau:
            best = max(best, 1.0 - nl)
    return best


@dataclass
class F1Report:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def entity_f1(
    preds: Sequence[Mapping[str, str | None]], golds: Sequence[Mapping[str, str | None]]
) -> F1Report:
    """Micro F1 over (document, field) pairs.

    A missing or ``None`` prediction is an abstention: it can only cost
    recall. Gold ``None`` means the field is absent from the document.
    """
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} documents")
    tp = fp = fn = 0
    for pred, gold in zip(preds, golds):
        for key in set(pred) | set(gold):
            p = pred.get(key)
            g = gold.get(key)
            p = None if p is None or normalize(p) == NONE_ANSWER else normalize(p)
            g = None if g is None or normalize(g) == NONE_ANSWER else normalize(g)
            if p is not None and g is not None and p == g:
                tp += 1
                continue
            if p is not None:
                fp += 1
            if g is not None:
                fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Report(precision, recall, f1, tp, fp, fn)


def exact_match_accuracy(preds: Sequence[str], golds: Sequence[str | Sequence[str]]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} golds")
    if not preds:
        return 0.0
    return sum(exact_match(p, g) for p, g in zip(preds, golds)) / len(preds)


def exact_match(pred: str, gold: str | Sequence[str]) -> float:
    golds = [gold] if isinstance(gold, str) else list(gold)
    return float(any(normalize(pred) == normalize(g) for g in golds))


@dataclass
class EvalReport:
    metric: str
    value: float
    records: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        return cls(d["metric"], float(d["value"]), list(d.get("records", [])))


METRICS = ("anls", "f1", "accuracy")


def aggregate(metric: str, records: Sequence[dict]) -> float:
    """Dataset score from per-example records (``pred``, ``golds``, ``doc``, ``field``)."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    if not records:
        return 0.0
    if metric == "anls":
        return sum(anls(r["pred"], r["golds"]) for r in records) / len(records)
    if metric == "accuracy":
        return exact_match_accuracy([r["pred"] for r in records], [r["golds"] for r in records])
    by_doc_pred: dict[str, dict[str, str]] = {}
    by_doc_gold: dict[str, dict[str, str | None]] = {}
    for r in records:
        by_doc_pred.setdefault(r["doc"], {})[r["field"]] = r["pred"]
        by_doc_gold.setdefault(r["doc"], {})[r["field"]] = r["golds"][0] if r["golds"] else None
    docs = sorted(by_doc_gold)
    return entity_f1([by_doc_pred[d] for d in docs], [by_doc_gold[d] for d in docs]).f1


def build_report(metric: str, records: Sequence[dict]) -> EvalReport:
    return EvalReport(metric, aggregate(metric, records), list(records))
