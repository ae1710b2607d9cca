"""Object-hallucination rates over caption records and the standard binary
classification scores. Labels compare by exact string equality."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple

__all__ = [
    "BinaryMetrics",
    "BinaryOutcomes",
    "CaptionRecord",
    "binary_metrics",
    "chair_scores",
    "load_caption_records",
]


@dataclass(frozen=True)
class CaptionRecord:
    mentioned: frozenset[str]
    ground_truth: frozenset[str]

    @classmethod
    def from_json_dict(cls, d: dict) -> "CaptionRecord":
        return cls(
            mentioned=frozenset(str(x) for x in d["mentioned"]),
            ground_truth=frozenset(str(x) for x in d["ground_truth"]),
        )

    @property
    def hallucinated(self) -> frozenset[str]:
        return self.mentioned - self.ground_truth


def chair_scores(records: Iterable[CaptionRecord]) -> tuple[float, float]:
    """(sentence rate, instance rate): the fraction of records mentioning any
    object missing from their ground truth, and the fraction of all mentions
    that are such objects."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    total_mentioned = sum(len(r.mentioned) for r in records)
    if total_mentioned == 0:
        raise ValueError("instance rate undefined: no objects mentioned")
    total_hallucinated = sum(len(r.hallucinated) for r in records)
    bad_records = sum(1 for r in records if r.hallucinated)
    return bad_records / len(records), total_hallucinated / total_mentioned


@dataclass(frozen=True)
class BinaryOutcomes:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("counts must be non-negative")


class BinaryMetrics(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float


def binary_metrics(outcomes: BinaryOutcomes) -> BinaryMetrics:
    """Accuracy, precision, recall, F1; degenerate denominators score 0."""
    total = outcomes.tp + outcomes.fp + outcomes.fn + outcomes.tn
    if total == 0:
        raise ValueError("no outcomes")
    accuracy = (outcomes.tp + outcomes.tn) / total
    precision = outcomes.tp / (outcomes.tp + outcomes.fp) if outcomes.tp + outcomes.fp else 0.0
    recall = outcomes.tp / (outcomes.tp + outcomes.fn) if outcomes.tp + outcomes.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return BinaryMetrics(accuracy, precision, recall, f1)


def load_caption_records(path) -> list[CaptionRecord]:
    """One JSON object per line: {"mentioned": [...], "ground_truth": [...]}."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(CaptionRecord.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad record ({exc})") from exc
    return records
