"""Evaluation metrics and the run report.

BLEU@4 follows the classic recipe: clipped n-gram precisions for n = 1..4,
geometric mean, and a brevity penalty of ``exp(1 - r/c)`` when the
hypothesis is shorter than the reference. No smoothing: any zero n-gram
precision zeroes the score.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MilfuseError


class EmptyReferenceError(MilfuseError):
    """BLEU requires at least one reference."""


def _ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu4(hypothesis, references) -> float:
    """Sentence BLEU with 1..4-gram precisions over token-id sequences."""
    refs = [list(r) for r in references]
    if not refs:
        raise EmptyReferenceError("need at least one reference")
    hyp = list(hypothesis)
    c = len(hyp)
    if c == 0:
        return 0.0

    log_sum = 0.0
    for n in range(1, 5):
        counts = Counter(_ngrams(hyp, n))
        total = sum(counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        max_ref = Counter()
        for ref in refs:
            for gram, k in Counter(_ngrams(ref, n)).items():
                max_ref[gram] = max(max_ref[gram], k)
        for gram, k in counts.items():
            clipped += min(k, max_ref[gram])
        if clipped == 0:
            return 0.0
        log_sum += 0.25 * math.log(clipped / total)

    r = min((len(ref) for ref in refs), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def accuracy(predictions, labels) -> float:
    pairs = list(zip(predictions, labels))
    if not pairs:
        raise ValueError("accuracy of an empty set")
    return sum(int(p == y) for p, y in pairs) / len(pairs)


CSV_COLUMNS = ["epoch", "split", "loss_c", "loss_g", "loss_overall",
               "accuracy", "bleu4", "wall_s"]


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss_c: float | None = None
    loss_g: float | None = None
    loss_overall: float | None = None
    accuracy: float | None = None
    bleu4: float | None = None
    wall_s: float | None = None

    def as_csv(self):
        vals = [self.epoch, self.split, self.loss_c, self.loss_g,
                self.loss_overall, self.accuracy, self.bleu4, self.wall_s]
        return ["" if v is None else v for v in vals]


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def add(self, row: MetricsRow):
        self.rows.append(row)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow(row.as_csv())

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.final, indent=2, sort_keys=True),
                        encoding="utf-8")
