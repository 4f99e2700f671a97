"""RougeL scoring and the append-only metrics CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

METRICS_HEADER = ("step", "split", "loss", "lr", "grad_norm", "tokens_per_sec", "elapsed_s")


def lcs_length(a, b) -> int:
    """Longest common subsequence length, O(len(a) * len(b)) time, O(len(b)) memory."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """LCS-based F1 between two token (or word) sequences; 0 if either is empty."""
    candidate, reference = list(candidate), list(reference)
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


def mean_rouge_l(candidates, references) -> float:
    scores = [rouge_l(c, r) for c, r in zip(candidates, references, strict=True)]
    return sum(scores) / len(scores) if scores else 0.0


@dataclass
class MetricsRow:
    step: int
    split: str  # train | heldout | diverged
    loss: float
    lr: float = math.nan
    grad_norm: float = math.nan
    tokens_per_sec: float = math.nan
    elapsed_s: float = math.nan

    def as_list(self) -> list[str]:
        return [str(self.step), self.split] + [
            repr(float(v)) for v in (self.loss, self.lr, self.grad_norm, self.tokens_per_sec, self.elapsed_s)
        ]


class MetricsWriter:
    """Appends rows to ``metrics.csv``, writing the header once."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def write(self, row: MetricsRow) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(row.as_list())


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["step"] = int(row["step"])
        for key in METRICS_HEADER[2:]:
            row[key] = float(row[key])
    return rows
