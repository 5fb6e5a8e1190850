"""Measurement protocol: detection precision/recall/F1 averaged over
repeated runs, plus patch assessment with a three-tier match classifier
and a manual-review export.

"Semantically equivalent" is a human judgment; only the two mechanizable
tiers (byte equality, comment/whitespace-normalized equality) are
automated, everything else lands in the review queue. Undefined ratios
are reported as absent, never as zero.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

__all__ = [
    "Confusion",
    "DetectionMetrics",
    "MetricsReport",
    "MatchVerdict",
    "PatchAssessment",
    "RepairAccuracy",
    "GroundTruth",
    "EvalItem",
    "LengthMismatch",
    "UnknownOverrideSha",
    "compute_metrics",
    "f1_score",
    "average_runs",
    "round_display",
    "normalize_patch",
    "assess_patch",
    "repair_accuracy",
    "export_review_queue",
    "read_overrides",
    "load_eval_dataset",
    "write_eval_dataset",
]


class LengthMismatch(ValueError):
    pass


class UnknownOverrideSha(KeyError):
    pass


class GroundTruth(Enum):
    BUGGY = "Buggy"
    CLEAN = "Clean"


@dataclass
class EvalItem:
    sha: str
    ground_truth: GroundTruth
    ground_truth_patch: str | None = None


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class DetectionMetrics:
    """Percentages; None means the ratio is undefined for this run."""

    precision: float | None
    recall: float | None
    f1: float | None
    confusion: Confusion


def f1_score(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def compute_metrics(predictions: Sequence[bool], labels: Sequence[bool]) -> DetectionMetrics:
    """Precision/recall/F1 as percentages from paired boolean predictions
    (True = flagged buggy) and labels (True = actually buggy)."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not predictions:
        raise LengthMismatch("empty prediction list")
    tp = fp = tn = fn = 0
    for predicted, actual in zip(predictions, labels):
        if predicted and actual:
            tp += 1
        elif predicted and not actual:
            fp += 1
        elif not predicted and actual:
            fn += 1
        else:
            tn += 1
    precision = 100.0 * tp / (tp + fp) if tp + fp > 0 else None
    recall = 100.0 * tp / (tp + fn) if tp + fn > 0 else None
    return DetectionMetrics(precision, recall, f1_score(precision, recall), Confusion(tp, fp, tn, fn))


def _mean(values: Iterable[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return sum(present) / len(present)


def average_runs(
    runs: Sequence[DetectionMetrics | tuple[float | None, float | None, float | None]],
) -> tuple[float | None, float | None, float | None]:
    """Arithmetic mean of per-run (precision, recall, f1). Full precision
    is retained; displays go through round_display."""
    if not runs:
        raise ValueError("need at least one run")
    triples = [
        (r.precision, r.recall, r.f1) if isinstance(r, DetectionMetrics) else r for r in runs
    ]
    return (
        _mean(t[0] for t in triples),
        _mean(t[1] for t in triples),
        _mean(t[2] for t in triples),
    )


def round_display(value: float | None, places: int = 2) -> str:
    """Half-up rounding for display; raw values stay in the report."""
    if value is None:
        return "-"
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass
class MetricsReport:
    label: str
    strategy: str
    per_run: list[DetectionMetrics]
    class_counts: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def averages(self) -> tuple[float | None, float | None, float | None]:
        return average_runs(self.per_run)

    def to_document(self) -> dict:
        precision, recall, f1 = self.averages
        return {
            "schema": 1,
            "label": self.label,
            "strategy": self.strategy,
            "runs": [
                {
                    "confusion": {
                        "tp": m.confusion.tp,
                        "fp": m.confusion.fp,
                        "tn": m.confusion.tn,
                        "fn": m.confusion.fn,
                    },
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                }
                for m in self.per_run
            ],
            "averages": {"precision": precision, "recall": recall, "f1": f1},
            "class_counts": self.class_counts,
            "config": self.config,
        }

    @classmethod
    def from_document(cls, doc: Mapping) -> "MetricsReport":
        runs = [
            DetectionMetrics(
                run.get("precision"),
                run.get("recall"),
                run.get("f1"),
                Confusion(**run["confusion"]),
            )
            for run in doc["runs"]
        ]
        return cls(
            label=doc["label"],
            strategy=doc["strategy"],
            per_run=runs,
            class_counts=dict(doc.get("class_counts", {})),
            config=dict(doc.get("config", {})),
        )


# ---------------------------------------------------------------------------
# Patch assessment
# ---------------------------------------------------------------------------

class MatchVerdict(Enum):
    EXACT_MATCH = "exact_match"
    NORMALIZED_MATCH = "normalized_match"
    NEEDS_REVIEW = "needs_review"


@dataclass
class PatchAssessment:
    verdict: MatchVerdict
    candidate: str
    ground_truth: str
    sha: str = ""


_BLOCK_COMMENT_RE = re.compile(r"/\*.*?\*/", re.DOTALL)


def normalize_patch(text: str) -> str:
    """Strip //, /* */ and whole-line # comments, collapse whitespace,
    drop blank lines. Idempotent by construction."""
    text = _BLOCK_COMMENT_RE.sub(" ", text)
    lines = []
    for line in text.splitlines():
        line = line.split("//", 1)[0]
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        lines.append(" ".join(line.split()))
    return "\n".join(lines)


def assess_patch(candidate: str, ground_truth: str, sha: str = "") -> PatchAssessment:
    """Three tiers: byte equality, equality after comment/whitespace
    normalization, otherwise NeedsReview for the human queue."""
    if candidate == ground_truth:
        verdict = MatchVerdict.EXACT_MATCH
    elif normalize_patch(candidate) == normalize_patch(ground_truth):
        verdict = MatchVerdict.NORMALIZED_MATCH
    else:
        verdict = MatchVerdict.NEEDS_REVIEW
    return PatchAssessment(verdict, candidate, ground_truth, sha)


@dataclass
class RepairAccuracy:
    generated: int
    correct: int
    accuracy: float | None  # percentage; None when nothing was generated


def repair_accuracy(
    assessments: Sequence[PatchAssessment],
    manual_overrides: Mapping[str, bool] | None = None,
) -> RepairAccuracy:
    """Correct = exact + normalized matches + NeedsReview items a human
    marked true; NeedsReview defaults to incorrect."""
    overrides = dict(manual_overrides or {})
    known = {a.sha for a in assessments}
    for sha in overrides:
        if sha not in known:
            raise UnknownOverrideSha(sha)
    generated = len(assessments)
    correct = 0
    for assessment in assessments:
        if assessment.verdict in (MatchVerdict.EXACT_MATCH, MatchVerdict.NORMALIZED_MATCH):
            correct += 1
        elif overrides.get(assessment.sha) is True:
            correct += 1
    accuracy = 100.0 * correct / generated if generated > 0 else None
    return RepairAccuracy(generated, correct, accuracy)


def export_review_queue(assessments: Sequence[PatchAssessment], path: str | Path) -> int:
    """Write NeedsReview items side by side for human verdict entry;
    returns the exported count. Re-import via read_overrides."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for assessment in assessments:
            if assessment.verdict is not MatchVerdict.NEEDS_REVIEW:
                continue
            fh.write(
                json.dumps(
                    {
                        "sha": assessment.sha,
                        "candidate": assessment.candidate,
                        "ground_truth": assessment.ground_truth,
                        "verdict_slot": None,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            count += 1
    return count


def read_overrides(path: str | Path) -> dict[str, bool]:
    """Read human verdicts: line-delimited {sha, correct} records (also
    accepts a filled-in review queue whose verdict_slot was set)."""
    overrides: dict[str, bool] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            value = record.get("correct", record.get("verdict_slot"))
            if value is None:
                continue
            overrides[record["sha"]] = bool(value)
    return overrides


# ---------------------------------------------------------------------------
# Evaluation dataset
# ---------------------------------------------------------------------------

def load_eval_dataset(path: str | Path) -> list[EvalItem]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            try:
                truth = GroundTruth(record["ground_truth"])
            except (KeyError, ValueError):
                raise ValueError(
                    f"line {line_no}: ground_truth must be one of "
                    f"{[g.value for g in GroundTruth]}"
                ) from None
            items.append(EvalItem(record["sha"], truth, record.get("ground_truth_patch")))
    return items


def write_eval_dataset(items: Iterable[EvalItem], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(
                json.dumps(
                    {
                        "sha": item.sha,
                        "ground_truth": item.ground_truth.value,
                        "ground_truth_patch": item.ground_truth_patch,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            count += 1
    return count
