import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from checkerbugs.evaluation import (
    Confusion,
    DetectionMetrics,
    EvalItem,
    GroundTruth,
    LengthMismatch,
    MatchVerdict,
    MetricsReport,
    PatchAssessment,
    UnknownOverrideSha,
    assess_patch,
    average_runs,
    compute_metrics,
    export_review_queue,
    f1_score,
    load_eval_dataset,
    normalize_patch,
    read_overrides,
    repair_accuracy,
    round_display,
    write_eval_dataset,
)

# The two failed-check listings from the study's repair discussion.
OVERFLOW_CANDIDATE = "if (static_cast<size_t>(bytes_to_write) <= AvailableInputSpace()) {"
OVERFLOW_GROUND_TRUTH = "if (bytes_to_write <= static_cast<size_t>(AvailableInputSpace())) {"


def _preds_labels(tp: int, fp: int, tn: int, fn: int):
    predictions = [True] * tp + [True] * fp + [False] * tn + [False] * fn
    labels = [True] * tp + [False] * fp + [False] * tn + [True] * fn
    return predictions, labels


def test_metrics_basic_arithmetic():
    predictions, labels = _preds_labels(tp=3, fp=1, tn=5, fn=1)
    metrics = compute_metrics(predictions, labels)
    assert metrics.precision == pytest.approx(75.0)
    assert metrics.recall == pytest.approx(75.0)
    assert metrics.f1 == pytest.approx(75.0)
    assert metrics.confusion == Confusion(tp=3, fp=1, tn=5, fn=1)


def test_f1_from_published_zero_shot_row():
    # Zero-Shot PyTorch row: P=66.47, R=79.34 -> F1 72.33
    assert f1_score(66.47, 79.34) == pytest.approx(72.33, abs=0.01)


def test_undefined_ratios_are_absent_not_zero():
    metrics = compute_metrics([False, False], [False, False])
    assert metrics.precision is None
    assert metrics.recall is None
    assert metrics.f1 is None


def test_length_mismatch_rejected():
    with pytest.raises(LengthMismatch):
        compute_metrics([True], [True, False])
    with pytest.raises(LengthMismatch):
        compute_metrics([], [])


def test_metrics_permutation_invariant():
    import random

    predictions, labels = _preds_labels(tp=5, fp=3, tn=7, fn=2)
    paired = list(zip(predictions, labels))
    base = compute_metrics(predictions, labels)
    rng = random.Random(11)
    for _ in range(5):
        rng.shuffle(paired)
        shuffled = compute_metrics([p for p, _ in paired], [l for _, l in paired])
        assert shuffled == base


@given(
    st.integers(min_value=0, max_value=40),
    st.integers(min_value=0, max_value=40),
    st.integers(min_value=0, max_value=40),
    st.integers(min_value=0, max_value=40),
)
@settings(max_examples=200, deadline=None)
def test_f1_between_min_and_max_of_p_and_r(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    predictions, labels = _preds_labels(tp, fp, tn, fn)
    metrics = compute_metrics(predictions, labels)
    if metrics.precision is None or metrics.recall is None or metrics.f1 is None:
        return
    low = min(metrics.precision, metrics.recall) - 1e-9
    high = max(metrics.precision, metrics.recall) + 1e-9
    assert low <= metrics.f1 <= high


def test_average_runs_published_cot_row():
    # CoT "Average" row: mean precision of {50.75, 30.05} prints 40.4
    mean = average_runs([(50.75, 100.0, 67.33), (30.05, 89.03, 44.93)])
    assert mean[0] == pytest.approx(40.40, abs=1e-9)
    assert mean[1] == pytest.approx(94.515, abs=1e-9)
    assert round_display(mean[0]) == "40.40"
    assert round_display(mean[1]) in ("94.51", "94.52")


def test_average_runs_identical_reports():
    runs = [DetectionMetrics(60.0, 70.0, 64.62, Confusion(6, 4, 5, 3))] * 5
    assert average_runs(runs) == (60.0, 70.0, 64.62)


def test_average_skips_absent_values():
    mean = average_runs([(None, 50.0, None), (80.0, 70.0, 74.67)])
    assert mean[0] == pytest.approx(80.0)
    assert mean[1] == pytest.approx(60.0)


def test_round_display_is_half_up():
    assert round_display(94.515) == "94.52"
    assert round_display(40.4) == "40.40"
    assert round_display(9.375, 1) == "9.4"
    assert round_display(None) == "-"


# -- patch assessment ---------------------------------------------------------

def test_identical_patches_exact_match():
    assessment = assess_patch(OVERFLOW_GROUND_TRUTH, OVERFLOW_GROUND_TRUTH)
    assert assessment.verdict is MatchVerdict.EXACT_MATCH


def test_added_comment_is_normalized_match():
    truth = "if (!element_type.isInteger()) { return false;}"
    candidate = truth + "\n// bounds check"
    assert assess_patch(candidate, truth).verdict is MatchVerdict.NORMALIZED_MATCH


def test_overflow_example_needs_review():
    # Same tokens, different cast target: must not be auto-accepted.
    assessment = assess_patch(OVERFLOW_CANDIDATE, OVERFLOW_GROUND_TRUTH)
    assert assessment.verdict is MatchVerdict.NEEDS_REVIEW


def test_whitespace_and_comment_styles_normalize():
    truth = "x = x + 1\nreturn x"
    candidate = "/* adjust */\nx   =  x + 1\n# python note\nreturn x  // tail"
    assert assess_patch(candidate, truth).verdict is MatchVerdict.NORMALIZED_MATCH


@given(st.text(max_size=300))
@settings(max_examples=200, deadline=None)
def test_normalization_is_idempotent(text):
    once = normalize_patch(text)
    assert normalize_patch(once) == once


# -- repair accuracy ----------------------------------------------------------

def _assessments(generated: int, correct: int):
    out = []
    for i in range(generated):
        verdict = MatchVerdict.EXACT_MATCH if i < correct else MatchVerdict.NEEDS_REVIEW
        out.append(PatchAssessment(verdict, "c", "g", sha=f"s{i}"))
    return out


def test_repair_accuracy_published_rows():
    ninety = repair_accuracy(_assessments(90, 10))
    assert ninety.accuracy == pytest.approx(11.1, abs=0.05)
    thirty_two = repair_accuracy(_assessments(32, 3))
    assert thirty_two.accuracy == pytest.approx(9.375, abs=1e-9)
    assert round_display(thirty_two.accuracy, 1) == "9.4"  # study prints 9.3


def test_zero_generated_accuracy_absent():
    result = repair_accuracy([])
    assert result.generated == 0
    assert result.accuracy is None


def test_needs_review_requires_explicit_override():
    assessments = _assessments(4, 1)
    base = repair_accuracy(assessments)
    assert base.correct == 1
    with_override = repair_accuracy(assessments, {"s2": True, "s3": False})
    assert with_override.correct == 2


def test_override_for_unknown_sha_rejected():
    with pytest.raises(UnknownOverrideSha):
        repair_accuracy(_assessments(2, 1), {"nope": True})


def test_override_true_on_matched_item_not_double_counted():
    assessments = _assessments(3, 2)
    result = repair_accuracy(assessments, {"s0": True})
    assert result.correct == 2


# -- review queue -------------------------------------------------------------

def test_review_queue_exports_only_needs_review(tmp_path):
    assessments = _assessments(12, 7)  # 5 NeedsReview
    path = tmp_path / "queue.jsonl"
    assert export_review_queue(assessments, path) == 5
    lines = path.read_text().splitlines()
    assert len(lines) == 5


def test_review_queue_empty_input(tmp_path):
    path = tmp_path / "queue.jsonl"
    assert export_review_queue([], path) == 0


def test_override_round_trip_via_filled_queue(tmp_path):
    assessments = _assessments(3, 1)
    path = tmp_path / "queue.jsonl"
    export_review_queue(assessments, path)
    import json

    filled = []
    for line in path.read_text().splitlines():
        record = json.loads(line)
        record["verdict_slot"] = record["sha"] == "s1"
        filled.append(json.dumps(record))
    path.write_text("\n".join(filled) + "\n")
    overrides = read_overrides(path)
    assert overrides == {"s1": True, "s2": False}
    assert repair_accuracy(assessments, overrides).correct == 2


# -- metrics report document ----------------------------------------------------

def test_metrics_report_document_round_trip():
    report = MetricsReport(
        label="pytorch",
        strategy="cot",
        per_run=[
            compute_metrics(*_preds_labels(3, 1, 5, 1)),
            compute_metrics(*_preds_labels(4, 2, 4, 0)),
        ],
        class_counts={"buggy": 4, "clean": 6},
        config={"backend": "scripted", "temperature": 0.0, "seed": 42},
    )
    doc = report.to_document()
    loaded = MetricsReport.from_document(doc)
    assert loaded.averages == report.averages
    assert loaded.per_run == report.per_run
    assert doc["config"]["temperature"] == 0.0


def test_eval_dataset_round_trip(tmp_path):
    items = [
        EvalItem("a1", GroundTruth.BUGGY, "fixed code"),
        EvalItem("a2", GroundTruth.CLEAN, None),
    ]
    path = tmp_path / "dataset.jsonl"
    assert write_eval_dataset(items, path) == 2
    loaded = load_eval_dataset(path)
    assert loaded == items
    path.write_text('{"sha": "x", "ground_truth": "Odd"}\n')
    with pytest.raises(ValueError):
        load_eval_dataset(path)
