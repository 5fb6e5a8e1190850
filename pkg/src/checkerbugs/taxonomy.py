"""Six-facet checker-bug taxonomy, labeled-dataset loading, and the
few-shot rule-set store keyed by root-cause element.

The published study dataset is not redistributable, so this module also
ships a deterministic generator for a synthetic stand-in whose two-way
joint distributions (element x violation, symptom x repo, condition x
action, fix element x repo) match the published tables cell for cell.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .diffs import CodeChange, merge_changes, parse_diff

__all__ = [
    "Violation",
    "Element",
    "Symptom",
    "Action",
    "Condition",
    "FixElement",
    "TaxonomyLabel",
    "LabeledBug",
    "RuleSet",
    "FewshotSelection",
    "ParseError",
    "UnknownCategory",
    "UnknownFacet",
    "UnknownElementKey",
    "load_dataset",
    "marginals",
    "select_fewshot_examples",
    "build_ruleset",
    "change_from_diff",
    "generate_synthetic_dataset",
    "write_dataset",
    "packaged_dataset_path",
    "packaged_ruleset_path",
    "packaged_keywords_path",
]


class Violation(Enum):
    MISSING = "Missing"
    IMPROPER = "Improper"
    INSUFFICIENT = "Insufficient"
    MISLEADING = "Misleading"
    UNNECESSARY = "Unnecessary"


class Element(Enum):
    EDGE_CASES = "Edge Cases"
    TYPE_CHECKING = "Type Checking"
    NULL_VALUE = "Null Value"
    BOUNDARY_VALUE = "Boundary Value"
    DEVICE_AVAILABILITY = "Device Availability"
    ERROR_MESSAGE = "Error Message"
    DEVICE_TYPE = "Device Type"
    DEVICE_VERSION = "Device Version"
    EXECUTION_MODE = "Execution Mode"
    COMPUTATION_GRAPH = "Computation Graph"
    TENSOR_QUANTIZATION = "Tensor Quantization"
    BACKEND_TYPE = "Backend Type"
    OTHERS = "Others"


class Symptom(Enum):
    PROGRAM_CRASH = "Program Crash"
    UNEXPECTED_BEHAVIOR = "Unexpected Behavior"
    CONFUSING_ERROR_MESSAGE = "Confusing Error Message"
    PERFORMANCE_DEGRADATION = "Performance Degradation"
    NUMERICAL_ERROR = "Numerical Error"
    OTHERS = "Others"


class Action(Enum):
    ADD = "Add"
    EXTEND = "Extend"
    UPDATE = "Update"
    IMPROVE = "Improve"
    REPLACE = "Replace"
    RELOCATE = "Relocate"
    REMOVE = "Remove"


class Condition(Enum):
    IF_CHECKER = "If Checker"
    MACRO_CHECKER = "Macro Checker"
    TYPE_CHECKING_API = "Type Checking API"
    ASSERTION_STATEMENT = "Assertion Statement"
    CHECKER_API = "Checker API"
    BOOLEAN_EXPRESSION = "Boolean Expression"
    TERNARY_OPERATOR = "Ternary Operator"


class FixElement(Enum):
    TENSOR = "Tensor"
    REGULAR_OBJECT = "Regular Object"
    DEVICE = "Device"
    ERROR_MESSAGE = "Error Message"
    INTEGER_VARIABLE = "Integer Variable"
    COMPUTATION_GRAPH = "Computation Graph"
    BACKEND = "Backend"
    OTHERS = "Others"


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownCategory(ParseError):
    def __init__(self, line: int, field: str, value: str):
        super().__init__(line, f"unknown {field} category {value!r}")
        self.field = field
        self.value = value


class UnknownFacet(KeyError):
    pass


class UnknownElementKey(KeyError):
    pass


@dataclass(frozen=True)
class TaxonomyLabel:
    violation: Violation
    element: Element
    symptom: Symptom
    action: Action
    condition: Condition
    fix_element: FixElement

    def __post_init__(self) -> None:
        # The study observed Misleading only for error-message checks.
        if self.violation is Violation.MISLEADING and self.element is not Element.ERROR_MESSAGE:
            raise ValueError("Misleading violations apply only to the Error Message element")


@dataclass
class LabeledBug:
    commit_sha: str
    repo: str
    label: TaxonomyLabel
    message: str
    change: CodeChange


_FACETS = {
    "violation": (lambda b: b.label.violation, Violation),
    "element": (lambda b: b.label.element, Element),
    "symptom": (lambda b: b.label.symptom, Symptom),
    "action": (lambda b: b.label.action, Action),
    "condition": (lambda b: b.label.condition, Condition),
    "fix_element": (lambda b: b.label.fix_element, FixElement),
}

_RECORD_FIELDS = (
    "sha", "repo", "violation", "element", "symptom",
    "action", "condition", "fix_element", "message", "diff",
)


def _parse_enum(line: int, field: str, cls, value) -> Enum:
    try:
        return cls(value)
    except ValueError:
        raise UnknownCategory(line, field, str(value)) from None


def load_dataset(path: str | Path) -> list[LabeledBug]:
    """Load line-delimited labeled-bug records, validating every enum
    field. Invalid records are rejected with their line number."""
    bugs: list[LabeledBug] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
            missing = [f for f in _RECORD_FIELDS if f not in record]
            if missing:
                raise ParseError(line_no, f"missing fields: {', '.join(missing)}")
            sha = str(record["sha"])
            if sha in seen:
                raise ParseError(line_no, f"duplicate sha {sha}")
            seen.add(sha)
            try:
                label = TaxonomyLabel(
                    violation=_parse_enum(line_no, "violation", Violation, record["violation"]),
                    element=_parse_enum(line_no, "element", Element, record["element"]),
                    symptom=_parse_enum(line_no, "symptom", Symptom, record["symptom"]),
                    action=_parse_enum(line_no, "action", Action, record["action"]),
                    condition=_parse_enum(line_no, "condition", Condition, record["condition"]),
                    fix_element=_parse_enum(line_no, "fix_element", FixElement, record["fix_element"]),
                )
            except ValueError as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(line_no, str(exc)) from None
            changes = parse_diff(record["diff"])
            change = changes[0] if len(changes) == 1 else merge_changes(changes)
            bugs.append(LabeledBug(sha, str(record["repo"]), label, str(record["message"]), change))
    return bugs


def marginals(bugs: Sequence[LabeledBug], facet: str) -> dict[str, int]:
    """Count bugs per category of one facet; categories with no bugs are
    reported as zero, so counts always sum to len(bugs)."""
    try:
        getter, enum_cls = _FACETS[facet]
    except KeyError:
        raise UnknownFacet(facet) from None
    counts = {member.value: 0 for member in enum_cls}
    for bug in bugs:
        counts[getter(bug).value] += 1
    return counts


# ---------------------------------------------------------------------------
# Few-shot rule set keyed by root-cause element
# ---------------------------------------------------------------------------

@dataclass
class FewshotSelection:
    examples: list[tuple[str, CodeChange]]
    used_fallback: bool


class RuleSet:
    """Per-element example store used for type-specific few-shot prompting.

    On-disk form is one nested JSON document keyed by element name, each
    value a list of {message, diff} pairs; the optional "default" key
    holds the fallback pair used for Others / unknown elements.
    """

    def __init__(
        self,
        entries: dict[Element, list[tuple[str, CodeChange]]],
        default_examples: list[tuple[str, CodeChange]] | None = None,
    ):
        for element, examples in entries.items():
            if not examples:
                raise ValueError(f"rule set entry {element.value!r} has no examples")
        self.entries = entries
        self.default_examples = default_examples

    @classmethod
    def load(cls, path: str | Path) -> "RuleSet":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        entries: dict[Element, list[tuple[str, CodeChange]]] = {}
        default = None
        for key, pairs in doc.items():
            parsed = [(p["message"], change_from_diff(p["diff"])) for p in pairs]
            if key == "default":
                default = parsed
            else:
                entries[Element(key)] = parsed
        return cls(entries, default)

    def save(self, path: str | Path) -> None:
        doc: dict[str, list[dict]] = {}
        for element, examples in self.entries.items():
            doc[element.value] = [
                {"message": msg, "diff": _change_to_diff_text(change)}
                for msg, change in examples
            ]
        if self.default_examples is not None:
            doc["default"] = [
                {"message": msg, "diff": _change_to_diff_text(change)}
                for msg, change in self.default_examples
            ]
        Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def change_from_diff(diff_text: str) -> CodeChange:
    changes = parse_diff(diff_text)
    if not changes:
        return CodeChange("<empty>")
    return changes[0] if len(changes) == 1 else merge_changes(changes)


def _change_to_diff_text(change: CodeChange) -> str:
    old_len = len(change.removed_lines)
    new_len = len(change.added_lines)
    lines = [
        f"diff --git a/{change.file_path} b/{change.file_path}",
        f"--- a/{change.file_path}",
        f"+++ b/{change.file_path}",
        f"@@ -1,{old_len} +1,{new_len} @@",
    ]
    lines.extend("-" + l for l in change.removed_lines)
    lines.extend("+" + l for l in change.added_lines)
    return "\n".join(lines)


def build_ruleset(
    bugs: Sequence[LabeledBug],
    per_element: int | None = None,
    default_examples: list[tuple[str, CodeChange]] | None = None,
) -> RuleSet:
    """Group dataset examples by root-cause element, insertion order
    preserved. The Others category is excluded (the fallback covers it)."""
    entries: dict[Element, list[tuple[str, CodeChange]]] = {}
    for bug in bugs:
        element = bug.label.element
        if element is Element.OTHERS:
            continue
        bucket = entries.setdefault(element, [])
        if per_element is None or len(bucket) < per_element:
            bucket.append((bug.message, bug.change))
    if default_examples is None and bugs:
        default_examples = [(bugs[0].message, bugs[0].change)]
    return RuleSet(entries, default_examples)


def select_fewshot_examples(ruleset: RuleSet, element_key: Element, k: int) -> FewshotSelection:
    """Return up to k examples for the element, in insertion order.

    Others and unknown elements fall back to the configured default pair
    (flagged in the result); without a default, UnknownElementKey is
    raised.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if element_key is not Element.OTHERS and element_key in ruleset.entries:
        examples = ruleset.entries[element_key]
        return FewshotSelection(list(examples[:k]), used_fallback=False)
    if ruleset.default_examples is not None:
        return FewshotSelection(list(ruleset.default_examples[:k]), used_fallback=True)
    raise UnknownElementKey(element_key.value)


# ---------------------------------------------------------------------------
# Synthetic dataset generator
# ---------------------------------------------------------------------------
# Two-way cell counts from the published study tables. Row/column totals:
# violations 320/102/63/29/13, actions 320/65/76/27/19/7/13, repos
# pytorch=221 / tensorflow=306, grand total 527.

ELEMENT_VIOLATION_CELLS: dict[tuple[Element, Violation], int] = {}
_EV_ROWS = {
    Element.EDGE_CASES: (164, 46, 23, 0, 4),
    Element.TYPE_CHECKING: (37, 16, 9, 0, 2),
    Element.NULL_VALUE: (33, 9, 4, 0, 0),
    Element.BOUNDARY_VALUE: (22, 8, 3, 0, 0),
    Element.DEVICE_AVAILABILITY: (17, 3, 8, 0, 1),
    Element.ERROR_MESSAGE: (0, 0, 0, 29, 0),
    Element.DEVICE_TYPE: (7, 4, 3, 0, 2),
    Element.DEVICE_VERSION: (6, 7, 3, 0, 0),
    Element.EXECUTION_MODE: (7, 3, 0, 0, 2),
    Element.COMPUTATION_GRAPH: (5, 0, 4, 0, 0),
    Element.TENSOR_QUANTIZATION: (5, 1, 1, 0, 1),
    Element.BACKEND_TYPE: (5, 1, 1, 0, 0),
    Element.OTHERS: (12, 4, 4, 0, 1),
}
for _element, _row in _EV_ROWS.items():
    for _violation, _count in zip(Violation, _row):
        ELEMENT_VIOLATION_CELLS[(_element, _violation)] = _count

SYMPTOM_REPO_CELLS: dict[tuple[Symptom, str], int] = {}
_SR_ROWS = {
    Symptom.PROGRAM_CRASH: (199, 77),
    Symptom.UNEXPECTED_BEHAVIOR: (62, 88),
    Symptom.CONFUSING_ERROR_MESSAGE: (19, 13),
    Symptom.PERFORMANCE_DEGRADATION: (5, 16),
    Symptom.NUMERICAL_ERROR: (9, 2),
    Symptom.OTHERS: (12, 25),
}
for _symptom, (_tf, _pt) in _SR_ROWS.items():
    SYMPTOM_REPO_CELLS[(_symptom, "tensorflow")] = _tf
    SYMPTOM_REPO_CELLS[(_symptom, "pytorch")] = _pt

CONDITION_ACTION_CELLS: dict[tuple[Condition, Action], int] = {}
_CA_ROWS = {
    Condition.IF_CHECKER: (171, 49, 43, 8, 3, 4, 6),
    Condition.MACRO_CHECKER: (126, 6, 20, 14, 11, 2, 7),
    Condition.TYPE_CHECKING_API: (12, 3, 9, 0, 3, 0, 0),
    Condition.ASSERTION_STATEMENT: (8, 1, 1, 5, 1, 1, 0),
    Condition.CHECKER_API: (2, 1, 2, 0, 1, 0, 0),
    Condition.BOOLEAN_EXPRESSION: (0, 3, 1, 0, 0, 0, 0),
    Condition.TERNARY_OPERATOR: (1, 2, 0, 0, 0, 0, 0),
}
for _condition, _row in _CA_ROWS.items():
    for _action, _count in zip(Action, _row):
        CONDITION_ACTION_CELLS[(_condition, _action)] = _count

FIX_ELEMENT_REPO_CELLS: dict[tuple[FixElement, str], int] = {}
_FR_ROWS = {
    FixElement.TENSOR: (73, 184),
    FixElement.REGULAR_OBJECT: (38, 47),
    FixElement.DEVICE: (52, 12),
    FixElement.ERROR_MESSAGE: (13, 16),
    FixElement.INTEGER_VARIABLE: (4, 18),
    FixElement.COMPUTATION_GRAPH: (7, 2),
    FixElement.BACKEND: (6, 1),
    FixElement.OTHERS: (28, 26),
}
for _fix, (_pt, _tf) in _FR_ROWS.items():
    FIX_ELEMENT_REPO_CELLS[(_fix, "pytorch")] = _pt
    FIX_ELEMENT_REPO_CELLS[(_fix, "tensorflow")] = _tf

REPO_SIZES = {"pytorch": 221, "tensorflow": 306}
DATASET_SIZE = 527
DEFAULT_DATASET_SEED = 527_2024

_VIOLATION_ADJ = {
    Violation.MISSING: "missing",
    Violation.IMPROPER: "improper",
    Violation.INSUFFICIENT: "insufficient",
    Violation.MISLEADING: "misleading",
    Violation.UNNECESSARY: "redundant",
}
_CONDITION_TEXT = {
    Condition.IF_CHECKER: "if check",
    Condition.MACRO_CHECKER: "macro check",
    Condition.TYPE_CHECKING_API: "dtype check API call",
    Condition.ASSERTION_STATEMENT: "assertion",
    Condition.CHECKER_API: "checker API call",
    Condition.BOOLEAN_EXPRESSION: "boolean guard",
    Condition.TERNARY_OPERATOR: "ternary guard",
}
_ELEMENT_TEXT = {
    Element.EDGE_CASES: "empty and scalar tensor edge cases",
    Element.TYPE_CHECKING: "tensor dtype validation",
    Element.NULL_VALUE: "null input handling",
    Element.BOUNDARY_VALUE: "axis bound validation",
    Element.DEVICE_AVAILABILITY: "device availability probing",
    Element.ERROR_MESSAGE: "the raised error message",
    Element.DEVICE_TYPE: "device type dispatch",
    Element.DEVICE_VERSION: "driver version gating",
    Element.EXECUTION_MODE: "eager versus graph execution",
    Element.COMPUTATION_GRAPH: "graph node compatibility",
    Element.TENSOR_QUANTIZATION: "quantized tensor handling",
    Element.BACKEND_TYPE: "backend type verification",
    Element.OTHERS: "operator input validation",
}
_SYMPTOM_SUFFIX = {
    Symptom.PROGRAM_CRASH: " to avoid a segfault",
    Symptom.UNEXPECTED_BEHAVIOR: " to fix wrong results",
    Symptom.CONFUSING_ERROR_MESSAGE: " and clarify the raised error",
    Symptom.PERFORMANCE_DEGRADATION: " to avoid a slow fallback path",
    Symptom.NUMERICAL_ERROR: " to prevent integer overflow",
    Symptom.OTHERS: "",
}
_APIS = (
    "conv2d", "reshape", "matmul", "gather", "scatter", "slice", "pad",
    "softmax", "pooling", "embedding", "einsum", "topk", "concat", "split",
)


def _check_line(repo: str, condition: Condition, api: str) -> str:
    if condition is Condition.MACRO_CHECKER:
        if repo == "pytorch":
            return f'TORCH_CHECK(axis < self.dim(), "{api}: axis out of range");'
        return f'OP_REQUIRES(ctx, axis < input.dims(), errors::InvalidArgument("{api}: axis out of range"));'
    if condition is Condition.ASSERTION_STATEMENT:
        return f"assert(axis < rank && \"{api}: axis out of range\");"
    if condition is Condition.TYPE_CHECKING_API:
        return f"if (!input.dtype().is_floating_point()) return TypeError(\"{api}\");"
    if condition is Condition.CHECKER_API:
        return f"if (!IsCompatibleWith(node, {api}_scope)) return false;"
    if condition is Condition.BOOLEAN_EXPRESSION:
        return "valid = valid && axis < rank;"
    if condition is Condition.TERNARY_OPERATOR:
        return f"return axis < rank ? Run{api.capitalize()}() : Status::InvalidAxis;"
    return f'if (axis >= rank) {{ return InvalidArgument("{api}: axis out of range"); }}'


def _record_diff(repo: str, label: TaxonomyLabel, api: str, index: int) -> str:
    tree = "aten/src/ATen/native" if repo == "pytorch" else "tensorflow/core/kernels"
    path = f"{tree}/{api}_op_{index % 7}.cc"
    check = _check_line(repo, label.condition, api)
    context_open = f"Status Run{api.capitalize()}(OpContext* ctx) {{"
    context_close = "  // dispatch to the kernel"
    if label.action is Action.ADD:
        removed: list[str] = []
        added = ["  " + check]
    elif label.action is Action.REMOVE:
        removed = ["  " + check]
        added = []
    else:
        removed = ["  " + check.replace("axis <", "axis <=")]
        added = ["  " + check]
    old_len = 2 + len(removed)
    new_len = 2 + len(added)
    lines = [
        f"diff --git a/{path} b/{path}",
        f"--- a/{path}",
        f"+++ b/{path}",
        f"@@ -40,{old_len} +40,{new_len} @@",
        " " + context_open,
    ]
    lines.extend("-" + l for l in removed)
    lines.extend("+" + l for l in added)
    lines.append(" " + context_close)
    return "\n".join(lines)


def _record_message(repo: str, label: TaxonomyLabel, api: str) -> str:
    return (
        f"{label.action.value} {_VIOLATION_ADJ[label.violation]} "
        f"{_CONDITION_TEXT[label.condition]} for {_ELEMENT_TEXT[label.element]} "
        f"in {api}{_SYMPTOM_SUFFIX[label.symptom]}"
    )


def generate_synthetic_dataset(seed: int = DEFAULT_DATASET_SEED) -> list[dict]:
    """Generate the 527 synthetic records whose two-way joints reproduce
    the published tables exactly. Deterministic for a fixed seed."""
    rng = random.Random(seed)

    ev_pairs = [pair for pair, count in ELEMENT_VIOLATION_CELLS.items() for _ in range(count)]
    ca_pairs = [pair for pair, count in CONDITION_ACTION_CELLS.items() for _ in range(count)]
    rng.shuffle(ev_pairs)
    rng.shuffle(ca_pairs)

    per_repo: dict[str, list[tuple[Symptom, FixElement]]] = {}
    for repo in REPO_SIZES:
        symptoms = [s for (s, r), count in SYMPTOM_REPO_CELLS.items() if r == repo for _ in range(count)]
        fixes = [f for (f, r), count in FIX_ELEMENT_REPO_CELLS.items() if r == repo for _ in range(count)]
        rng.shuffle(symptoms)
        rng.shuffle(fixes)
        per_repo[repo] = list(zip(symptoms, fixes))

    rows: list[tuple[str, Symptom, FixElement]] = [
        (repo, symptom, fix)
        for repo in ("pytorch", "tensorflow")
        for symptom, fix in per_repo[repo]
    ]
    rng.shuffle(rows)

    records = []
    for i, ((repo, symptom, fix), (element, violation), (condition, action)) in enumerate(
        zip(rows, ev_pairs, ca_pairs)
    ):
        label = TaxonomyLabel(violation, element, symptom, action, condition, fix)
        api = rng.choice(_APIS)
        sha = hashlib.sha1(f"synthetic checker bug {i:04d}".encode()).hexdigest()
        records.append(
            {
                "sha": sha,
                "repo": repo,
                "violation": violation.value,
                "element": element.value,
                "symptom": symptom.value,
                "action": action.value,
                "condition": condition.value,
                "fix_element": fix.value,
                "message": _record_message(repo, label, api),
                "diff": _record_diff(repo, label, api, i),
            }
        )
    assert len(records) == DATASET_SIZE
    return records


def write_dataset(records: Iterable[dict], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count


_DATA_DIR = Path(__file__).parent / "data"


def packaged_dataset_path() -> Path:
    return _DATA_DIR / "synthetic_checker_bugs.jsonl"


def packaged_ruleset_path() -> Path:
    return _DATA_DIR / "default_ruleset.json"


def packaged_keywords_path() -> Path:
    return _DATA_DIR / "seed_keywords.txt"
