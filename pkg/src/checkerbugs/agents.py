"""Three-agent workflow: detection (three prompting strategies), root
cause analysis, and retrieval-augmented patch generation.

Prompt rendering is pure and byte-stable; golden-file tests pin every
template. Each agent call is a single-turn user message through the
gateway, tagged so the transcript identifies the agent.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .diffs import CodeChange, merge_changes, render_change
from .gateway import ChatResponse, Gateway, user_request
from .mining import Commit
from .ragstore import VectorStore
from .taxonomy import Element, RuleSet, select_fewshot_examples

__all__ = [
    "StrategyKind",
    "PromptStrategy",
    "Verdict",
    "ParsePath",
    "DetectionDecision",
    "RootCauseExplanation",
    "PatchResult",
    "PipelineOutcome",
    "AgentContext",
    "MissingShots",
    "EmptyPatch",
    "render_detection_prompt",
    "render_root_cause_prompt",
    "render_patch_prompt",
    "parse_verdict",
    "split_patch_response",
    "detect",
    "analyze_root_cause",
    "generate_patch",
    "element_for_explanation",
    "run_pipeline",
    "NO_CONTEXT_SENTINEL",
    "DEFAULT_ROOT_CAUSE_LEXICON",
]


class MissingShots(ValueError):
    pass


class EmptyPatch(RuntimeError):
    pass


class StrategyKind(Enum):
    CHAIN_OF_THOUGHT = "cot"
    ZERO_SHOT = "zero"
    FEW_SHOT = "few"


@dataclass(frozen=True)
class PromptStrategy:
    kind: StrategyKind
    # (commit message, code change) pairs; few-shot only, two by default.
    shots: tuple[tuple[str, CodeChange], ...] = ()

    def __post_init__(self) -> None:
        if self.kind is not StrategyKind.FEW_SHOT and self.shots:
            raise ValueError(f"{self.kind.value} strategy takes no shots")


class Verdict(Enum):
    BUG = "bug"
    CLEAN = "clean"


class ParsePath(Enum):
    EXACT_TOKEN = "exact_token"
    LAST_TOKEN = "last_token"
    FALLBACK = "fallback"


@dataclass
class DetectionDecision:
    verdict: Verdict
    raw: str
    parse_path: ParsePath


@dataclass
class RootCauseExplanation:
    text: str
    source_sha: str = ""

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("root cause explanation must be non-empty")


@dataclass
class PatchResult:
    think_steps: str
    patch: str
    retrieved_doc_ids: list[str]


COT_DETECTION_TEMPLATE = """You are an AI trained to detect bugs in a deep-learning library based on commit messages and code changes. Your task is to determine whether a given commit introduces a bug or not. Follow the steps below to reason through the problem and arrive at a conclusion.
1. Understand the commit message: Analyze the commit message to understand the context and purpose of the code change.
{commit_message}
2. Review the code change: Examine the deleted and added lines of code to identify the modifications made.
{code_removed}{code_added}
3. Identify potential issues: Look for any missing, improper, or insufficient checkers within the code change. Checkers may include error handling, input validation, boundary checks, or other safety mechanisms.
4. Analyze the impact: Consider the impact of the identified issues on the functionality and reliability of the deep learning libraries.
5. Make a decision: Based on the above analysis, decide whether the commit introduces a bug or not.
6. Output the conclusion: Generate a clear output of "YES" if the commit introduces a bug, or "NO" if it does not."""

ZERO_SHOT_DETECTION_TEMPLATE = """You are an AI trained to detect bugs in a deep-learning library based on commit messages and code changes. Your task is to determine whether a given commit introduces a bug or not. Follow the steps below to reason through the problem and arrive at a conclusion.

Commit message: {commit_message}
Code change: {code_removed}{code_added}"""

FEW_SHOT_DETECTION_TEMPLATE = """You are an AI trained to detect bugs in a deep-learning library based on commit messages and code changes. Your task is to determine whether a given commit introduces a bug or not. Follow the steps below to reason through the problem and arrive at a conclusion.

Example Checker Bug One:
Commit message: {commit_message}
Code change: {code_removed}{code_added}

Example Checker Bug Two:
Commit message: {commit_message}
Code change: {code_removed}{code_added}

Task:
Commit message: {commit_message}
Code change: {code_removed}{code_added}"""

ROOT_CAUSE_TEMPLATE = (
    "Please describe the root cause of the bug based on the following commit message:"
    "{commit_message}"
)

PATCH_TEMPLATE = """You are given a bug explanation and an external context for fixing a checker bug. Please think step by step and generate a patch to fix the bug in the code snippet. Please neglect any issues related to the indentation in the code snippet. Fixing indentation is not the goal of this task. If you think the given pattern can be applied, generate the patch.

Example One:
{code_removed}{code_added}
Example Two:
{code_removed}{code_added}

Bug explanation:
{bug_explanation}
Retrieved context:
{retrieved_knowledge}
Code snippet:
{code_snippet}"""

NO_CONTEXT_SENTINEL = "No retrieved context available."


def _fill(template: str, pairs: Sequence[tuple[str, str]]) -> str:
    # Placeholders are consumed left to right from the template itself, so
    # substituted values can never introduce new placeholders.
    out: list[str] = []
    rest = template
    for name, value in pairs:
        token = "{" + name + "}"
        head, sep, rest = rest.partition(token)
        if not sep:
            raise ValueError(f"template is missing placeholder {token}")
        out.append(head)
        out.append(value)
    out.append(rest)
    return "".join(out)


def change_blocks(change: CodeChange) -> tuple[str, str]:
    """The {code_removed} / {code_added} substitution values. Their
    concatenation equals render_change(change)."""
    removed = "\n".join("-" + l for l in change.removed_lines)
    added = "\n".join("+" + l for l in change.added_lines)
    if removed and added:
        removed += "\n"
    return removed, added


def render_detection_prompt(strategy: PromptStrategy, commit_message: str, change: CodeChange) -> str:
    if strategy.kind is StrategyKind.CHAIN_OF_THOUGHT:
        removed, added = change_blocks(change)
        return _fill(
            COT_DETECTION_TEMPLATE,
            [("commit_message", commit_message), ("code_removed", removed), ("code_added", added)],
        )
    if strategy.kind is StrategyKind.ZERO_SHOT:
        removed, added = change_blocks(change)
        return _fill(
            ZERO_SHOT_DETECTION_TEMPLATE,
            [("commit_message", commit_message), ("code_removed", removed), ("code_added", added)],
        )
    if len(strategy.shots) != 2:
        raise MissingShots(
            f"few-shot detection needs exactly 2 example shots, got {len(strategy.shots)}"
        )
    pairs: list[tuple[str, str]] = []
    for shot_message, shot_change in strategy.shots:
        removed, added = change_blocks(shot_change)
        pairs += [("commit_message", shot_message), ("code_removed", removed), ("code_added", added)]
    removed, added = change_blocks(change)
    pairs += [("commit_message", commit_message), ("code_removed", removed), ("code_added", added)]
    return _fill(FEW_SHOT_DETECTION_TEMPLATE, pairs)


def render_root_cause_prompt(commit_message: str) -> str:
    return _fill(ROOT_CAUSE_TEMPLATE, [("commit_message", commit_message)])


def render_patch_prompt(
    explanation: str,
    retrieved_knowledge: str,
    snippet: CodeChange,
    shots: Sequence[tuple[str, CodeChange]],
) -> str:
    if len(shots) != 2:
        raise MissingShots(f"patch generation needs exactly 2 example shots, got {len(shots)}")
    pairs: list[tuple[str, str]] = []
    for _message, shot_change in shots:
        removed, added = change_blocks(shot_change)
        pairs += [("code_removed", removed), ("code_added", added)]
    pairs += [
        ("bug_explanation", explanation),
        ("retrieved_knowledge", retrieved_knowledge),
        ("code_snippet", render_change(snippet)),
    ]
    return _fill(PATCH_TEMPLATE, pairs)


_EXACT_VERDICT_RE = re.compile(r"[\"'`]*(yes|no)[\"'`]*[\s.!,:;]*", re.IGNORECASE)
_WORD_RE = re.compile(r"[A-Za-z]+")


def parse_verdict(raw: str) -> tuple[Verdict, ParsePath]:
    """Total parsing rule: a lone YES/NO (any case, optional punctuation)
    is ExactToken; otherwise the last standalone YES/NO token wins
    (LastToken); no token at all falls back to Clean (flagged)."""
    stripped = raw.strip()
    if _EXACT_VERDICT_RE.fullmatch(stripped):
        word = _WORD_RE.search(stripped).group(0).lower()
        return (Verdict.BUG if word == "yes" else Verdict.CLEAN, ParsePath.EXACT_TOKEN)
    hits = [w.lower() for w in _WORD_RE.findall(raw) if w.lower() in ("yes", "no")]
    if hits:
        return (Verdict.BUG if hits[-1] == "yes" else Verdict.CLEAN, ParsePath.LAST_TOKEN)
    return (Verdict.CLEAN, ParsePath.FALLBACK)


def split_patch_response(raw: str) -> tuple[str, str]:
    """Split an agent response into (think_steps, patch). Prefers the first
    fenced code block; otherwise everything after a line beginning
    "Patch". Raises EmptyPatch when neither yields content."""
    m = re.search(r"```[^\n]*\n(.*?)```", raw, re.DOTALL)
    if m:
        patch = m.group(1).strip("\n")
        if patch.strip():
            return raw[: m.start()].rstrip(), patch
    lines = raw.split("\n")
    for i, line in enumerate(lines):
        if line.strip().lower().startswith("patch"):
            head = line.split(":", 1)[1].strip() if ":" in line else ""
            tail = ([head] if head else []) + lines[i + 1 :]
            patch = "\n".join(tail).strip("\n")
            if patch.strip():
                return "\n".join(lines[:i]).rstrip(), patch
    raise EmptyPatch("response contained no extractable patch block")


@dataclass
class AgentContext:
    """Shared call parameters for all three agents."""

    gateway: Gateway
    model_name: str = "gpt-3.5-turbo"
    temperature: float = 0.0

    def ask(self, prompt: str, tags: dict | None = None) -> ChatResponse:
        request = user_request(self.model_name, prompt, self.temperature)
        return self.gateway.complete(request, tags=tags)


def detect(ctx: AgentContext, strategy: PromptStrategy, commit: Commit) -> DetectionDecision:
    """Render a detection prompt over all of the commit's changes
    concatenated, call the gateway, and parse the verdict."""
    if not commit.changes:
        raise ValueError(f"commit {commit.sha} has no code changes")
    change = commit.changes[0] if len(commit.changes) == 1 else merge_changes(commit.changes)
    return detect_change(ctx, strategy, commit.message, change, sha=commit.sha)


def detect_change(
    ctx: AgentContext,
    strategy: PromptStrategy,
    commit_message: str,
    change: CodeChange,
    sha: str = "",
) -> DetectionDecision:
    prompt = render_detection_prompt(strategy, commit_message, change)
    response = ctx.ask(prompt, tags={"agent": "detection", "sha": sha})
    verdict, path = parse_verdict(response.content)
    return DetectionDecision(verdict, response.content, path)


def analyze_root_cause(ctx: AgentContext, commit_message: str, source_sha: str = "") -> RootCauseExplanation:
    if not commit_message:
        raise ValueError("commit message must be non-empty")
    prompt = render_root_cause_prompt(commit_message)
    response = ctx.ask(prompt, tags={"agent": "root_cause", "sha": source_sha})
    return RootCauseExplanation(response.content, source_sha)


def generate_patch(
    ctx: AgentContext,
    explanation: RootCauseExplanation,
    store: VectorStore | None,
    snippet: CodeChange,
    shots: Sequence[tuple[str, CodeChange]],
    k: int = 1,
    retrieval_enabled: bool = True,
) -> PatchResult:
    """Query the store with the root-cause text, render the patch prompt,
    and split the response into think steps and patch."""
    if retrieval_enabled and store is not None:
        hits = store.retrieve(explanation.text, k)
        retrieved_ids = [doc_id for doc_id, _score in hits]
        knowledge = "\n".join(store.get_text(doc_id) for doc_id in retrieved_ids)
        if not knowledge:
            knowledge = NO_CONTEXT_SENTINEL
    else:
        retrieved_ids = []
        knowledge = NO_CONTEXT_SENTINEL
    prompt = render_patch_prompt(explanation.text, knowledge, snippet, shots)
    response = ctx.ask(prompt, tags={"agent": "patch_generation", "sha": explanation.source_sha})
    think, patch = split_patch_response(response.content)
    return PatchResult(think, patch, retrieved_ids)


DEFAULT_ROOT_CAUSE_LEXICON: tuple[tuple[str, Element], ...] = (
    ("quantiz", Element.TENSOR_QUANTIZATION),
    ("computation graph", Element.COMPUTATION_GRAPH),
    ("graph", Element.COMPUTATION_GRAPH),
    ("backend", Element.BACKEND_TYPE),
    ("device version", Element.DEVICE_VERSION),
    ("driver", Element.DEVICE_VERSION),
    ("device availab", Element.DEVICE_AVAILABILITY),
    ("device", Element.DEVICE_TYPE),
    ("execution mode", Element.EXECUTION_MODE),
    ("eager", Element.EXECUTION_MODE),
    ("error message", Element.ERROR_MESSAGE),
    ("message", Element.ERROR_MESSAGE),
    ("null", Element.NULL_VALUE),
    ("none", Element.NULL_VALUE),
    ("bound", Element.BOUNDARY_VALUE),
    ("out of range", Element.BOUNDARY_VALUE),
    ("index", Element.BOUNDARY_VALUE),
    ("overflow", Element.BOUNDARY_VALUE),
    ("dtype", Element.TYPE_CHECKING),
    ("type", Element.TYPE_CHECKING),
    ("edge case", Element.EDGE_CASES),
    ("empty", Element.EDGE_CASES),
    ("shape", Element.EDGE_CASES),
)


def element_for_explanation(
    text: str,
    lexicon: Sequence[tuple[str, Element]] = DEFAULT_ROOT_CAUSE_LEXICON,
) -> Element:
    """Map a free-text root-cause explanation onto a rule-set element key.

    First lexicon entry whose needle occurs in the text wins; no match
    falls through to Others (which the rule set resolves via fallback).
    """
    folded = text.casefold()
    for needle, element in lexicon:
        if needle in folded:
            return element
    return Element.OTHERS


@dataclass
class PipelineOutcome:
    sha: str
    change_id: str | None = None
    verdict: str | None = None
    parse_path: str | None = None
    root_cause: str | None = None
    element_key: str | None = None
    fewshot_fallback: bool | None = None
    patch: str | None = None
    think_steps: str | None = None
    retrieved_doc_ids: list[str] = field(default_factory=list)
    error: str | None = None

    def to_record(self) -> dict:
        return {
            "sha": self.sha,
            "change_id": self.change_id,
            "verdict": self.verdict,
            "parse_path": self.parse_path,
            "root_cause": self.root_cause,
            "element_key": self.element_key,
            "fewshot_fallback": self.fewshot_fallback,
            "patch": self.patch,
            "think_steps": self.think_steps,
            "retrieved_doc_ids": self.retrieved_doc_ids,
            "error": self.error,
        }


def _run_unit(
    ctx: AgentContext,
    strategy: PromptStrategy,
    store: VectorStore | None,
    ruleset: RuleSet,
    message: str,
    change: CodeChange,
    sha: str,
    change_id: str | None,
    k: int,
    retrieval_enabled: bool,
    lexicon: Sequence[tuple[str, Element]],
) -> PipelineOutcome:
    outcome = PipelineOutcome(sha=sha, change_id=change_id)
    try:
        decision = detect_change(ctx, strategy, message, change, sha=sha)
        outcome.verdict = decision.verdict.value
        outcome.parse_path = decision.parse_path.value
        if decision.verdict is Verdict.CLEAN:
            return outcome
        explanation = analyze_root_cause(ctx, message, source_sha=sha)
        outcome.root_cause = explanation.text
        element = element_for_explanation(explanation.text, lexicon)
        outcome.element_key = element.value
        selection = select_fewshot_examples(ruleset, element, k=2)
        outcome.fewshot_fallback = selection.used_fallback
        result = generate_patch(
            ctx, explanation, store, change, selection.examples,
            k=k, retrieval_enabled=retrieval_enabled,
        )
        outcome.patch = result.patch
        outcome.think_steps = result.think_steps
        outcome.retrieved_doc_ids = result.retrieved_doc_ids
    except Exception as exc:  # per-unit isolation: errors never abort the batch
        outcome.error = f"{type(exc).__name__}: {exc}"
    return outcome


def run_pipeline(
    ctx: AgentContext,
    strategy: PromptStrategy,
    store: VectorStore | None,
    ruleset: RuleSet,
    commits: Sequence[Commit],
    k: int = 1,
    retrieval_enabled: bool = True,
    lexicon: Sequence[tuple[str, Element]] = DEFAULT_ROOT_CAUSE_LEXICON,
    granularity: str = "commit",
) -> list[PipelineOutcome]:
    """Detection feeds root cause feeds patch generation; Clean verdicts
    stop after detection. Granularity "commit" concatenates a commit's
    changes into one unit; "change" runs one unit per modified file (the
    new-repository scan mode).
    """
    if granularity not in ("commit", "change"):
        raise ValueError(f"unknown granularity {granularity!r}")
    outcomes: list[PipelineOutcome] = []
    for commit in commits:
        if granularity == "commit":
            if not commit.changes:
                outcome = PipelineOutcome(sha=commit.sha, error="ValueError: commit has no code changes")
                outcomes.append(outcome)
                continue
            change = commit.changes[0] if len(commit.changes) == 1 else merge_changes(commit.changes)
            outcomes.append(
                _run_unit(
                    ctx, strategy, store, ruleset, commit.message, change,
                    commit.sha, None, k, retrieval_enabled, lexicon,
                )
            )
        else:
            for idx, change in enumerate(commit.changes):
                change_id = f"{commit.sha}:{idx}:{change.file_path}"
                outcomes.append(
                    _run_unit(
                        ctx, strategy, store, ruleset, commit.message, change,
                        commit.sha, change_id, k, retrieval_enabled, lexicon,
                    )
                )
    return outcomes
