"""Commit mining: git extraction, keyword filtering, snowball suggestions.

Mining reads local clones (bare or working) through one ``git log -p``
pass, parses every patch with the diff parser, and filters precisely on
the author timestamp in Python rather than trusting git's date flags.
"""
from __future__ import annotations

import json
import re
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, time, timezone
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator

from .diffs import CodeChange, MalformedDiff, parse_diff

__all__ = [
    "Commit",
    "KeywordSet",
    "MatchResult",
    "MatchedIn",
    "RepoUnreadable",
    "InvalidDateRange",
    "mine_commits",
    "match_keywords",
    "snowball_suggest",
    "filter_for_eval",
    "read_keyword_file",
    "write_commit_records",
    "read_commit_records",
]

_RECORD_SEP = "\x1e"
_FIELD_SEP = "\x1f"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class RepoUnreadable(RuntimeError):
    pass


class InvalidDateRange(ValueError):
    pass


@dataclass
class Commit:
    """One mined revision with its parsed per-file changes."""

    sha: str
    message: str
    authored_at: datetime  # always timezone-aware UTC
    repo: str
    changes: list[CodeChange] = field(default_factory=list)
    # Set when the commit's diff could not be parsed; the commit is kept
    # with empty changes instead of being dropped silently.
    diff_error: str | None = None

    @property
    def file_count(self) -> int:
        return len({c.file_path for c in self.changes})


@dataclass(frozen=True)
class KeywordSet:
    """Case-folded, deduplicated keywords plus the snowball round they
    belong to (0 = seed)."""

    keywords: frozenset[str]
    round: int = 0

    @classmethod
    def from_iterable(cls, words: Iterable[str], round: int = 0) -> "KeywordSet":
        folded = {w.strip().casefold() for w in words}
        folded.discard("")
        return cls(frozenset(folded), round)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.keywords))

    def __len__(self) -> int:
        return len(self.keywords)

    def __contains__(self, word: str) -> bool:
        return word.casefold() in self.keywords


class MatchedIn(Enum):
    MESSAGE = "message"
    DIFF = "diff"
    BOTH = "both"


@dataclass
class MatchResult:
    commit_sha: str
    matched_keywords: list[str]
    matched_in: MatchedIn


@lru_cache(maxsize=4096)
def _keyword_pattern(keyword: str) -> re.Pattern:
    # Word-boundary substring where boundary means "not adjacent to an
    # alphanumeric": "check" matches inside TORCH_CHECK (underscore is a
    # boundary) but not inside "paycheckstub".
    return re.compile(
        r"(?<![0-9A-Za-z])" + re.escape(keyword) + r"(?![0-9A-Za-z])",
        re.IGNORECASE,
    )


def read_keyword_file(path: str | Path, round: int = 0) -> KeywordSet:
    """Load a plain-text keyword file: one keyword per line, '#' comments
    and blank lines allowed."""
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        words.append(stripped)
    return KeywordSet.from_iterable(words, round=round)


def _normalize_bound(value: date | datetime | str, *, end_of_day: bool) -> datetime:
    if isinstance(value, str):
        try:
            value = date.fromisoformat(value)
        except ValueError:
            value = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if isinstance(value, datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        return value.astimezone(timezone.utc)
    # date: since starts the day, until covers the whole day (inclusive)
    boundary = time.max if end_of_day else time.min
    return datetime.combine(value, boundary, tzinfo=timezone.utc)


def mine_commits(
    repo_path: str | Path,
    since: date | datetime | str,
    until: date | datetime | str,
    repo_name: str | None = None,
) -> list[Commit]:
    """Extract commits whose author timestamp falls within [since, until].

    Returns commits ordered by timestamp ascending, each carrying its
    parsed changes. Date (not datetime) bounds are inclusive of the whole
    ``until`` day.
    """
    since_dt = _normalize_bound(since, end_of_day=False)
    until_dt = _normalize_bound(until, end_of_day=True)
    if since_dt > until_dt:
        raise InvalidDateRange(f"since {since_dt.isoformat()} is after until {until_dt.isoformat()}")

    repo_path = Path(repo_path)
    repo = repo_name or repo_path.name
    pretty = f"--pretty=format:{_RECORD_SEP}%H{_FIELD_SEP}%aI{_FIELD_SEP}%B{_FIELD_SEP}"
    proc = subprocess.run(
        ["git", "-C", str(repo_path), "log", pretty, "-p",
         "--no-color", "--no-renames", "--no-ext-diff"],
        capture_output=True,
        text=True,
        errors="replace",
    )
    if proc.returncode != 0:
        stderr = proc.stderr.strip()
        if "does not have any commits" in stderr:
            return []
        raise RepoUnreadable(f"git log failed for {repo_path}: {stderr}")

    commits: list[Commit] = []
    for record in proc.stdout.split(_RECORD_SEP)[1:]:
        try:
            sha, date_iso, message, diff_text = record.split(_FIELD_SEP, 3)
        except ValueError:
            continue
        authored_at = datetime.fromisoformat(date_iso).astimezone(timezone.utc)
        if not (since_dt <= authored_at <= until_dt):
            continue
        diff_error = None
        try:
            changes = parse_diff(diff_text)
        except MalformedDiff as exc:
            changes = []
            diff_error = str(exc)
        commits.append(
            Commit(
                sha=sha,
                message=message.rstrip("\n"),
                authored_at=authored_at,
                repo=repo,
                changes=changes,
                diff_error=diff_error,
            )
        )
    commits.sort(key=lambda c: (c.authored_at, c.sha))
    return commits


def match_keywords(commit: Commit, keywords: KeywordSet) -> MatchResult | None:
    """Return a MatchResult iff any keyword occurs (case-insensitive,
    word-boundary) in the commit message or in its added/removed lines."""
    if not keywords.keywords:
        raise ValueError("keyword set is empty")
    message_hits = {kw for kw in keywords.keywords if _keyword_pattern(kw).search(commit.message)}
    diff_hits: set[str] = set()
    for change in commit.changes:
        body = "\n".join(change.removed_lines + change.added_lines)
        if not body:
            continue
        for kw in keywords.keywords:
            if kw not in diff_hits and _keyword_pattern(kw).search(body):
                diff_hits.add(kw)
    hits = message_hits | diff_hits
    if not hits:
        return None
    if message_hits and diff_hits:
        where = MatchedIn.BOTH
    elif message_hits:
        where = MatchedIn.MESSAGE
    else:
        where = MatchedIn.DIFF
    return MatchResult(commit.sha, sorted(hits), where)


def snowball_suggest(
    matched: list[Commit],
    keywords: KeywordSet,
    stoplist: Iterable[str] = (),
    top_n: int = 20,
) -> list[str]:
    """Rank candidate keywords from matched commit messages.

    A candidate must occur in at least two distinct matched messages and
    not already be a keyword or stoplist entry. Ranked by document
    frequency descending, ties broken lexicographically. Candidates are
    suggestions for human review, never auto-added.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    stop = {w.casefold() for w in stoplist}
    frequency: Counter[str] = Counter()
    for commit in matched:
        frequency.update(set(_TOKEN_RE.findall(commit.message.casefold())))
    candidates = [
        token
        for token, count in frequency.items()
        if count >= 2 and token not in keywords.keywords and token not in stop
    ]
    candidates.sort(key=lambda token: (-frequency[token], token))
    return candidates[:top_n]


def filter_for_eval(commits: list[Commit], max_files: int = 10, max_loc: int = 15) -> list[Commit]:
    """Drop commits with more than ``max_files`` modified files or any
    change bigger than ``max_loc`` removed+added lines. Order preserved."""
    if max_files < 1 or max_loc < 1:
        raise ValueError("thresholds must be >= 1")
    return [
        c
        for c in commits
        if c.file_count <= max_files
        and all(ch.changed_line_count() <= max_loc for ch in c.changes)
    ]


def _commit_to_record(commit: Commit) -> dict:
    return {
        "sha": commit.sha,
        "repo": commit.repo,
        "authored_at": commit.authored_at.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "message": commit.message,
        "changes": [
            {
                "file_path": ch.file_path,
                "removed_lines": ch.removed_lines,
                "added_lines": ch.added_lines,
                "is_binary": ch.is_binary,
            }
            for ch in commit.changes
        ],
        "diff_error": commit.diff_error,
    }


def _commit_from_record(record: dict) -> Commit:
    authored = datetime.fromisoformat(record["authored_at"].replace("Z", "+00:00"))
    return Commit(
        sha=record["sha"],
        message=record["message"],
        authored_at=authored.astimezone(timezone.utc),
        repo=record["repo"],
        changes=[
            CodeChange(
                file_path=ch["file_path"],
                removed_lines=list(ch["removed_lines"]),
                added_lines=list(ch["added_lines"]),
                is_binary=bool(ch.get("is_binary", False)),
            )
            for ch in record["changes"]
        ],
        diff_error=record.get("diff_error"),
    )


def write_commit_records(commits: Iterable[Commit], path: str | Path) -> int:
    """Write line-delimited commit records; returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for commit in commits:
            fh.write(json.dumps(_commit_to_record(commit), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_commit_records(path: str | Path) -> list[Commit]:
    commits = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                commits.append(_commit_from_record(json.loads(line)))
    return commits
