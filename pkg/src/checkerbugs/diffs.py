"""Unified diff parsing into structured per-file code changes.

A parsed file section keeps its hunks verbatim so that well-formed git
output round-trips byte for byte. The parser is deliberately tolerant of
the noise found in real commit histories: junk before the first file
header is skipped, binary markers become flagged (empty) changes, and
"\\ No newline at end of file" records are retained without counting
toward hunk lengths.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

__all__ = [
    "LineTag",
    "Hunk",
    "CodeChange",
    "MalformedDiff",
    "parse_diff",
    "render_change",
    "serialize_hunks",
    "merge_changes",
]


class MalformedDiff(ValueError):
    """An unrecognized hunk header inside a file section.

    ``byte_offset`` points at the start of the offending line, counted in
    UTF-8 bytes of the input text.
    """

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class LineTag(Enum):
    CONTEXT = " "
    REMOVED = "-"
    ADDED = "+"
    # "\ No newline at end of file"; excluded from line lists and counts.
    NO_NEWLINE = "\\"


@dataclass
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    lines: list[tuple[LineTag, str]]
    header: str  # raw @@ line, kept for byte-exact serialization

    def serialize(self) -> str:
        parts = [self.header]
        parts.extend(tag.value + text for tag, text in self.lines)
        return "\n".join(parts)


@dataclass
class CodeChange:
    """One modified file: the unit stored in the RAG index and fed to agents."""

    file_path: str
    hunks: list[Hunk] = field(default_factory=list)
    removed_lines: list[str] = field(default_factory=list)
    added_lines: list[str] = field(default_factory=list)
    is_binary: bool = False

    @classmethod
    def from_hunks(cls, file_path: str, hunks: list[Hunk], is_binary: bool = False) -> "CodeChange":
        removed = [text for h in hunks for tag, text in h.lines if tag is LineTag.REMOVED]
        added = [text for h in hunks for tag, text in h.lines if tag is LineTag.ADDED]
        return cls(file_path, hunks, removed, added, is_binary)

    def changed_line_count(self) -> int:
        return len(self.removed_lines) + len(self.added_lines)


_HUNK_RE = re.compile(r"@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@.*")
_GIT_HEADER_RE = re.compile(r'diff --git (?:"a/(.*)"|a/(.*?)) (?:"b/(.*)"|b/(.*))$')
_ESCAPE_RE = re.compile(r"\\([\\\"abfnrtv]|[0-7]{1,3})")
_ESCAPES = {
    "\\": "\\", '"': '"', "a": "\a", "b": "\b", "f": "\f",
    "n": "\n", "r": "\r", "t": "\t", "v": "\v",
}


def _unescape(path: str) -> str:
    def sub(m: re.Match) -> str:
        token = m.group(1)
        if token in _ESCAPES:
            return _ESCAPES[token]
        return chr(int(token, 8))

    return _ESCAPE_RE.sub(sub, path)


def _clean_marker_path(raw: str | None) -> str | None:
    # "--- a/path", optionally quoted, optionally with a trailing "\tstamp"
    # as produced by plain diff -u.
    if raw is None:
        return None
    path = raw.split("\t", 1)[0].rstrip("\r")
    if path.startswith('"') and path.endswith('"') and len(path) >= 2:
        path = _unescape(path[1:-1])
    if not path or path == "/dev/null":
        return None
    for prefix in ("a/", "b/"):
        if path.startswith(prefix):
            return path[2:]
    return path


def _byte_offset(lines: list[str], index: int) -> int:
    return sum(len(line.encode("utf-8", errors="replace")) + 1 for line in lines[:index])


class _Section:
    __slots__ = ("git_header", "old_marker", "new_marker", "hunks", "is_binary")

    def __init__(self, git_header: str | None):
        self.git_header = git_header
        self.old_marker: str | None = None
        self.new_marker: str | None = None
        self.hunks: list[Hunk] = []
        self.is_binary = False

    def file_path(self) -> str:
        # Prefer the +++ side; fall back to --- (deleted files), then the
        # "diff --git" header (mode-only or binary changes).
        path = _clean_marker_path(self.new_marker) or _clean_marker_path(self.old_marker)
        if path:
            return path
        if self.git_header:
            m = _GIT_HEADER_RE.match(self.git_header)
            if m:
                quoted_b, plain_b = m.group(3), m.group(4)
                if quoted_b is not None:
                    return _unescape(quoted_b)
                if plain_b:
                    return plain_b
        return "<unknown>"

    def build(self) -> CodeChange:
        return CodeChange.from_hunks(self.file_path(), self.hunks, self.is_binary)


def _parse_hunk(lines: list[str], index: int, match: re.Match) -> tuple[Hunk, int]:
    old_start = int(match.group(1))
    old_len = int(match.group(2)) if match.group(2) is not None else 1
    new_start = int(match.group(3))
    new_len = int(match.group(4)) if match.group(4) is not None else 1

    body: list[tuple[LineTag, str]] = []
    old_rem, new_rem = old_len, new_len
    i = index + 1
    while (old_rem > 0 or new_rem > 0) and i < len(lines):
        text = lines[i]
        if text.startswith("\\"):
            body.append((LineTag.NO_NEWLINE, text[1:]))
        elif text.startswith("-") and old_rem > 0:
            body.append((LineTag.REMOVED, text[1:]))
            old_rem -= 1
        elif text.startswith("+") and new_rem > 0:
            body.append((LineTag.ADDED, text[1:]))
            new_rem -= 1
        elif (text.startswith(" ") or text == "") and old_rem > 0 and new_rem > 0:
            body.append((LineTag.CONTEXT, text[1:]))
            old_rem -= 1
            new_rem -= 1
        else:
            # Inconsistent body line: close the hunk early and let the
            # scanner re-examine this line. Best effort beats aborting.
            break
        i += 1
    if i < len(lines) and lines[i].startswith("\\"):
        body.append((LineTag.NO_NEWLINE, lines[i][1:]))
        i += 1
    return Hunk(old_start, old_len, new_start, new_len, body, lines[index]), i


def parse_diff(raw: str | bytes) -> list[CodeChange]:
    """Parse unified diff text into one CodeChange per file section.

    Empty input yields an empty list. Bytes are decoded as UTF-8 with
    replacement. Raises MalformedDiff for an unparseable @@ header inside
    a file section; anything before the first file header is ignored.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    lines = raw.split("\n")
    changes: list[CodeChange] = []
    section: _Section | None = None

    def flush() -> None:
        nonlocal section
        if section is not None:
            changes.append(section.build())
            section = None

    i = 0
    n = len(lines)
    while i < n:
        line = lines[i]
        if line.startswith("diff --git "):
            flush()
            section = _Section(line)
            i += 1
        elif line.startswith("--- ") and i + 1 < n and lines[i + 1].startswith("+++ "):
            if section is None or section.hunks or section.new_marker is not None:
                flush()
                section = _Section(None)
            section.old_marker = line[4:]
            section.new_marker = lines[i + 1][4:]
            i += 2
        elif section is not None and line.startswith("@@"):
            m = _HUNK_RE.fullmatch(line)
            if m is None:
                raise MalformedDiff("unrecognized hunk header", _byte_offset(lines, i))
            hunk, i = _parse_hunk(lines, i, m)
            section.hunks.append(hunk)
        elif section is not None and (
            line.startswith("Binary files ") or line.startswith("GIT binary patch")
        ):
            section.is_binary = True
            i += 1
        else:
            i += 1
    flush()
    return changes


def serialize_hunks(change: CodeChange) -> str:
    """Reproduce the hunk portion of the original diff, byte for byte for
    well-formed inputs."""
    return "\n".join(h.serialize() for h in change.hunks)


def render_change(change: CodeChange) -> str:
    """Canonical text of a change: '-' lines then '+' lines, original order.

    This is the document text embedded into the RAG store and substituted
    into agent prompts.
    """
    lines = ["-" + l for l in change.removed_lines] + ["+" + l for l in change.added_lines]
    return "\n".join(lines)


def merge_changes(changes: list[CodeChange], file_path: str = "<combined>") -> CodeChange:
    """Concatenate several per-file changes into a single pseudo-change.

    Used when a whole commit is presented to an agent as one code change.
    """
    removed = [l for c in changes for l in c.removed_lines]
    added = [l for c in changes for l in c.added_lines]
    return CodeChange(file_path, [], removed, added, any(c.is_binary for c in changes))
