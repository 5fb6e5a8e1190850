from __future__ import annotations

import itertools
import os
import subprocess
from pathlib import Path

import pytest

from checkerbugs.diffs import CodeChange

# Fig-1-style PyTorch checker bug: one removed TORCH_CHECK line, two added.
FIG1_DIFF = """\
diff --git a/c10/core/TensorImpl.h b/c10/core/TensorImpl.h
index 3f1a2b4..9c8d7e6 100644
--- a/c10/core/TensorImpl.h
+++ b/c10/core/TensorImpl.h
@@ -89,3 +89,4 @@ inline int64_t size_between_dim_(int k,
 int l, IntArrayRef dims) {
-  TORCH_CHECK((unsigned)l <dims.size());
+  TORCH_CHECK((unsigned)l < dims.size() &&
+  (unsigned)k < dims.size());
 ...
"""

FIG1_MESSAGE = "Fix size_between_dim_ to validate both dimension indices"


@pytest.fixture
def fig1_change() -> CodeChange:
    return CodeChange(
        file_path="c10/core/TensorImpl.h",
        removed_lines=["  TORCH_CHECK((unsigned)l <dims.size());"],
        added_lines=[
            "  TORCH_CHECK((unsigned)l < dims.size() &&",
            "  (unsigned)k < dims.size());",
        ],
    )


def _git(repo: Path, *args: str, env: dict | None = None) -> str:
    merged = dict(os.environ)
    if env:
        merged.update(env)
    proc = subprocess.run(
        ["git", "-C", str(repo), *args],
        check=True,
        capture_output=True,
        text=True,
        env=merged,
    )
    return proc.stdout


@pytest.fixture
def make_repo(tmp_path):
    """Build a throwaway git repository from a commit plan.

    Each commit spec: {"message": str, "when": ISO timestamp,
    "files": {path: content-or-None (None deletes)}}.
    Returns the repo path; shas are available via git log.
    """
    counter = itertools.count()

    def _make(commits: list[dict], name: str = "repo") -> Path:
        repo = tmp_path / f"{name}-{next(counter)}"
        repo.mkdir()
        subprocess.run(["git", "init", "-q", "-b", "main", str(repo)], check=True)
        _git(repo, "config", "user.email", "miner@example.com")
        _git(repo, "config", "user.name", "Fixture Miner")
        for spec in commits:
            for rel, content in spec["files"].items():
                path = repo / rel
                if content is None:
                    path.unlink()
                else:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    path.write_text(content, encoding="utf-8")
            _git(repo, "add", "-A")
            stamp = spec["when"]
            _git(
                repo,
                "commit",
                "-q",
                "--allow-empty",
                "-m",
                spec["message"],
                env={"GIT_AUTHOR_DATE": stamp, "GIT_COMMITTER_DATE": stamp},
            )
        return repo

    return _make


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::", 1)[1]
    print(f"\n[acceptance] {name}: {'PASS' if report.passed else 'FAIL'}")
