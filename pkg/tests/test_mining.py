import subprocess
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from checkerbugs.diffs import CodeChange
from checkerbugs.mining import (
    Commit,
    InvalidDateRange,
    KeywordSet,
    MatchedIn,
    filter_for_eval,
    match_keywords,
    mine_commits,
    read_commit_records,
    read_keyword_file,
    snowball_suggest,
    write_commit_records,
)


def _commit(message: str, changes=None, sha: str = "c0ffee") -> Commit:
    return Commit(
        sha=sha,
        message=message,
        authored_at=datetime(2023, 1, 1, tzinfo=timezone.utc),
        repo="fixture",
        changes=changes or [],
    )


FOUR_COMMITS = [
    {
        "message": "Add missing validation for input tensor",
        "when": "2023-03-01T10:00:00+00:00",
        "files": {"src/op.cc": "int run() { return 0; }\n"},
    },
    {
        "message": "Refactor build scripts",
        "when": "2023-04-15T09:30:00+00:00",
        "files": {"Makefile": "all:\n\ttrue\n"},
    },
    {
        "message": "Bump version",
        "when": "2023-06-20T18:45:00+00:00",
        "files": {"src/op.cc": 'int run() { TORCH_CHECK(x > 0); return 0; }\n'},
    },
    {
        "message": "Out of range commit",
        "when": "2024-02-02T12:00:00+00:00",
        "files": {"src/late.cc": "// later\n"},
    },
]


def test_date_filter_keeps_three_of_four(make_repo):
    repo = make_repo(FOUR_COMMITS)
    commits = mine_commits(repo, "2023-01-01", "2023-12-31")
    assert len(commits) == 3
    assert all(c.authored_at.year == 2023 for c in commits)


def test_since_after_until_raises(make_repo):
    repo = make_repo(FOUR_COMMITS[:1])
    with pytest.raises(InvalidDateRange):
        mine_commits(repo, "2024-01-01", "2023-01-01")


def test_commits_sorted_ascending_matches_direct_log(make_repo):
    repo = make_repo(FOUR_COMMITS)
    commits = mine_commits(repo, "2016-01-01", "2025-01-01")
    # independent listing straight from git, sorted by author date
    out = subprocess.run(
        ["git", "-C", str(repo), "log", "--pretty=%H %aI"],
        check=True, capture_output=True, text=True,
    ).stdout
    listed = [line.split() for line in out.strip().splitlines()]
    expected = [sha for sha, stamp in sorted(listed, key=lambda pair: (pair[1], pair[0]))]
    assert [c.sha for c in commits] == expected
    stamps = [c.authored_at for c in commits]
    assert stamps == sorted(stamps)


def test_mined_commits_carry_parsed_changes(make_repo):
    repo = make_repo(FOUR_COMMITS)
    commits = mine_commits(repo, "2023-01-01", "2023-12-31")
    first = commits[0]
    assert first.file_count == 1
    assert first.changes[0].file_path == "src/op.cc"
    assert first.changes[0].added_lines  # new file: all lines added


def test_unreadable_repo_raises(tmp_path):
    from checkerbugs.mining import RepoUnreadable

    with pytest.raises(RepoUnreadable):
        mine_commits(tmp_path / "not-a-repo", "2023-01-01", "2023-12-31")


# -- keyword matching --------------------------------------------------------

def test_match_in_message():
    commit = _commit("Add missing validation for input tensor")
    result = match_keywords(commit, KeywordSet.from_iterable(["validation"]))
    assert result is not None
    assert result.matched_in is MatchedIn.MESSAGE
    assert result.matched_keywords == ["validation"]


def test_no_match_returns_none():
    commit = _commit("Refactor build scripts")
    assert match_keywords(commit, KeywordSet.from_iterable(["checker", "validation"])) is None


def test_match_in_diff_via_word_boundary_inside_macro():
    change = CodeChange("f.cc", added_lines=["  TORCH_CHECK(x);"])
    commit = _commit("Bump version", changes=[change])
    result = match_keywords(commit, KeywordSet.from_iterable(["check"]))
    assert result is not None
    assert result.matched_in is MatchedIn.DIFF
    assert result.matched_keywords == ["check"]


def test_no_match_inside_a_longer_word():
    commit = _commit("update paycheckstub parser")
    assert match_keywords(commit, KeywordSet.from_iterable(["check"])) is None


def test_match_in_both_message_and_diff():
    change = CodeChange("f.cc", added_lines=["OP_REQUIRES(ctx, ok, check_failed());"])
    commit = _commit("add check for empty input", changes=[change])
    result = match_keywords(commit, KeywordSet.from_iterable(["check"]))
    assert result.matched_in is MatchedIn.BOTH


def test_match_is_case_insensitive():
    commit = _commit("ADD MISSING VALIDATION")
    assert match_keywords(commit, KeywordSet.from_iterable(["Validation"])) is not None


def test_empty_keyword_set_rejected():
    with pytest.raises(ValueError):
        match_keywords(_commit("x"), KeywordSet(frozenset()))


def test_match_is_deterministic():
    change = CodeChange("f.cc", added_lines=["check and validate"])
    commit = _commit("check twice", changes=[change])
    keywords = KeywordSet.from_iterable(["check", "validate"])
    first = match_keywords(commit, keywords)
    second = match_keywords(commit, keywords)
    assert first.matched_keywords == second.matched_keywords
    assert first.matched_in == second.matched_in


@given(
    st.lists(st.sampled_from(["check", "validate", "guard", "assert", "bounds"]), min_size=1, max_size=3),
    st.lists(st.sampled_from(["check", "validate", "guard", "assert", "bounds"]), min_size=0, max_size=3),
    st.lists(
        st.text(alphabet="abcdefgh check validate guard", min_size=0, max_size=40),
        min_size=1,
        max_size=8,
    ),
)
@settings(max_examples=100, deadline=None)
def test_enlarging_keywords_never_loses_matches(base, extra, messages):
    small = KeywordSet.from_iterable(base)
    large = KeywordSet.from_iterable(base + extra)
    commits = [_commit(m, sha=f"s{i}") for i, m in enumerate(messages)]
    matched_small = {c.sha for c in commits if match_keywords(c, small)}
    matched_large = {c.sha for c in commits if match_keywords(c, large)}
    assert matched_small <= matched_large


# -- snowball ----------------------------------------------------------------

def test_snowball_ranks_frequent_token():
    matched = [
        _commit(f"sanitize the input tensor variant {i}", sha=f"s{i}") for i in range(5)
    ] + [_commit("one off note", sha="s9")]
    keywords = KeywordSet.from_iterable(["check"])
    suggestions = snowball_suggest(matched, keywords, stoplist={"the", "input", "tensor", "variant"})
    assert suggestions[0] == "sanitize"
    assert "sanitize" in suggestions


def test_snowball_empty_matched_yields_empty():
    assert snowball_suggest([], KeywordSet.from_iterable(["check"])) == []


def test_snowball_excludes_existing_keywords_and_stoplist():
    matched = [_commit("guard guard input", sha="a"), _commit("guard input", sha="b")]
    keywords = KeywordSet.from_iterable(["guard"])
    assert snowball_suggest(matched, keywords, stoplist={"input"}) == []


def test_snowball_requires_two_documents():
    matched = [_commit("sanitize once", sha="a"), _commit("unrelated", sha="b")]
    assert "sanitize" not in snowball_suggest(matched, KeywordSet.from_iterable(["check"]))


def test_snowball_tie_break_lexicographic_and_top_n():
    matched = [
        _commit("alpha beta", sha="a"),
        _commit("beta alpha", sha="b"),
        _commit("alpha beta gamma", sha="c"),
    ]
    keywords = KeywordSet.from_iterable(["check"])
    ranked = snowball_suggest(matched, keywords, top_n=2)
    assert ranked == ["alpha", "beta"]
    with pytest.raises(ValueError):
        snowball_suggest(matched, keywords, top_n=0)


# -- eval-size filter --------------------------------------------------------

def _commit_with_files(n_files: int, lines_per_change: int, sha: str = "s") -> Commit:
    changes = [
        CodeChange(f"f{i}.cc", added_lines=[f"line {j}" for j in range(lines_per_change)])
        for i in range(n_files)
    ]
    return _commit("msg", changes=changes, sha=sha)


def test_filter_excludes_commit_with_11_files():
    commits = [_commit_with_files(11, 2)]
    assert filter_for_eval(commits) == []


def test_filter_excludes_commit_with_16_line_change():
    commits = [_commit_with_files(1, 16)]
    assert filter_for_eval(commits) == []


def test_filter_keeps_small_commit_and_preserves_order():
    kept1 = _commit_with_files(2, 4, sha="a")
    dropped = _commit_with_files(11, 2, sha="b")
    kept2 = _commit_with_files(10, 15, sha="c")
    result = filter_for_eval([kept1, dropped, kept2])
    assert [c.sha for c in result] == ["a", "c"]


def test_filter_output_is_ordered_subset():
    commits = [_commit_with_files(i % 13, 3, sha=f"s{i}") for i in range(20)]
    result = filter_for_eval(commits)
    shas = [c.sha for c in commits]
    assert [c.sha for c in result] == [s for s in shas if s in {c.sha for c in result}]


def test_filter_rejects_bad_thresholds():
    with pytest.raises(ValueError):
        filter_for_eval([], max_files=0)


# -- keyword file and commit records -----------------------------------------

def test_keyword_file_parsing(tmp_path):
    path = tmp_path / "kw.txt"
    path.write_text("# comment\nChecker\n\n  validation  \nchecker\n", encoding="utf-8")
    keywords = read_keyword_file(path)
    assert sorted(keywords) == ["checker", "validation"]


def test_commit_records_round_trip(tmp_path, make_repo):
    repo = make_repo(FOUR_COMMITS)
    commits = mine_commits(repo, "2023-01-01", "2023-12-31")
    path = tmp_path / "commits.jsonl"
    assert write_commit_records(commits, path) == 3
    loaded = read_commit_records(path)
    assert [c.sha for c in loaded] == [c.sha for c in commits]
    assert [c.authored_at for c in loaded] == [c.authored_at for c in commits]
    assert loaded[0].changes[0].added_lines == commits[0].changes[0].added_lines


def test_unparseable_diff_commit_is_kept_and_flagged(tmp_path):
    commit = _commit("binary-ish change", sha="feed01")
    commit.diff_error = "unrecognized hunk header (byte offset 40)"
    path = tmp_path / "records.jsonl"
    write_commit_records([commit], path)
    (loaded,) = read_commit_records(path)
    assert loaded.diff_error == commit.diff_error
    assert loaded.changes == []
    assert loaded.file_count == 0
