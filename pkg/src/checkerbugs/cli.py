"""One executable, eight subcommands: mine, build-rag, detect, repair,
eval, scan, report, review-import.

Every stage reads and writes line-delimited record files so runs can be
diffed and replayed, and each output gets a manifest with input/output
digests. Exit codes: 0 success, 2 config error, 3 input error, 4 backend
error.
"""
from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import agents, evaluation, mining, taxonomy
from .agents import AgentContext, PipelineOutcome, PromptStrategy, StrategyKind
from .config import (
    EXIT_BACKEND,
    EXIT_CONFIG,
    EXIT_INPUT,
    EXIT_OK,
    ConfigError,
    PipelineConfig,
    load_config,
    write_manifest,
)
from .diffs import render_change
from .evaluation import MetricsReport, PatchAssessment, MatchVerdict
from .gateway import BackendError, Gateway, RemoteBackend, ScriptedBackend, TranscriptWriter
from .mining import InvalidDateRange, RepoUnreadable
from .ragstore import (
    CorruptIndex,
    EmbeddedDocument,
    EmptyStore,
    ProviderUnavailable,
    VectorStore,
    embed_batch,
    get_provider,
)
from .taxonomy import ParseError, RuleSet


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _build_backend(config: PipelineConfig, name: str | None = None):
    name = name or config.backend.name
    if name == "scripted":
        if config.backend.script_file:
            return ScriptedBackend.from_file(
                config.backend.script_file, default_response=config.backend.default_response
            )
        return ScriptedBackend(default_response=config.backend.default_response)
    if name == "remote":
        if not config.backend.base_url:
            raise ConfigError("backend.base_url is required for the remote backend")
        return RemoteBackend(
            base_url=config.backend.base_url,
            api_key_env=config.backend.api_key_env,
            timeout=config.backend.timeout,
            max_retries=config.backend.retries,
        )
    raise ConfigError(f"unknown backend {name!r}")


def _build_context(config: PipelineConfig, transcript_path: Path, backend_name: str | None = None) -> AgentContext:
    transcript_path.parent.mkdir(parents=True, exist_ok=True)
    transcript_path.unlink(missing_ok=True)  # keep repeated runs byte-identical
    gateway = Gateway(
        _build_backend(config, backend_name),
        transcript=TranscriptWriter(transcript_path),
        max_concurrent=config.backend.concurrency,
    )
    return AgentContext(gateway, config.backend.model, config.backend.temperature)


def _load_shot_pairs(path: Path) -> list[tuple[str, object]]:
    doc = json.loads(path.read_text(encoding="utf-8"))
    return [(entry["message"], taxonomy.change_from_diff(entry["diff"])) for entry in doc]


def _build_strategy(config: PipelineConfig, name: str | None = None) -> PromptStrategy:
    kind = StrategyKind(name or config.agents.strategy)
    if kind is not StrategyKind.FEW_SHOT:
        return PromptStrategy(kind)
    if config.agents.detection_shots_file:
        shots = _load_shot_pairs(Path(config.agents.detection_shots_file))
    else:
        bugs = taxonomy.load_dataset(taxonomy.packaged_dataset_path())
        shots = [(bug.message, bug.change) for bug in bugs[:2]]
    return PromptStrategy(kind, tuple(shots[:2]))


def _load_ruleset(config: PipelineConfig, override: str | None = None) -> RuleSet:
    path = override or config.agents.ruleset or taxonomy.packaged_ruleset_path()
    return RuleSet.load(path)


def _open_store(config: PipelineConfig, override: str | None = None) -> VectorStore | None:
    if not config.store.retrieval_enabled:
        return None
    directory = Path(override or config.store.dir)
    provider = _make_provider(config)
    return VectorStore.open(directory, provider=provider)


def _make_provider(config: PipelineConfig, name: str | None = None):
    name = name or config.store.provider
    if name == "remote":
        return get_provider(
            "remote",
            dimension=config.store.dimension,
            base_url=config.store.base_url or "",
            model=config.store.model,
            api_key_env=config.store.api_key_env,
        )
    return get_provider(name, dimension=config.store.dimension)


def _write_outcomes(outcomes: list[PipelineOutcome], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for outcome in outcomes:
            fh.write(json.dumps(outcome.to_record(), ensure_ascii=False) + "\n")


def _read_outcomes(path: Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_mine(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    started = _now()
    repos = args.repo or config.mining.repos
    if not repos:
        raise ConfigError("no repositories configured (use --repo or mining.repos)")
    keyword_path = args.keywords or config.mining.keyword_file or taxonomy.packaged_keywords_path()
    keywords = mining.read_keyword_file(keyword_path)
    since = args.since or config.mining.since
    until = args.until or config.mining.until

    selected: list[mining.Commit] = []
    mined_total = 0
    for repo in repos:
        commits = mining.mine_commits(repo, since, until)
        mined_total += len(commits)
        if args.all:
            selected.extend(commits)
        else:
            selected.extend(c for c in commits if mining.match_keywords(c, keywords))
    if args.eval_filter:
        selected = mining.filter_for_eval(
            selected, max_files=config.mining.max_files, max_loc=config.mining.max_loc
        )

    out = Path(args.out)
    count = mining.write_commit_records(selected, out)
    write_manifest(
        "mine", config.snapshot(),
        inputs={"keywords": keyword_path},
        outputs={"commits": out},
        started_at=started,
        manifest_path=str(out) + ".manifest.json",
    )
    print(f"mined {mined_total} commits, kept {count} -> {out}")
    return EXIT_OK


def cmd_build_rag(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    started = _now()
    commits = mining.read_commit_records(args.changes)
    provider = _make_provider(config, args.provider)
    batch_size = args.batch_size or config.store.batch_size

    doc_ids: list[str] = []
    texts: list[str] = []
    metadata: list[dict] = []
    for commit in commits:
        for idx, change in enumerate(commit.changes):
            doc_ids.append(f"{commit.sha}:{idx}:{change.file_path}")
            texts.append(render_change(change))
            metadata.append({"repo": commit.repo, "sha": commit.sha, "file_path": change.file_path})

    vectors = embed_batch(provider, texts, batch_size=batch_size)
    docs = [
        EmbeddedDocument(doc_id, text, vector, meta)
        for doc_id, text, vector, meta in zip(doc_ids, texts, vectors, metadata)
    ]
    store_dir = Path(args.store or config.store.dir)
    if (store_dir / "manifest.json").exists():
        store = VectorStore.open(store_dir, provider=provider)
    else:
        store = VectorStore.create(store_dir, provider)
    store.index(docs)
    write_manifest(
        "build-rag", config.snapshot(),
        inputs={"changes": Path(args.changes)},
        outputs={"manifest": store_dir / "manifest.json", "vectors": store_dir / "vectors.f32"},
        started_at=started,
        manifest_path=store_dir / "run.manifest.json",
    )
    print(f"indexed {len(docs)} code-change documents into {store_dir} (count={store.count})")
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    started = _now()
    commits = mining.read_commit_records(args.commits)
    strategy = _build_strategy(config, args.strategy)
    out = Path(args.out)
    transcript_path = Path(config.transcripts or str(out) + ".transcripts.jsonl")
    ctx = _build_context(config, transcript_path, args.backend)

    outcomes: list[PipelineOutcome] = []
    for commit in commits:
        outcome = PipelineOutcome(sha=commit.sha)
        try:
            decision = agents.detect(ctx, strategy, commit)
            outcome.verdict = decision.verdict.value
            outcome.parse_path = decision.parse_path.value
        except Exception as exc:
            outcome.error = f"{type(exc).__name__}: {exc}"
        outcomes.append(outcome)
    _write_outcomes(outcomes, out)
    write_manifest(
        "detect", config.snapshot(),
        inputs={"commits": Path(args.commits)},
        outputs={"outcomes": out},
        started_at=started,
        manifest_path=str(out) + ".manifest.json",
    )
    flagged = sum(1 for o in outcomes if o.verdict == "bug")
    print(f"detected {flagged} of {len(outcomes)} commits as checker bugs -> {out}")
    return EXIT_OK


def cmd_repair(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    started = _now()
    commits = mining.read_commit_records(args.commits)
    strategy = _build_strategy(config, args.strategy)
    ruleset = _load_ruleset(config, args.ruleset)
    store = _open_store(config, args.store)
    out = Path(args.out)
    transcript_path = Path(config.transcripts or str(out) + ".transcripts.jsonl")
    ctx = _build_context(config, transcript_path, args.backend)

    outcomes = agents.run_pipeline(
        ctx, strategy, store, ruleset, commits,
        k=config.store.k,
        retrieval_enabled=config.store.retrieval_enabled and store is not None,
        granularity=config.agents.granularity,
    )
    _write_outcomes(outcomes, out)
    write_manifest(
        "repair", config.snapshot(),
        inputs={"commits": Path(args.commits)},
        outputs={"outcomes": out},
        started_at=started,
        manifest_path=str(out) + ".manifest.json",
    )
    patched = sum(1 for o in outcomes if o.patch)
    print(f"generated {patched} candidate patches over {len(outcomes)} units -> {out}")
    return EXIT_OK


def _outcome_key(record: dict) -> str:
    return record.get("change_id") or record["sha"]


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    started = _now()
    dataset = evaluation.load_eval_dataset(args.dataset)
    if not dataset:
        raise ValueError(f"evaluation dataset {args.dataset} is empty")
    run_files = [Path(p) for p in args.outcomes]
    if args.runs is not None and args.runs != len(run_files):
        raise ValueError(f"--runs {args.runs} but {len(run_files)} outcome files given")

    per_run = []
    first_run_index: dict[str, dict] = {}
    for run_no, path in enumerate(run_files):
        index = {_outcome_key(r): r for r in _read_outcomes(path)}
        if run_no == 0:
            first_run_index = index
        predictions = []
        labels = []
        for item in dataset:
            record = index.get(item.sha)
            if record is None:
                raise ValueError(f"outcome file {path} has no record for {item.sha}")
            predictions.append(record.get("verdict") == "bug")
            labels.append(item.ground_truth is evaluation.GroundTruth.BUGGY)
        per_run.append(evaluation.compute_metrics(predictions, labels))

    buggy = sum(1 for item in dataset if item.ground_truth is evaluation.GroundTruth.BUGGY)
    report = MetricsReport(
        label=args.label,
        strategy=args.strategy or config.agents.strategy,
        per_run=per_run,
        class_counts={"buggy": buggy, "clean": len(dataset) - buggy},
        config={
            "backend": config.backend.name,
            "model": config.backend.model,
            "temperature": config.backend.temperature,
            "seed": config.seed,
            "runs": len(run_files),
        },
    )
    doc = report.to_document()

    # Patch assessment runs over the first run's outcomes; with the
    # scripted backend at temperature 0 all runs carry identical patches.
    assessments: list[PatchAssessment] = []
    for item in dataset:
        record = first_run_index.get(item.sha)
        if record is None or not record.get("patch"):
            continue
        assessments.append(
            evaluation.assess_patch(record["patch"], item.ground_truth_patch or "", sha=item.sha)
        )
    accuracy = evaluation.repair_accuracy(assessments)
    doc["repair"] = {
        "generated": accuracy.generated,
        "correct": accuracy.correct,
        "accuracy": accuracy.accuracy,
        "assessments": [{"sha": a.sha, "verdict": a.verdict.value} for a in assessments],
    }

    report_path = Path(args.report)
    report_path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    outputs = {"report": report_path}
    if args.review_queue:
        queue_path = Path(args.review_queue)
        exported = evaluation.export_review_queue(assessments, queue_path)
        outputs["review_queue"] = queue_path
        print(f"exported {exported} patches for manual review -> {queue_path}")
    write_manifest(
        "eval", config.snapshot(),
        inputs={"dataset": Path(args.dataset), **{f"run{i}": p for i, p in enumerate(run_files)}},
        outputs=outputs,
        started_at=started,
        manifest_path=str(report_path) + ".manifest.json",
    )
    precision, recall, f1 = report.averages
    print(
        f"{report.label}/{report.strategy}: precision={evaluation.round_display(precision)} "
        f"recall={evaluation.round_display(recall)} f1={evaluation.round_display(f1)} "
        f"over {len(run_files)} run(s) -> {report_path}"
    )
    return EXIT_OK


def cmd_scan(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    started = _now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    keyword_path = args.keywords or config.mining.keyword_file or taxonomy.packaged_keywords_path()
    keywords = mining.read_keyword_file(keyword_path)
    since = args.since or config.mining.since
    until = args.until or config.mining.until
    commits = mining.mine_commits(args.repo, since, until)
    matched = [c for c in commits if mining.match_keywords(c, keywords)]

    strategy = _build_strategy(config, args.strategy)
    ruleset = _load_ruleset(config)
    store = _open_store(config)
    transcript_path = Path(config.transcripts or out_dir / "transcripts.jsonl")
    ctx = _build_context(config, transcript_path)

    # New-repository scans assess every modified file separately.
    outcomes = agents.run_pipeline(
        ctx, strategy, store, ruleset, matched,
        k=config.store.k,
        retrieval_enabled=config.store.retrieval_enabled and store is not None,
        granularity="change",
    )
    outcomes_path = out_dir / "outcomes.jsonl"
    _write_outcomes(outcomes, outcomes_path)

    flagged = [o for o in outcomes if o.verdict == "bug"]
    queue = [
        PatchAssessment(
            MatchVerdict.NEEDS_REVIEW,
            candidate=o.patch or "",
            ground_truth="",
            sha=o.change_id or o.sha,
        )
        for o in flagged
    ]
    queue_path = out_dir / "review_queue.jsonl"
    exported = evaluation.export_review_queue(queue, queue_path)

    report = {
        "schema": 1,
        "repo": str(args.repo),
        "commits_scanned": len(matched),
        "changes_scanned": len(outcomes),
        "flagged": len(flagged),
        "patches_generated": sum(1 for o in outcomes if o.patch),
        "errors": sum(1 for o in outcomes if o.error),
        "review_queue": str(queue_path),
    }
    report_path = out_dir / "scan_report.json"
    report_path.write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    write_manifest(
        "scan", config.snapshot(),
        inputs={"keywords": keyword_path},
        outputs={"outcomes": outcomes_path, "report": report_path, "review_queue": queue_path},
        started_at=started,
        manifest_path=out_dir / "run.manifest.json",
    )
    print(
        f"scanned {len(matched)} commits / {len(outcomes)} changes, "
        f"flagged {len(flagged)}, exported {exported} for review -> {out_dir}"
    )
    return EXIT_OK


_STRATEGY_ORDER = {"cot": 0, "zero": 1, "few": 2}
_STRATEGY_TITLES = {"cot": "Chain of Thought", "zero": "Zero-Shot", "few": "Few-Shot"}


def cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for path in args.reports:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("schema") != 1:
            raise ValueError(f"report {path} has unsupported schema {doc.get('schema')!r}")
        reports.append(MetricsReport.from_document(doc))

    strategies = sorted(
        {r.strategy for r in reports},
        key=lambda s: (_STRATEGY_ORDER.get(s, 99), s),
    )
    labels = sorted({r.label for r in reports})
    by_cell = {(r.label, r.strategy): r.averages for r in reports}

    def fmt(triple) -> list[str]:
        return [evaluation.round_display(v) for v in triple]

    header = ["Library"]
    for strategy in strategies:
        title = _STRATEGY_TITLES.get(strategy, strategy)
        header += [f"{title} P", f"{title} R", f"{title} F1"]
    rows = []
    for label in labels:
        row = [label]
        for strategy in strategies:
            triple = by_cell.get((label, strategy))
            row += fmt(triple) if triple else ["-", "-", "-"]
        rows.append(row)
    averages_row = ["Average"]
    averages_doc: dict[str, dict] = {}
    for strategy in strategies:
        triples = [by_cell[(label, strategy)] for label in labels if (label, strategy) in by_cell]
        mean = evaluation.average_runs(triples)
        averages_row += fmt(mean)
        averages_doc[strategy] = {
            "precision": mean[0], "recall": mean[1], "f1": mean[2],
        }
    rows.append(averages_row)

    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(header))]
    lines += ["  ".join(str(cell).ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    table = "\n".join(lines)
    print(table)

    if args.out:
        doc = {
            "schema": 1,
            "strategies": strategies,
            "labels": labels,
            "cells": {
                f"{label}/{strategy}": {
                    "precision": by_cell[(label, strategy)][0],
                    "recall": by_cell[(label, strategy)][1],
                    "f1": by_cell[(label, strategy)][2],
                }
                for (label, strategy) in by_cell
            },
            "averages": averages_doc,
        }
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_review_import(args: argparse.Namespace) -> int:
    report_path = Path(args.report)
    doc = json.loads(report_path.read_text(encoding="utf-8"))
    if "repair" not in doc:
        raise ValueError(f"report {report_path} carries no repair section")
    overrides = evaluation.read_overrides(args.overrides)
    assessments = [
        PatchAssessment(MatchVerdict(a["verdict"]), "", "", sha=a["sha"])
        for a in doc["repair"].get("assessments", [])
    ]
    accuracy = evaluation.repair_accuracy(assessments, overrides)
    doc["repair"]["generated"] = accuracy.generated
    doc["repair"]["correct"] = accuracy.correct
    doc["repair"]["accuracy"] = accuracy.accuracy
    doc["repair"]["overrides_applied"] = len(overrides)
    out_path = Path(args.out) if args.out else report_path
    out_path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    shown = evaluation.round_display(accuracy.accuracy, 1)
    print(f"repair accuracy with {len(overrides)} override(s): {accuracy.correct}/{accuracy.generated} = {shown}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="checkerbugs",
        description="Mine checker-bug commits, build a code-change retrieval store, "
        "and run the detection/repair agent pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="pipeline config file (YAML)")

    p = sub.add_parser("mine", help="extract and keyword-filter commits from git repositories")
    p.add_argument("--repo", action="append", help="repository path (repeatable)")
    p.add_argument("--since", help="start date (ISO)")
    p.add_argument("--until", help="end date (ISO)")
    p.add_argument("--keywords", help="keyword file, one keyword per line")
    p.add_argument("--out", required=True, help="output commit records (jsonl)")
    p.add_argument("--eval-filter", action="store_true", help="apply the 10-file / 15-LOC size filter")
    p.add_argument("--all", action="store_true", help="skip the keyword filter (RAG corpus extraction)")
    add_config(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("build-rag", help="embed mined code changes into the vector store")
    p.add_argument("--changes", required=True, help="commit records produced by mine")
    p.add_argument("--store", help="store directory")
    p.add_argument("--provider", help="embedding provider (hashing|remote)")
    p.add_argument("--batch-size", type=int, help="embedding batch size")
    add_config(p)
    p.set_defaults(func=cmd_build_rag)

    p = sub.add_parser("detect", help="run the detection agent over mined commits")
    p.add_argument("--commits", required=True)
    p.add_argument("--strategy", choices=["cot", "zero", "few"])
    p.add_argument("--backend", choices=["scripted", "remote"])
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("repair", help="run the full detect/root-cause/patch pipeline")
    p.add_argument("--commits", required=True)
    p.add_argument("--store", help="vector store directory")
    p.add_argument("--ruleset", help="few-shot rule set file")
    p.add_argument("--strategy", choices=["cot", "zero", "few"])
    p.add_argument("--backend", choices=["scripted", "remote"])
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("eval", help="score outcome files against a labeled dataset")
    p.add_argument("--outcomes", action="append", required=True, help="outcome file (one per run, repeatable)")
    p.add_argument("--dataset", required=True, help="ground-truth dataset (jsonl)")
    p.add_argument("--runs", type=int, help="expected run count (sanity check)")
    p.add_argument("--report", required=True, help="output report (json)")
    p.add_argument("--review-queue", help="export undecidable patches here (jsonl)")
    p.add_argument("--label", default="dataset", help="library / dataset label for the report")
    p.add_argument("--strategy", choices=["cot", "zero", "few"])
    add_config(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scan", help="scan an unlabeled repository for new checker bugs")
    p.add_argument("--repo", required=True)
    p.add_argument("--since", help="start date (ISO)")
    p.add_argument("--until", help="end date (ISO)")
    p.add_argument("--keywords", help="keyword file")
    p.add_argument("--strategy", choices=["cot", "zero", "few"])
    p.add_argument("--out", required=True, help="output directory")
    add_config(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("report", help="render a comparison table from evaluation reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", help="machine-readable table (json)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("review-import", help="apply human review verdicts to a report")
    p.add_argument("--report", required=True)
    p.add_argument("--overrides", required=True)
    p.add_argument("--out", help="write the updated report here instead of in place")
    p.set_defaults(func=cmd_review_import)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, ProviderUnavailable) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (
        FileNotFoundError,
        InvalidDateRange,
        RepoUnreadable,
        ParseError,
        CorruptIndex,
        EmptyStore,
        json.JSONDecodeError,
        ValueError,
        KeyError,
    ) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
