"""Operator command line: corpus building, episode running, statistics,
training-batch preparation, and the search HTTP server.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .canon import canonical_dumps, sha256_hex
from .config import Config, ConfigError, dump_config, load_config
from .errors import DomainError
from .retrieval import (
    Corpus,
    Modality,
    build_corpus,
    load_corpus,
    load_manifest_dir,
    save_corpus,
)
from .runtime import (
    ChatCompletionsClient,
    ExactMatchJudge,
    JudgeError,
    Policy,
    RemoteJudge,
    RemotePolicy,
    ScriptedPolicy,
    SessionState,
    Trajectory,
    load_trajectory,
    run_episode,
    save_session,
    save_trajectory,
)
from .server import make_search_server
from .training import audit_report, export_training_batch, prepare_group

TOKEN_CHARS = 4  # proxy: rendered prompt characters per counted token


class EmptyCorpus(DomainError):
    code = "EmptyCorpus"


def _build_policy(config: Config) -> Policy:
    if config.policy_mode == "scripted":
        return ScriptedPolicy.from_file(config.require("policy_script"))
    client = ChatCompletionsClient(
        config.require("policy_base_url"),
        config.require("policy_model"),
        token_env=config.policy_token_env,
        timeout_s=config.policy_timeout_s,
    )
    return RemotePolicy(client)


def _build_judge(config: Config):
    if config.judge_mode == "exact":
        return ExactMatchJudge()
    client = ChatCompletionsClient(
        config.require("judge_base_url"),
        config.require("judge_model"),
        token_env=config.judge_token_env,
    )
    return RemoteJudge(client)


def _load_corpus(config: Config) -> Corpus:
    return load_corpus(config.require("corpus_path"))


# -- commands -----------------------------------------------------------------


def cmd_corpus_build(args: argparse.Namespace) -> int:
    items = load_manifest_dir(args.manifest_dir)
    if not items:
        raise EmptyCorpus(f"no corpus items found under {args.manifest_dir}")
    corpus = build_corpus(items, clip_len_s=args.clip_len)
    save_corpus(corpus, args.out)
    counts = {modality: 0 for modality in Modality}
    for item in corpus.items:
        counts[item.modality] += 1
    print(
        f"{counts[Modality.TEXT]} texts, {counts[Modality.IMAGE]} images, "
        f"{counts[Modality.VIDEO]} videos, {len(corpus.clips)} clips indexed "
        f"({len(corpus.units)} searchable units) -> {args.out}"
    )
    return 0


def _run_one(
    config: Config, corpus: Corpus, query: str, gold: str | None, out_path: Path
) -> tuple[Trajectory, int | None]:
    policy = _build_policy(config)
    state = SessionState.new(query)
    trajectory = run_episode(policy, corpus, query, config.episode_config(), resume=state)
    if config.session_dir:
        session_dir = Path(config.session_dir)
        session_dir.mkdir(parents=True, exist_ok=True)
        save_session(state, session_dir / f"session_{sha256_hex(query)[:12]}.json")
    verdict: int | None = None
    if gold is not None and trajectory.answer_text is not None:
        judge = _build_judge(config)
        try:
            verdict = judge.judge(query, gold, trajectory.answer_text)
        except JudgeError as exc:
            print(f"warning: {exc}; episode kept without reward", file=sys.stderr)
    trajectory.reward = verdict
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_trajectory(trajectory, out_path)
    return trajectory, verdict


def _apply_overrides(config: Config, overrides: list[str]) -> Config:
    """Apply repeatable ``--set field=value`` flags on top of the config file.
    Values parse as JSON, falling back to plain strings."""
    from dataclasses import asdict, fields

    if not overrides:
        return config
    known = {f.name for f in fields(Config)}
    record = asdict(config)
    for override in overrides:
        field_name, _, raw = override.partition("=")
        if not _ or field_name not in known:
            raise ConfigError(f"bad override {override!r}; use one of {sorted(known)}")
        try:
            record[field_name] = json.loads(raw)
        except json.JSONDecodeError:
            record[field_name] = raw
    try:
        return Config(**record)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_run(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args.set or [])
    corpus = _load_corpus(config)
    out_dir = Path(args.out_dir or config.output_dir)

    if args.query is not None:
        out_path = Path(args.out) if args.out else out_dir / "trajectory.jsonl"
        trajectory, verdict = _run_one(config, corpus, args.query, args.gold, out_path)
        status = "answered" if trajectory.answer_text is not None else "truncated"
        verdict_text = "absent" if verdict is None else str(verdict)
        print(
            f"{status} after {len(trajectory.records)} cycles; "
            f"verdict {verdict_text} -> {out_path}"
        )
        return 0

    # batch mode: one JSON object per line with "query" and optional "gold"
    entries = []
    for line in Path(args.queries).read_text(encoding="utf-8").splitlines():
        if line.strip():
            entries.append(json.loads(line))

    def run_entry(indexed: tuple[int, dict]) -> str:
        index, entry = indexed
        out_path = out_dir / f"trajectory_{index:04d}.jsonl"
        trajectory, verdict = _run_one(
            config, corpus, entry["query"], entry.get("gold"), out_path
        )
        status = "answered" if trajectory.answer_text is not None else "truncated"
        verdict_text = "absent" if verdict is None else str(verdict)
        return f"[{index}] {status}, verdict {verdict_text} -> {out_path}"

    with ThreadPoolExecutor(max_workers=max(1, args.parallel)) as pool:
        for line in pool.map(run_entry, enumerate(entries)):
            print(line)
    return 0


def cmd_prune(args: argparse.Namespace) -> int:
    gold_by_query: dict[str, list[str]] = {}
    if args.gold_manifest:
        record = json.loads(Path(args.gold_manifest).read_text(encoding="utf-8"))
        for entry in record.get("entries", []):
            gold_by_query[entry["query"]] = list(entry.get("gold_evidence_ids", []))

    trajectories = [load_trajectory(path) for path in args.trajectories]
    by_query: dict[str, list[Trajectory]] = {}
    for trajectory in trajectories:
        by_query.setdefault(trajectory.query, []).append(trajectory)

    groups = []
    audits = []
    for query, group_trajectories in by_query.items():
        group = prepare_group(group_trajectories, gold_by_query.get(query, []))
        groups.append(group)
        audits.append(audit_report(group, group_trajectories))

    batch_path = Path(args.out_batch)
    batch_path.parent.mkdir(parents=True, exist_ok=True)
    batch_path.write_text(export_training_batch(groups), encoding="utf-8")
    audit_text = "\n".join(audits)
    if args.out_audit:
        Path(args.out_audit).write_text(audit_text, encoding="utf-8")
    print(audit_text, end="")
    total = sum(len(r.segments) for g in groups for r in g.rollouts)
    masked = sum(
        e.mu for g in groups for r in g.rollouts for e in r.mask.entries
    )
    print(f"{len(groups)} groups, {total} segments, {masked} masked -> {batch_path}")
    return 0


def _stats_for(trajectory: Trajectory) -> dict:
    searches = sum(1 for r in trajectory.records if r.kind == "retrieve")
    prompt_chars = sum(r.prompt_chars + r.memorize_prompt_chars for r in trajectory.records)
    return {
        "query": trajectory.query,
        "cycles": len(trajectory.records),
        "searches": searches,
        "answered": trajectory.answer_text is not None,
        "truncated": trajectory.truncated,
        "duplicate_queries": trajectory.graph.duplicate_query_count(),
        "prompt_chars": prompt_chars,
        "token_proxy": prompt_chars // TOKEN_CHARS,
        "reward": trajectory.reward,
    }


def cmd_stats(args: argparse.Namespace) -> int:
    reports = [_stats_for(load_trajectory(path)) for path in args.trajectories]
    summary = {
        "episodes": len(reports),
        "total_duplicate_queries": sum(r["duplicate_queries"] for r in reports),
        "total_token_proxy": sum(r["token_proxy"] for r in reports),
        "answered": sum(1 for r in reports if r["answered"]),
        "truncated": sum(1 for r in reports if r["truncated"]),
    }
    payload = {"episodes": reports, "summary": summary, "token_proxy_note": "chars/4 proxy"}
    if args.out:
        Path(args.out).write_text(canonical_dumps(payload) + "\n", encoding="utf-8")
    for report in reports:
        print(
            f"{report['query'][:60]!r}: {report['cycles']} cycles "
            f"({report['searches']} searches), duplicates {report['duplicate_queries']}, "
            f"~{report['token_proxy']} tokens (chars/4 proxy)"
        )
    print(
        f"total: {summary['episodes']} episodes, {summary['answered']} answered, "
        f"{summary['truncated']} truncated, {summary['total_duplicate_queries']} duplicate "
        f"queries, ~{summary['total_token_proxy']} tokens"
    )
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    server = make_search_server(
        corpus, host=args.host, port=args.port, default_k=args.k, n_frames=args.n_frames
    )
    host, port = server.server_address[:2]
    print(f"serving POST /search on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_config_dump(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else Config()
    print(dump_config(config), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphmem",
        description="Graph-structured agentic retrieval memory engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="corpus management")
    corpus_sub = corpus.add_subparsers(dest="corpus_command", required=True)
    build = corpus_sub.add_parser("build", help="build a corpus file from manifests")
    build.add_argument("--manifest-dir", required=True)
    build.add_argument("--out", required=True)
    build.add_argument("--clip-len", type=float, default=60.0)
    build.set_defaults(func=cmd_corpus_build)

    run = sub.add_parser("run", help="run episodes against a corpus")
    run.add_argument("--config", required=True)
    group = run.add_mutually_exclusive_group(required=True)
    group.add_argument("--query")
    group.add_argument("--queries", help="JSONL file of {query, gold?} entries")
    run.add_argument("--gold")
    run.add_argument("--out", help="trajectory output path (single query)")
    run.add_argument("--out-dir", help="output directory (defaults to config output_dir)")
    run.add_argument("--parallel", type=int, default=1)
    run.add_argument(
        "--set", action="append", metavar="FIELD=VALUE",
        help="override a config field (repeatable), e.g. --set t_max=3",
    )
    run.set_defaults(func=cmd_run)

    prune = sub.add_parser("prune", help="segment, mask, and export training batches")
    prune.add_argument("--trajectories", nargs="+", required=True)
    prune.add_argument("--gold-manifest")
    prune.add_argument("--out-batch", required=True)
    prune.add_argument("--out-audit")
    prune.set_defaults(func=cmd_prune)

    stats = sub.add_parser("stats", help="per-episode diagnostics")
    stats.add_argument("--trajectories", nargs="*", default=[])
    stats.add_argument("--out", help="machine-readable report path")
    stats.set_defaults(func=cmd_stats)

    serve = sub.add_parser("serve", help="HTTP search endpoint over a corpus")
    serve.add_argument("--corpus", required=True)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8765)
    serve.add_argument("--k", type=int, default=5)
    serve.add_argument("--n-frames", type=int, default=8)
    serve.set_defaults(func=cmd_serve)

    config = sub.add_parser("config", help="config management")
    config_sub = config.add_subparsers(dest="config_command", required=True)
    dump = config_sub.add_parser("dump", help="print the effective config")
    dump.add_argument("--config")
    dump.set_defaults(func=cmd_config_dump)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
