"""Operator CLI: offline builds, one-shot diagnosis, evaluation, serving.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import builder
from .corpus import HashingEmbedder, IncidentRecord, IncidentStore, KnowledgeBase
from .engine import (
    DecliningFeedback,
    Engine,
    EngineConfig,
    Feedback,
    ScriptedFeedback,
)
from .evalkit import ExperimentConfig, run_experiment
from .gateway import Gateway, LiveBackend, ReplayBackend
from .taxonomy import Taxonomy
from .util import LogicalClock, WallClock, sha256_hex
from .verify import RealEnvironment, ScriptRegistry, SimulatedEnvironment


class InteractiveFeedback:
    """Prompts the operator on stdin during the exploration pipeline."""

    def __init__(self, max_rounds: int = 3):
        self.max_rounds = max_rounds

    def next_feedback(self, suggestions: list[str]) -> Feedback:
        print("\nSuggested next steps (execution requires human intervention):")
        for i, s in enumerate(suggestions, start=1):
            print(f"  {i}. {s}")
        answer = input("accept / decline / or describe what you tried> ").strip()
        if answer.lower() in ("accept", "a"):
            return Feedback(Feedback.ACCEPT)
        if answer.lower() in ("decline", "d", ""):
            return Feedback(Feedback.DECLINE)
        return Feedback(Feedback.TEXT, text=answer)


def _build_backend(spec: str):
    """'replay:<script.jsonl>' or 'live'; returns (backend, deterministic)."""
    if spec.startswith("replay:"):
        return ReplayBackend.from_file(spec.split(":", 1)[1]), True
    if spec == "live":
        return LiveBackend(), False
    raise ValueError(f"unknown --llm spec {spec!r} (use replay:<file> or live)")


def _build_env(spec: str):
    if spec.startswith("sim:"):
        return SimulatedEnvironment.from_file(spec.split(":", 1)[1]), True
    if spec == "real":
        return RealEnvironment(), False
    raise ValueError(f"unknown --env spec {spec!r} (use sim:<scenario.json> or real)")


def _build_feedback(spec: str):
    if spec == "none":
        return DecliningFeedback()
    if spec == "interactive":
        return InteractiveFeedback()
    if spec.startswith("scripted:"):
        return ScriptedFeedback.from_file(spec.split(":", 1)[1])
    raise ValueError(f"unknown --feedback spec {spec!r}")


def load_incident(path: str | Path) -> IncidentRecord:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    raw.setdefault("id", f"INC-{sha256_hex(raw.get('description', ''))[:8]}")
    raw.setdefault("created_at", "2024-01-01T00:00:00Z")
    return IncidentRecord.from_json(raw)


def cmd_ingest(args) -> int:
    provider = HashingEmbedder()
    store = IncidentStore()
    for line in Path(args.input).read_text(encoding="utf-8").splitlines():
        if line.strip():
            store.ingest(IncidentRecord.from_json(json.loads(line)), provider)
    store.save(args.corpus, args.vectors)
    print(f"ingested {len(store)} records -> {args.corpus}")
    return 0


def cmd_build_taxonomy(args) -> int:
    backend, _ = _build_backend(args.llm)
    gateway = Gateway(backend, clock=LogicalClock())
    provider = HashingEmbedder()
    store = IncidentStore.load(args.corpus, args.vectors, provider)
    tsg = builder.load_tsg_file(args.tsg) if args.tsg else None
    two_pass = builder.TwoPassBuilder(gateway)
    taxonomy, report = two_pass.build(store.records(), tsg_labels=tsg)
    taxonomy.save_file(args.out)
    print(f"taxonomy written to {args.out}: {taxonomy.node_count()} nodes, "
          f"{len(report.added)} added, {len(report.refined)} refined, {len(report.skipped)} skipped")
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_extract_checks(args) -> int:
    backend, _ = _build_backend(args.llm)
    gateway = Gateway(backend, clock=LogicalClock())
    provider = HashingEmbedder()
    store = IncidentStore.load(args.corpus, args.vectors, provider)
    from .verify import extract_instructions

    report = extract_instructions(builder.group_records_by_label(store.records()), gateway)
    Path(args.out).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    drafts = sum(1 for d in report.drafts if d.status == "draft")
    quarantined = sum(1 for d in report.drafts if d.status == "quarantined")
    print(f"extracted {drafts} drafts ({quarantined} quarantined, {len(report.skipped)} labels skipped)")
    return 0


def cmd_diagnose(args) -> int:
    backend, replay_mode = _build_backend(args.llm)
    env, sim_mode = _build_env(args.env)
    use_logical = args.clock == "logical" or (args.clock == "auto" and replay_mode and sim_mode)
    gateway = Gateway(backend, clock=LogicalClock() if use_logical else WallClock())

    provider = HashingEmbedder()
    taxonomy = Taxonomy.load_file(args.taxonomy)
    registry = ScriptRegistry.from_file(args.registry)
    if args.corpus:
        store = IncidentStore.load(args.corpus, args.vectors, provider)
    else:
        store = IncidentStore()
    kb = KnowledgeBase.load(args.kb, provider) if args.kb else KnowledgeBase()

    config = EngineConfig(taxonomy_only=args.taxonomy_only, llm_budget=args.budget)
    engine = Engine(taxonomy, store, registry, kb, gateway, env, provider, config)
    incident = load_incident(args.incident)
    session = engine.diagnose(incident, _build_feedback(args.feedback))

    print(session.report)
    if args.trace:
        session.write_trace(args.trace)
    if args.ticket and session.ticket is not None:
        Path(args.ticket).write_text(
            json.dumps(session.ticket.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
    if args.report_file:
        Path(args.report_file).write_text(session.report + "\n", encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    result = run_experiment(config)
    payload = result.report_bytes()
    if args.out:
        Path(args.out).write_bytes(payload)
    if args.csv:
        Path(args.csv).write_bytes(result.csv_bytes())
    print(result.table())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceResources, create_app

    provider = HashingEmbedder()
    resources = ServiceResources(
        taxonomy=Taxonomy.load_file(args.taxonomy),
        registry=ScriptRegistry.from_file(args.registry),
        store=IncidentStore.load(args.corpus, args.vectors, provider) if args.corpus else IncidentStore(),
        kb=KnowledgeBase.load(args.kb, provider) if args.kb else KnowledgeBase(),
        provider=provider,
        fixtures_dir=Path(args.fixtures_dir).resolve() if args.fixtures_dir else None,
        feedback_rounds=args.feedback_rounds,
    )
    app = create_app(resources)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infradiag", description="AI-infrastructure incident diagnosis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build the incident corpus from raw JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vectors", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-taxonomy", help="two-pass offline taxonomy construction")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vectors")
    p.add_argument("--llm", required=True, help="replay:<script.jsonl> or live")
    p.add_argument("--tsg", help="troubleshooting-guide labels JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_build_taxonomy)

    p = sub.add_parser("extract-checks", help="draft verification scripts from history")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vectors")
    p.add_argument("--llm", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_checks)

    p = sub.add_parser("diagnose", help="diagnose one incident end to end")
    p.add_argument("--incident", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--corpus")
    p.add_argument("--vectors")
    p.add_argument("--kb")
    p.add_argument("--env", required=True, help="sim:<scenario.json> or real")
    p.add_argument("--llm", required=True, help="replay:<script.jsonl> or live")
    p.add_argument("--feedback", default="none", help="interactive | scripted:<file> | none")
    p.add_argument("--trace", help="write the session trace JSONL here")
    p.add_argument("--ticket", help="write the escalation ticket JSON here")
    p.add_argument("--report-file", help="write the report text here")
    p.add_argument("--taxonomy-only", action="store_true", help="run the taxonomy search tier alone")
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--clock", choices=["auto", "logical", "wall"], default="auto")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized components")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("evaluate", help="run an experiment config and emit the metric report")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="start the HTTP diagnosis service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--corpus")
    p.add_argument("--vectors")
    p.add_argument("--kb")
    p.add_argument("--fixtures-dir", help="root for per-session scenario/replay paths")
    p.add_argument("--feedback-rounds", type=int, default=3)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
