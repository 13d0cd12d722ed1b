#!/usr/bin/env python3
"""Generate every fixture the repo ships: the synthetic corpus, per-incident
scenarios, recorded replay scripts, golden case studies, and experiment
configs. Deterministic: rerunning produces byte-identical output.

Usage: python scripts/make_fixtures.py [fixtures_dir]
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from infradiag.builder import TwoPassBuilder, group_records_by_label
from infradiag.corpus import HashingEmbedder, IncidentRecord, IncidentStore, KnowledgeBase
from infradiag.engine import DecliningFeedback, Engine, EngineConfig, Feedback, ScriptedFeedback
from infradiag.gateway import Gateway
from infradiag.synthetic import (
    EPOCH,
    KB_SNIPPETS,
    LEAF_SPECS,
    TSG_LEAVES,
    OracleBackend,
    OracleContext,
    RecordingBackend,
    build_default_taxonomy,
    build_kb,
    build_store,
    corrupt_labels,
    scenario_for,
    synthetic_records,
    world_leaf_descriptions,
    world_truths,
)
from infradiag.util import LogicalClock, format_rfc3339
from infradiag.verify import SimulatedEnvironment, extract_instructions


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def record_session(
    taxonomy,
    registry,
    store,
    kb,
    record: IncidentRecord,
    scenario: dict,
    overrides: dict | None = None,
    feedback=None,
    config: EngineConfig | None = None,
):
    """Run one diagnosis against the oracle while recording the exchanges."""
    env = SimulatedEnvironment.from_scenario(scenario)
    ctx = OracleContext(taxonomy=taxonomy, registry=registry, env=env, **(overrides or {}))
    recorder = RecordingBackend(OracleBackend(ctx))
    gateway = Gateway(recorder, clock=LogicalClock())
    engine = Engine(
        taxonomy, store, registry, kb, gateway, env, HashingEmbedder(), config or EngineConfig()
    )
    session = engine.diagnose(record, feedback or DecliningFeedback())
    return recorder, session


def max_similarity(store: IncidentStore, text: str) -> float:
    hits = store.retrieve_similar(text, k=1, provider=HashingEmbedder())
    return hits[0].similarity if hits else 0.0


def write_base(fix: Path):
    taxonomy, registry = build_default_taxonomy()
    taxonomy.save_file(fix / "taxonomy.json")
    registry.save_file(fix / "registry.json")
    with open(fix / "kb.jsonl", "w", encoding="utf-8") as fh:
        for snippet_id, title, text in KB_SNIPPETS:
            fh.write(json.dumps({"id": snippet_id, "title": title, "text": text}) + "\n")
    write_json(
        fix / "pricing.json",
        {"chat-default": [2.50, 10.00], "reasoning-preview": [15.00, 60.00]},
    )
    write_json(
        fix / "tsg_labels.json",
        [
            {
                "label": leaf,
                "description": desc,
                "date": format_rfc3339(EPOCH.replace(year=2024, month=4, day=16)),
            }
            for leaf, (_, desc) in TSG_LEAVES.items()
        ],
    )
    return taxonomy, registry


def write_synthetic(fix: Path, taxonomy, registry):
    out = fix / "synthetic"
    (out / "scenarios").mkdir(parents=True, exist_ok=True)
    (out / "replays").mkdir(parents=True, exist_ok=True)
    records = synthetic_records()
    store = build_store(records)
    store.save(out / "corpus.jsonl", out / "corpus.vec")
    kb = build_kb()

    cases = []
    for record in records:
        scenario = scenario_for(record)
        write_json(out / "scenarios" / f"{record.id}.json", scenario)
        recorder, session = record_session(taxonomy, registry, store, kb, record, scenario)
        assert session.outcome.status == "resolved", (record.id, session.outcome.status)
        predicted = str(session.outcome.root_causes[0])
        assert predicted == str(record.root_cause), (record.id, predicted, str(record.root_cause))
        recorder.dump(out / "replays" / f"{record.id}.jsonl")
        cases.append(
            {
                "incident_id": record.id,
                "scenario": f"scenarios/{record.id}.json",
                "replay": f"replays/{record.id}.jsonl",
            }
        )
    write_json(
        out / "experiment.json",
        {
            "taxonomy": "../taxonomy.json",
            "registry": "../registry.json",
            "corpus": "corpus.jsonl",
            "vectors": "corpus.vec",
            "kb": "../kb.jsonl",
            "pricing": "../pricing.json",
            "level": "main",
            "repetitions": 1,
            "seed": 7,
            "cases": cases,
        },
    )
    return records, store, kb


def write_corrupted(fix: Path, taxonomy, registry, records, kb):
    out = fix / "synthetic"
    (out / "replays_corrupted").mkdir(parents=True, exist_ok=True)
    corrupted = corrupt_labels(records, fraction=0.2)
    changed = sum(
        1 for a, b in zip(records, corrupted) if str(a.root_cause) != str(b.root_cause)
    )
    store = build_store(corrupted)
    store.save(out / "corpus_corrupted.jsonl", out / "corpus_corrupted.vec")

    cases = []
    for record in corrupted:
        # the environment still carries the incident's REAL fault: scenarios are
        # keyed by the original records
        original = next(r for r in records if r.id == record.id)
        scenario = scenario_for(original)
        recorder, session = record_session(taxonomy, registry, store, kb, record, scenario)
        recorder.dump(out / "replays_corrupted" / f"{record.id}.jsonl")
        cases.append(
            {
                "incident_id": record.id,
                "scenario": f"scenarios/{record.id}.json",
                "replay": f"replays_corrupted/{record.id}.jsonl",
            }
        )
    write_json(
        out / "experiment_corrupted.json",
        {
            "taxonomy": "../taxonomy.json",
            "registry": "../registry.json",
            "corpus": "corpus_corrupted.jsonl",
            "vectors": "corpus_corrupted.vec",
            "kb": "../kb.jsonl",
            "pricing": "../pricing.json",
            "level": "main",
            "repetitions": 1,
            "seed": 7,
            "cases": cases,
        },
    )
    print(f"corrupted corpus: {changed} of {len(records)} labels reassigned")


EXAMPLE1_DESCRIPTION = """Distributed training deployment keeps dying; rank-0 cannot reach its peer process. Six placement retries all landed on the same suspect physical host.
Sample user log:
| batch-runner | [4] trainjob:684:1526 [0] include/socket.h:406 NCCL WARN Connect to 10.3.2.17<43981> failed : Connection refused
Rebooting the VM did not help. Customer asks for root cause."""

EXAMPLE1_SUMMARY = (
    "Distributed startup fails: rank-0 logs 'NCCL WARN Connect ... failed : Connection refused' "
    "when dialing its peer, and retries keep landing on one suspect host. The report has no deeper "
    "diagnostics, so environment checks are required."
)

EXAMPLE1_CONCLUDE = (
    "The collective layer cannot establish transport because NVLink links on the suspect host are "
    "down. NCCL_Error and NVLink_Failure are confirmed root causes; drain the host and engage the "
    "hardware team to retrain the links."
)

EXAMPLE2_DESCRIPTION = """Pretraining run aborted on node-92 with CUDA errors. Tail of the job log:
node-92: RuntimeError: CUDA error: CUBLAS_STATUS_EXECUTION_FAILED when calling `cublasGemmEx( handle, opa, opb, m, n, k, ...)`
node-92: terminate called after throwing an instance of 'c10::Error'
node-92:   what():  CUDA error: uncorrectable ECC error encountered
node-92: CUDA kernel errors might be asynchronously reported at some other API call.
Stack frames end inside the CUDA caching allocator teardown (raw_delete)."""

EXAMPLE2_SUMMARY = (
    "node-92 died mid-pretraining: cublasGemmEx raised CUBLAS_STATUS_EXECUTION_FAILED during a "
    "matrix multiply, then the process terminated with 'uncorrectable ECC error encountered' "
    "(c10::Error). The stack bottoms out in the CUDA caching allocator's raw_delete(), which "
    "points at GPU memory hardware rather than user code."
)

EXAMPLE2_CONCLUDE = (
    "ECC Error is the primary cause; Page Retirement and Xid 48 are secondary effects of the same "
    "uncorrectable memory fault. A reboot clears the volatile state; if the double-bit counter "
    "trips again the board should be replaced."
)

ESCALATION_DESCRIPTION = """Throughput on a long-running tuning sweep drifts downward over several hours, then recovers by itself. No errors or warnings anywhere in the logs.
Telemetry shows nothing unusual apart from the slowdown itself. Started after the last platform maintenance window."""

ESCALATION_SUMMARY = (
    "Gradual, self-recovering throughput regression on a tuning sweep with clean logs; began after "
    "a platform maintenance window. No error signature to match against."
)


GOLDEN_CORPUS = [
    ("HIST-7001", "Billing portal renders an empty usage chart for enterprise invoices exported as spreadsheets."),
    ("HIST-7002", "Documentation site search returns stale pages after the content refresh; index lag suspected."),
    ("HIST-7003", "License server rejects token renewal for the visualization suite on weekends only."),
    ("HIST-7004", "Email digest duplicates weekly summaries for accounts migrated between regions."),
    ("HIST-7005", "Dashboard theme preference resets whenever the settings tab is opened from a bookmark."),
]


def write_goldens(fix: Path, taxonomy, registry, kb):
    golden = fix / "golden"
    golden.mkdir(parents=True, exist_ok=True)

    # Dedicated faraway corpus: the tier-1 retrieval miss is real, not mocked.
    store = IncidentStore()
    provider = HashingEmbedder()
    for record_id, description in GOLDEN_CORPUS:
        store.ingest(
            IncidentRecord.from_json(
                {
                    "id": record_id,
                    "description": description,
                    "root_cause": "Other.GENERAL.Quota_Exceeded",
                    "created_at": "2023-06-01T00:00:00Z",
                }
            ),
            provider,
        )
    store.save(golden / "corpus.jsonl", golden / "corpus.vec")

    def write_incident(directory: Path, incident_id: str, description: str):
        directory.mkdir(parents=True, exist_ok=True)
        write_json(
            directory / "incident.json",
            {
                "id": incident_id,
                "description": description,
                "created_at": "2024-04-02T08:30:00Z",
            },
        )
        return IncidentRecord.from_json(json.loads((directory / "incident.json").read_text()))

    # retrieval must miss for all three: the tier-1 cutoff keeps these out
    for description in (EXAMPLE1_DESCRIPTION, EXAMPLE2_DESCRIPTION, ESCALATION_DESCRIPTION):
        sim = max_similarity(store, description)
        assert sim < 0.30, f"golden description too close to the corpus: {sim:.3f}"

    # Example 1: connection-refused symptom, NVLink root cause, two confirmed leaves
    d1 = golden / "example1"
    incident1 = write_incident(d1, "GOLD-NCCL-01", EXAMPLE1_DESCRIPTION)
    scenario1 = {"faults": ["nvlink_inactive"], "overrides": []}
    write_json(d1 / "scenario.json", scenario1)
    overrides1 = {
        "rank_overrides": {
            "": ["Interconnect & Networking", "System Software", "User Application"],
            "Interconnect & Networking": ["NCCL", "NVLINK"],
            "Interconnect & Networking.NCCL": ["NCCL_Error"],
            "Interconnect & Networking.NVLINK": ["NVLink_Failure"],
            "System Software": [],
            "User Application": [],
        },
        "summary_override": EXAMPLE1_SUMMARY,
        "conclude_override": EXAMPLE1_CONCLUDE,
    }
    recorder, session = record_session(taxonomy, registry, store, kb, incident1, scenario1, overrides1)
    assert session.outcome.status == "resolved" and session.outcome.resolving_pipeline == 2
    leaves = sorted(p.leaf_label for p in session.outcome.root_causes)
    assert leaves == ["NCCL_Error", "NVLink_Failure"], leaves
    assert session.usage.invocations() == 10, session.usage.invocations()
    recorder.dump(d1 / "replay.jsonl")
    session.write_trace(d1 / "trace.jsonl")

    # Example 2: ECC primary cause with two secondary effects
    d2 = golden / "example2"
    incident2 = write_incident(d2, "GOLD-ECC-02", EXAMPLE2_DESCRIPTION)
    scenario2 = {"faults": ["ecc_uncorrectable", "xid_48"], "overrides": []}
    write_json(d2 / "scenario.json", scenario2)
    overrides2 = {
        "rank_overrides": {
            "": ["GPU", "Framework & Library", "System Software"],
            "GPU": ["MEMORY", "EXECUTION"],
            "GPU.MEMORY": ["ECC Error", "Page Retirement"],
            "GPU.EXECUTION": ["Xid 48"],
            "Framework & Library": [],
            "System Software": [],
        },
        "summary_override": EXAMPLE2_SUMMARY,
        "conclude_override": EXAMPLE2_CONCLUDE,
    }
    recorder, session = record_session(taxonomy, registry, store, kb, incident2, scenario2, overrides2)
    assert session.outcome.status == "resolved" and session.outcome.resolving_pipeline == 2
    leaves = sorted(p.leaf_label for p in session.outcome.root_causes)
    assert leaves == ["ECC Error", "Page Retirement", "Xid 48"], leaves
    assert session.usage.invocations() == 11, session.usage.invocations()
    recorder.dump(d2 / "replay.jsonl")
    session.write_trace(d2 / "trace.jsonl")

    # Escalation: healthy environment, everything rejected, ticket produced
    d3 = golden / "escalation"
    incident3 = write_incident(d3, "GOLD-ESC-03", ESCALATION_DESCRIPTION)
    scenario3 = {"faults": [], "overrides": []}
    write_json(d3 / "scenario.json", scenario3)
    overrides3 = {
        "rank_overrides": {
            "": ["GPU"],
            "GPU": ["MEMORY"],
            "GPU.MEMORY": ["ECC Error", "Page Retirement"],
        },
        "summary_override": ESCALATION_SUMMARY,
    }
    recorder, session = record_session(taxonomy, registry, store, kb, incident3, scenario3, overrides3)
    assert session.outcome.status == "escalated", session.outcome.status
    assert session.ticket is not None and len(session.ticket.tested_hypotheses) == 2
    recorder.dump(d3 / "replay.jsonl")
    session.write_trace(d3 / "trace.jsonl")

    # Same escalation with a two-round feedback conversation (service fixture)
    feedback = ScriptedFeedback(
        [Feedback(Feedback.TEXT, text="suggestion 1 did not help"), Feedback(Feedback.DECLINE)]
    )
    recorder, session = record_session(
        taxonomy, registry, store, kb, incident3, scenario3, overrides3, feedback=feedback
    )
    assert session.outcome.status == "escalated"
    assert session.feedback_texts == ["suggestion 1 did not help"]
    assert len(session.suggestion_rounds) == 2
    recorder.dump(d3 / "replay_feedback.jsonl")


def write_offline_replays(fix: Path, records):
    """Replay scripts for the offline CLI demos (build-taxonomy, extract-checks)."""
    ctx = OracleContext(
        truth_by_id=world_truths(records), leaf_descriptions=world_leaf_descriptions()
    )
    recorder = RecordingBackend(OracleBackend(ctx))
    gateway = Gateway(recorder, clock=LogicalClock())
    taxonomy, report = TwoPassBuilder(gateway).build(records)
    assert not report.skipped, report.skipped
    recorder.dump(fix / "synthetic" / "build_replay.jsonl")

    recorder = RecordingBackend(OracleBackend(ctx))
    gateway = Gateway(recorder, clock=LogicalClock())
    extraction = extract_instructions(group_records_by_label(records), gateway)
    quarantined = [d for d in extraction.drafts if d.status == "quarantined"]
    assert len(quarantined) == 1 and quarantined[0].script.command == ["reboot"]
    recorder.dump(fix / "synthetic" / "extract_replay.jsonl")


def main() -> int:
    fix = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "fixtures"
    fix.mkdir(parents=True, exist_ok=True)
    taxonomy, registry = write_base(fix)
    records, store, kb = write_synthetic(fix, taxonomy, registry)
    write_corrupted(fix, taxonomy, registry, records, kb)
    write_goldens(fix, taxonomy, registry, kb)
    write_offline_replays(fix, records)
    print(f"fixtures written under {fix}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
