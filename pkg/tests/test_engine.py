from __future__ import annotations

import json
from datetime import datetime, timezone

import pytest

from infradiag.corpus import HashingEmbedder, IncidentRecord, IncidentStore, KnowledgeBase
from infradiag.engine import (
    DecliningFeedback,
    DiagnosisOutcome,
    Engine,
    EngineConfig,
    Feedback,
    ScriptedFeedback,
)
from infradiag.gateway import Gateway, ReplayBackend
from infradiag.synthetic import (
    OracleBackend,
    OracleContext,
    build_kb,
    scenario_for,
)
from infradiag.taxonomy import Origin, Taxonomy, TaxonomyPath
from infradiag.util import LogicalClock
from infradiag.verify import RuleKind, ScriptRegistry, SimulatedEnvironment, SuccessRule, VerificationScript

TS = datetime(2024, 2, 2, tzinfo=timezone.utc)
PROVIDER = HashingEmbedder()


def incident(description="something broke badly", record_id="I-1") -> IncidentRecord:
    return IncidentRecord(id=record_id, description=description, created_at=TS)


def tiny_world():
    """Taxonomy with one populated chain plus probe scripts."""
    taxonomy = Taxonomy.bootstrap()
    taxonomy.upsert_label("GPU.MEMORY.ECC Error", "double-bit ecc", Origin.INCIDENT_DERIVED, TS)
    taxonomy.upsert_label("GPU.MEMORY.Page Retirement", "page retirement", Origin.INCIDENT_DERIVED, TS)
    taxonomy.upsert_label("GPU.HARDWARE.Missing_GPU", "gpu missing", Origin.INCIDENT_DERIVED, TS)
    registry = ScriptRegistry()
    for path, command in [
        ("GPU.MEMORY.ECC Error", ["ecc-check"]),
        ("GPU.MEMORY.Page Retirement", ["retired-pages-check"]),
        ("GPU.HARDWARE.Missing_GPU", ["nvidia-smi"]),
    ]:
        sid = f"leaf-{path.split('.')[-1].lower().replace(' ', '-')}"
        registry.add(
            VerificationScript(
                id=sid,
                bound_path=TaxonomyPath.parse(path),
                level="leaf",
                command=command,
                timeout=300.0,
                success_rule=SuccessRule(RuleKind.EXIT_ZERO),
            )
        )
        taxonomy.lookup(path).verification.append(sid)
    return taxonomy, registry


def make_engine(
    taxonomy,
    registry,
    env,
    store=None,
    kb=None,
    config=None,
    rank_overrides=None,
    reflect_overrides=None,
):
    ctx = OracleContext(
        taxonomy=taxonomy,
        registry=registry,
        env=env,
        rank_overrides=rank_overrides or {},
        reflect_overrides=reflect_overrides or {},
    )
    gateway = Gateway(OracleBackend(ctx), clock=LogicalClock())
    return Engine(
        taxonomy,
        store if store is not None else IncidentStore(),
        registry,
        kb if kb is not None else KnowledgeBase(),
        gateway,
        env,
        PROVIDER,
        config or EngineConfig(),
    )


def events(session, event_type):
    return [e for e in session.trace if e.type == event_type]


class TestPipeline2Core:
    def test_smallest_instance_resolves_single_leaf(self):
        taxonomy, registry = tiny_world()
        env = SimulatedEnvironment(faults=["ecc_uncorrectable"])
        engine = make_engine(
            taxonomy,
            registry,
            env,
            config=EngineConfig(taxonomy_only=True),
            rank_overrides={"": ["GPU"], "GPU": ["MEMORY"], "GPU.MEMORY": ["ECC Error"]},
        )
        session = engine.diagnose(incident())
        assert session.outcome.status == DiagnosisOutcome.RESOLVED
        assert session.outcome.resolving_pipeline == 2
        assert [str(p) for p in session.outcome.root_causes] == ["GPU.MEMORY.ECC Error"]
        assert session.memory.depth == 0

    def test_all_rejected_falls_through_with_empty_stack(self):
        taxonomy, registry = tiny_world()
        engine = make_engine(
            taxonomy,
            registry,
            SimulatedEnvironment(),  # healthy: every reflect rejects
            config=EngineConfig(taxonomy_only=True),
            rank_overrides={
                "": ["GPU"],
                "GPU": ["MEMORY", "HARDWARE"],
                "GPU.MEMORY": ["ECC Error", "Page Retirement"],
                "GPU.HARDWARE": ["Missing_GPU"],
            },
        )
        session = engine.diagnose(incident(), DecliningFeedback(max_rounds=0))
        assert session.outcome.status == DiagnosisOutcome.ESCALATED
        verdicts = events(session, "verdict")
        assert all(v.payload["decision"] == "rejected" for v in verdicts)
        assert len(verdicts) == 3
        assert session.memory.depth == 0

    def test_early_exit_flag_stops_sibling_exploration(self):
        taxonomy, registry = tiny_world()
        env = SimulatedEnvironment(faults=["ecc_uncorrectable"])
        overrides = {
            "": ["GPU"],
            "GPU": ["MEMORY", "HARDWARE"],
            "GPU.MEMORY": ["ECC Error", "Page Retirement"],
            "GPU.HARDWARE": ["Missing_GPU"],
        }
        full = make_engine(
            taxonomy, registry, env, config=EngineConfig(taxonomy_only=True), rank_overrides=overrides
        ).diagnose(incident())
        # ecc fault also trips the retirement and nvidia-smi probes
        assert len(full.outcome.root_causes) == 3
        quick = make_engine(
            taxonomy,
            registry,
            env,
            config=EngineConfig(taxonomy_only=True, stop_after_first_confirmed=True),
            rank_overrides=overrides,
        ).diagnose(incident())
        assert [str(p) for p in quick.outcome.root_causes] == ["GPU.MEMORY.ECC Error"]
        assert len(events(quick, "node_entered")) < len(events(full, "node_entered"))
        assert quick.memory.depth == 0

    def test_budget_exhaustion_records_and_falls_through(self):
        taxonomy, registry = tiny_world()
        engine = make_engine(
            taxonomy,
            registry,
            SimulatedEnvironment(faults=["ecc_uncorrectable"]),
            config=EngineConfig(taxonomy_only=True, llm_budget=2),
            rank_overrides={"": ["GPU"], "GPU": ["MEMORY"], "GPU.MEMORY": ["ECC Error"]},
        )
        session = engine.diagnose(incident(), DecliningFeedback(max_rounds=0))
        assert events(session, "budget_exceeded")
        assert session.outcome.status == DiagnosisOutcome.ESCALATED
        assert session.memory.depth == 0

    def test_leaf_without_evidence_is_inconclusive_without_llm(self):
        taxonomy = Taxonomy.bootstrap()
        taxonomy.upsert_label("Other.GENERAL.Oddity", "odd", Origin.INCIDENT_DERIVED, TS)
        engine = make_engine(
            taxonomy,
            ScriptRegistry(),
            SimulatedEnvironment(),
            config=EngineConfig(taxonomy_only=True),
            rank_overrides={"": ["Other"], "Other": ["GENERAL"], "Other.GENERAL": ["Oddity"]},
        )
        session = engine.diagnose(incident(), DecliningFeedback(max_rounds=0))
        verdict = events(session, "verdict")[0]
        assert verdict.payload["decision"] == "inconclusive"
        assert verdict.payload["note"] == "no-evidence"

    def test_trace_seq_strictly_increasing_and_outcome_set_once(self):
        taxonomy, registry = tiny_world()
        engine = make_engine(
            taxonomy,
            registry,
            SimulatedEnvironment(faults=["ecc_uncorrectable"]),
            config=EngineConfig(taxonomy_only=True),
            rank_overrides={"": ["GPU"], "GPU": ["MEMORY"], "GPU.MEMORY": ["ECC Error"]},
        )
        session = engine.diagnose(incident())
        seqs = [e.seq for e in session.trace]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
        with pytest.raises(RuntimeError):
            session.set_outcome(session.outcome)


class TestPipeline1:
    def _store_with(self, *records):
        store = IncidentStore()
        for record in records:
            store.ingest(record, PROVIDER)
        return store

    def test_duplicate_incident_resolves_without_pipeline2(self):
        taxonomy, registry = tiny_world()
        stored = IncidentRecord(
            id="H-1",
            description="uncorrectable ecc error on node seven",
            created_at=TS,
            root_cause=TaxonomyPath.parse("GPU.MEMORY.ECC Error"),
        )
        engine = make_engine(
            taxonomy,
            registry,
            SimulatedEnvironment(faults=["ecc_uncorrectable"]),
            store=self._store_with(stored),
        )
        session = engine.diagnose(incident("uncorrectable ecc error on node seven"))
        assert session.outcome.resolving_pipeline == 1
        assert [str(p) for p in session.outcome.root_causes] == ["GPU.MEMORY.ECC Error"]
        assert not events(session, "pipeline_started") or all(
            e.payload["pipeline"] != 2 for e in events(session, "pipeline_started")
        )

    def test_hits_with_rejected_verdicts_fall_through_to_pipeline2(self):
        taxonomy, registry = tiny_world()
        stored = IncidentRecord(
            id="H-1",
            description="uncorrectable ecc error on node seven",
            created_at=TS,
            root_cause=TaxonomyPath.parse("GPU.MEMORY.ECC Error"),
        )
        engine = make_engine(
            taxonomy,
            registry,
            SimulatedEnvironment(),  # healthy: hypothesis rejected
            store=self._store_with(stored),
            rank_overrides={"": []},
        )
        session = engine.diagnose(incident("uncorrectable ecc error on node seven"), DecliningFeedback(0))
        pipelines = [e.payload["pipeline"] for e in events(session, "pipeline_started")]
        assert pipelines == [1, 2, 3]

    def test_empty_corpus_falls_through(self):
        taxonomy, registry = tiny_world()
        engine = make_engine(taxonomy, registry, SimulatedEnvironment(), rank_overrides={"": []})
        session = engine.diagnose(incident(), DecliningFeedback(0))
        retrieval = events(session, "retrieval")[0]
        assert retrieval.payload["hits"] == []
        assert retrieval.payload["note"] == "empty corpus"

    def test_unknown_label_hit_is_skipped(self):
        taxonomy, registry = tiny_world()
        stored = IncidentRecord(
            id="H-1",
            description="uncorrectable ecc error on node seven",
            created_at=TS,
            root_cause=TaxonomyPath.parse("GPU.STALE.Gone_Label"),
        )
        engine = make_engine(
            taxonomy,
            registry,
            SimulatedEnvironment(faults=["ecc_uncorrectable"]),
            store=self._store_with(stored),
            rank_overrides={"": []},
        )
        session = engine.diagnose(incident("uncorrectable ecc error on node seven"), DecliningFeedback(0))
        degradations = [e.payload["note"] for e in events(session, "degradation")]
        assert any("not in taxonomy" in note for note in degradations)
        assert session.outcome.status == DiagnosisOutcome.ESCALATED


class TestPipeline3:
    def _engine(self, feedback_unused=None):
        taxonomy, registry = tiny_world()
        return make_engine(
            taxonomy,
            registry,
            SimulatedEnvironment(),
            kb=build_kb(),
            rank_overrides={"": []},
        )

    def test_accept_first_round_is_advised(self):
        engine = self._engine()
        session = engine.diagnose(incident(), ScriptedFeedback([Feedback(Feedback.ACCEPT)]))
        assert session.outcome.status == DiagnosisOutcome.ADVISED
        assert session.outcome.resolving_pipeline == 3
        assert session.outcome.suggestions
        assert session.ticket is None

    def test_two_text_rounds_then_decline_escalates_with_feedback(self):
        engine = self._engine()
        feedback = ScriptedFeedback(
            [
                Feedback(Feedback.TEXT, text="tried the first walk-through"),
                Feedback(Feedback.TEXT, text="second idea also failed"),
                Feedback(Feedback.DECLINE),
            ]
        )
        session = engine.diagnose(incident(), feedback)
        assert session.outcome.status == DiagnosisOutcome.ESCALATED
        ticket = session.ticket
        assert ticket.feedback == ["tried the first walk-through", "second idea also failed"]
        assert len(session.suggestion_rounds) == 3

    def test_zero_rounds_escalates_immediately(self):
        engine = self._engine()
        session = engine.diagnose(incident(), DecliningFeedback(max_rounds=0))
        assert session.outcome.status == DiagnosisOutcome.ESCALATED
        assert session.suggestion_rounds == []
        assert not events(session, "suggestions")


class TestTicket:
    def test_ticket_lists_every_rejected_hypothesis(self):
        taxonomy, registry = tiny_world()
        engine = make_engine(
            taxonomy,
            registry,
            SimulatedEnvironment(),
            config=EngineConfig(taxonomy_only=True),
            rank_overrides={
                "": ["GPU"],
                "GPU": ["MEMORY", "HARDWARE"],
                "GPU.MEMORY": ["ECC Error", "Page Retirement"],
                "GPU.HARDWARE": ["Missing_GPU"],
            },
        )
        session = engine.diagnose(incident(), DecliningFeedback(max_rounds=0))
        ticket = session.ticket
        rejected_in_trace = {
            e.payload["path"] for e in events(session, "verdict") if e.payload["decision"] == "rejected"
        }
        rejected_in_ticket = {
            str(t.path) for t in ticket.tested_hypotheses if t.decision == "rejected"
        }
        assert rejected_in_trace == rejected_in_ticket == {
            "GPU.MEMORY.ECC Error",
            "GPU.MEMORY.Page Retirement",
            "GPU.HARDWARE.Missing_GPU",
        }
        assert all(t.evidence_digests for t in ticket.tested_hypotheses)

    def test_degenerate_ticket_before_any_hypothesis(self):
        taxonomy, registry = tiny_world()
        engine = make_engine(
            taxonomy, registry, SimulatedEnvironment(), config=EngineConfig(taxonomy_only=True),
            rank_overrides={"": []},
        )
        session = engine.diagnose(incident("vague one line issue"), DecliningFeedback(max_rounds=0))
        ticket = session.ticket
        assert ticket.tested_hypotheses == []
        assert ticket.incident_summary == "vague one line issue"

    def test_ticket_serializes(self):
        taxonomy, registry = tiny_world()
        engine = make_engine(
            taxonomy, registry, SimulatedEnvironment(), config=EngineConfig(taxonomy_only=True),
            rank_overrides={"": []},
        )
        session = engine.diagnose(incident(), DecliningFeedback(max_rounds=0))
        doc = json.loads(json.dumps(session.ticket.to_json()))
        assert set(doc) == {
            "incident_digest",
            "incident_summary",
            "tested_hypotheses",
            "traversal_summary",
            "suggestions",
            "feedback",
            "created_at",
        }


def ancestors_or_self(path: str) -> list[str]:
    if not path:
        return []
    parts = path.split(".")
    return [".".join(parts[: i + 1]) for i in range(len(parts))]


class TestGoldenFixtures:
    def _run(self, fixtures_dir, name):
        directory = fixtures_dir / "golden" / name
        record = IncidentRecord.from_json(json.loads((directory / "incident.json").read_text()))
        taxonomy = Taxonomy.load_file(fixtures_dir / "taxonomy.json")
        registry = ScriptRegistry.from_file(fixtures_dir / "registry.json")
        store = IncidentStore.load(
            fixtures_dir / "golden" / "corpus.jsonl", fixtures_dir / "golden" / "corpus.vec", PROVIDER
        )
        kb = KnowledgeBase.load(fixtures_dir / "kb.jsonl", PROVIDER)
        gateway = Gateway(ReplayBackend.from_file(directory / "replay.jsonl"), clock=LogicalClock())
        env = SimulatedEnvironment.from_file(directory / "scenario.json")
        engine = Engine(taxonomy, store, registry, kb, gateway, env, PROVIDER)
        return engine.diagnose(record)

    def test_example1_resolves_both_interconnect_leaves(self, fixtures_dir):
        session = self._run(fixtures_dir, "example1")
        assert session.outcome.status == DiagnosisOutcome.RESOLVED
        assert session.outcome.resolving_pipeline == 2
        assert sorted(p.leaf_label for p in session.outcome.root_causes) == [
            "NCCL_Error",
            "NVLink_Failure",
        ]
        pruned_at_root = {
            e.payload["child"] for e in events(session, "branch_pruned") if e.payload["path"] == ""
        }
        assert pruned_at_root == {"GPU", "Framework & Library", "Other"}
        early_stopped = {e.payload["path"] for e in events(session, "early_stop")}
        assert early_stopped == {"System Software", "User Application"}
        assert session.usage.invocations() == 10
        # soundness: every resolved path has a confirmed verdict citing evidence
        for path in session.outcome.root_causes:
            matching = [
                e
                for e in events(session, "verdict")
                if e.payload["path"] == str(path) and e.payload["decision"] == "confirmed"
            ]
            assert matching and all(e.payload["cited_evidence"] for e in matching)

    def test_example2_resolves_ecc_cluster(self, fixtures_dir):
        session = self._run(fixtures_dir, "example2")
        assert sorted(p.leaf_label for p in session.outcome.root_causes) == [
            "ECC Error",
            "Page Retirement",
            "Xid 48",
        ]
        assert session.usage.invocations() == 11
        assert "ECC Error is the primary cause" in session.report
        assert "secondary effects" in session.report

    def test_escalation_ticket_and_unresolved_report(self, fixtures_dir):
        session = self._run(fixtures_dir, "escalation")
        assert session.outcome.status == DiagnosisOutcome.ESCALATED
        assert "UNRESOLVED" in session.report
        assert len(session.ticket.tested_hypotheses) == 2

    def test_memory_scoping_on_golden_traces(self, fixtures_dir):
        for name in ("example1", "example2", "escalation"):
            session = self._run(fixtures_dir, name)
            for event in session.trace:
                if event.payload.get("pipeline") == 2 and "memory" in event.payload:
                    anchor = event.payload.get("to_path", event.payload.get("path", ""))
                    assert event.payload["memory"] == ancestors_or_self(anchor), event
            assert session.memory.depth == 0

    def test_verification_time_ledger_is_additive(self, fixtures_dir):
        session = self._run(fixtures_dir, "example1")
        assert session.verification_seconds() == pytest.approx(
            sum(seconds for _, seconds in session.verification_ledger)
        )
        assert session.verification_seconds() > 0
