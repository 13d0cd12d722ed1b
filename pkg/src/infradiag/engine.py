"""Online diagnosis orchestrator.

A session runs three pipelines strictly in order, stopping at the first that
resolves: (1) historical retrieval over the incident store, (2) recursive
depth-first search over the taxonomy with an execute/reflect loop at every
step, (3) knowledge-base exploration with rounds of human feedback. Anything
still unresolved escalates with a machine-generated ticket carrying every
hypothesis the session tested and the evidence that ruled it out.

Every observable step lands in an append-only trace; under a replay gateway
and the simulated environment the whole trace is byte-deterministic.
"""
from __future__ import annotations

import json
import queue
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from . import agents
from .agents import AgentMemory, Decision, Verdict
from .corpus import EmbeddingProvider, IncidentRecord, IncidentStore, KnowledgeBase, rerank
from .gateway import BackendUnavailable, Gateway, ReplayExhausted, UsageLedger
from .taxonomy import Taxonomy, TaxonomyNode, TaxonomyPath
from .util import canonical_json, format_rfc3339, short_digest
from .verify import Outcome, ScriptRegistry, verify_node


@dataclass(frozen=True)
class Feedback:
    kind: str  # "accept" | "decline" | "text"
    text: str | None = None

    ACCEPT = "accept"
    DECLINE = "decline"
    TEXT = "text"


class FeedbackProvider(Protocol):
    max_rounds: int

    def next_feedback(self, suggestions: list[str]) -> Feedback: ...


class DecliningFeedback:
    """Headless default: one suggestion round for the ticket, then decline."""

    def __init__(self, max_rounds: int = 1):
        self.max_rounds = max_rounds

    def next_feedback(self, suggestions: list[str]) -> Feedback:
        return Feedback(Feedback.DECLINE)


class ScriptedFeedback:
    def __init__(self, actions: list[Feedback], max_rounds: int | None = None):
        self.actions = list(actions)
        self.max_rounds = max_rounds if max_rounds is not None else len(self.actions)
        self._pos = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedFeedback":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([Feedback(kind=item["action"], text=item.get("text")) for item in raw])

    def next_feedback(self, suggestions: list[str]) -> Feedback:
        if self._pos >= len(self.actions):
            return Feedback(Feedback.DECLINE)
        action = self.actions[self._pos]
        self._pos += 1
        return action


class QueueFeedback:
    """Single-producer handoff used by the HTTP service."""

    def __init__(self, max_rounds: int = 3):
        self.max_rounds = max_rounds
        self._queue: "queue.Queue[Feedback]" = queue.Queue(maxsize=1)

    def submit(self, feedback: Feedback):
        self._queue.put(feedback)

    def next_feedback(self, suggestions: list[str]) -> Feedback:
        return self._queue.get()


@dataclass
class TraceEvent:
    seq: int
    ts: str
    type: str
    payload: dict

    def to_json_line(self) -> str:
        return canonical_json({"seq": self.seq, "ts": self.ts, "type": self.type, "payload": self.payload})


@dataclass
class TestedHypothesis:
    path: TaxonomyPath
    decision: str
    rationale: str
    evidence_digests: list[str]
    pipeline: int

    def to_json(self) -> dict:
        return {
            "path": str(self.path),
            "decision": self.decision,
            "rationale": self.rationale,
            "evidence_digests": list(self.evidence_digests),
            "pipeline": self.pipeline,
        }


@dataclass
class Ticket:
    incident_digest: str
    incident_summary: str
    tested_hypotheses: list[TestedHypothesis]
    traversal_summary: dict
    suggestions: list[dict]
    feedback: list[str]
    created_at: str

    def to_json(self) -> dict:
        return {
            "incident_digest": self.incident_digest,
            "incident_summary": self.incident_summary,
            "tested_hypotheses": [t.to_json() for t in self.tested_hypotheses],
            "traversal_summary": self.traversal_summary,
            "suggestions": self.suggestions,
            "feedback": list(self.feedback),
            "created_at": self.created_at,
        }


@dataclass
class DiagnosisOutcome:
    status: str  # "resolved" | "advised" | "escalated"
    resolving_pipeline: int | None
    root_causes: list[TaxonomyPath] = field(default_factory=list)
    suggestions: list[str] = field(default_factory=list)
    ticket: Ticket | None = None

    RESOLVED = "resolved"
    ADVISED = "advised"
    ESCALATED = "escalated"


@dataclass
class EngineConfig:
    retrieval_k: int = 2
    # Below this cosine similarity a hit is a retrieval miss (configuration,
    # not ground truth; tuned for the hashing embedder).
    s_min: float = 0.30
    kb_k: int = 3
    llm_budget: int = 64
    summary_max_chars: int = 1200
    # Non-standard shortcut: stop exploring siblings once a leaf confirms.
    # Default search exhausts all feasible branches.
    stop_after_first_confirmed: bool = False
    # Evaluation mode running the taxonomy search alone (no retrieval tier).
    taxonomy_only: bool = False


class _BudgetExhausted(Exception):
    pass


class _StopExploration(Exception):
    pass


class DiagnosisSession:
    def __init__(self, incident: IncidentRecord, clock):
        self.id = f"S{uuid.uuid4().hex[:12]}"
        self.incident = incident
        self.clock = clock
        self.memory = AgentMemory(description=incident.description)
        self.trace: list[TraceEvent] = []
        self.usage = UsageLedger()
        self.verification_ledger: list[tuple[str, float]] = []
        self.tested: list[TestedHypothesis] = []
        self.suggestion_rounds: list[dict] = []
        self.feedback_texts: list[str] = []
        self.summary: str = incident.description
        self.status: str = "running"
        self.outcome: DiagnosisOutcome | None = None
        self.report: str = ""
        self.ticket: Ticket | None = None
        self.listeners: list[Callable[[TraceEvent], None]] = []
        self._seq = 0

    def emit(self, event_type: str, **payload) -> TraceEvent:
        self._seq += 1
        event = TraceEvent(
            seq=self._seq,
            ts=format_rfc3339(self.clock.now()),
            type=event_type,
            payload=payload,
        )
        self.trace.append(event)
        for listener in self.listeners:
            listener(event)
        return event

    def set_outcome(self, outcome: DiagnosisOutcome):
        if self.outcome is not None:
            raise RuntimeError("outcome already set")
        self.outcome = outcome

    def verification_seconds(self) -> float:
        return sum(seconds for _, seconds in self.verification_ledger)

    def trace_lines(self) -> list[str]:
        return [e.to_json_line() for e in self.trace]

    def write_trace(self, path):
        Path(path).write_text("\n".join(self.trace_lines()) + "\n", encoding="utf-8")


class Engine:
    def __init__(
        self,
        taxonomy: Taxonomy,
        store: IncidentStore,
        registry: ScriptRegistry,
        kb: KnowledgeBase,
        gateway: Gateway,
        env,
        provider: EmbeddingProvider,
        config: EngineConfig | None = None,
    ):
        self.taxonomy = taxonomy
        self.store = store
        self.registry = registry
        self.kb = kb
        self.gateway = gateway
        self.env = env
        self.provider = provider
        self.config = config or EngineConfig()

    # -- session entry point -------------------------------------------------

    def diagnose(
        self,
        incident: IncidentRecord,
        feedback: FeedbackProvider | None = None,
        session: DiagnosisSession | None = None,
    ) -> DiagnosisSession:
        feedback = feedback or DecliningFeedback()
        if session is None:
            session = DiagnosisSession(incident, self.gateway.clock)
        session.emit("session_started", incident_id=incident.id)

        self._summarize(session)

        root_causes: list[TaxonomyPath] = []
        resolving = None
        if not self.config.taxonomy_only:
            root_causes = self._pipeline1(session)
            if root_causes:
                resolving = 1
        if not root_causes:
            root_causes = self._pipeline2(session)
            if root_causes:
                resolving = 2

        if root_causes:
            session.set_outcome(
                DiagnosisOutcome(
                    status=DiagnosisOutcome.RESOLVED,
                    resolving_pipeline=resolving,
                    root_causes=root_causes,
                )
            )
        else:
            session.set_outcome(self._pipeline3(session, feedback))

        outcome = session.outcome
        session.emit(
            "outcome",
            status=outcome.status,
            resolving_pipeline=outcome.resolving_pipeline,
            root_causes=[str(p) for p in outcome.root_causes],
        )
        self._conclude(session)
        session.status = "finished"
        session.emit("session_finished")
        return session

    # -- agents with engine-side degradation ----------------------------------

    def _summarize(self, session: DiagnosisSession):
        try:
            result = agents.summarize(
                session.incident.description,
                self.gateway,
                session.usage,
                max_chars=self.config.summary_max_chars,
            )
            session.summary = result.text
            degraded = result.degraded
        except (BackendUnavailable, ReplayExhausted) as exc:
            session.summary = session.incident.description[: self.config.summary_max_chars]
            session.emit("degradation", where="summarize", note=str(exc))
            degraded = True
        session.memory.summary = session.summary
        session.emit("summary", text=session.summary, degraded=degraded)

    def _conclude(self, session: DiagnosisSession):
        outcome = session.outcome
        status_line = {
            DiagnosisOutcome.RESOLVED: f"resolved by pipeline {outcome.resolving_pipeline}",
            DiagnosisOutcome.ADVISED: "advised: the customer accepted a diagnostic suggestion",
            DiagnosisOutcome.ESCALATED: "unresolved: escalated to the infrastructure support team",
        }[outcome.status]
        tested_rows = [
            f"{t.path} -> {t.decision} ({t.rationale})" if t.rationale else f"{t.path} -> {t.decision}"
            for t in session.tested
        ]
        try:
            narrative = agents.conclude(
                session.memory.incident_text(),
                status_line,
                [str(p) for p in outcome.root_causes],
                tested_rows,
                self.gateway,
                session.usage,
            )
        except (BackendUnavailable, ReplayExhausted) as exc:
            session.emit("degradation", where="conclude", note=str(exc))
            narrative = ""
        session.report = self._render_report(session, narrative)
        session.emit("report", text=session.report)

    def _render_report(self, session: DiagnosisSession, narrative: str) -> str:
        outcome = session.outcome
        lines = ["== Incident Diagnosis Report ==", f"Incident: {session.incident.id}"]
        if outcome.status == DiagnosisOutcome.RESOLVED:
            lines.append(f"Status: RESOLVED (pipeline {outcome.resolving_pipeline})")
            lines.append("Validated root causes:")
            for path in outcome.root_causes:
                digests = session.memory.confirmed.get(str(path), [])
                cited = ", ".join(e.digest for e in digests) or "-"
                lines.append(f"  - {path}  [evidence: {cited}]")
        elif outcome.status == DiagnosisOutcome.ADVISED:
            lines.append("Status: ADVISED (pipeline 3)")
            lines.append("Accepted suggestions:")
            for s in outcome.suggestions:
                lines.append(f"  - {s} (execution requires human intervention)")
        else:
            lines.append("Status: UNRESOLVED (escalated)")
        lines.append("Tested hypotheses:")
        if session.tested:
            for t in session.tested:
                digests = ", ".join(t.evidence_digests) or "-"
                lines.append(f"  - {t.path} | {t.decision} | evidence: {digests}")
        else:
            lines.append("  (none)")
        if narrative:
            lines.append("Narrative:")
            lines.append(narrative)
        return "\n".join(lines)

    # -- pipeline 1: historical retrieval -------------------------------------

    def _pipeline1(self, session: DiagnosisSession) -> list[TaxonomyPath]:
        session.emit("pipeline_started", pipeline=1)
        confirmed = self._run_pipeline1(session)
        session.emit(
            "pipeline_finished",
            pipeline=1,
            result="resolved" if confirmed else "fall_through",
        )
        return confirmed

    def _run_pipeline1(self, session: DiagnosisSession) -> list[TaxonomyPath]:
        if len(self.store) == 0:
            session.emit("retrieval", hits=[], note="empty corpus")
            return []
        hits = self.store.retrieve_similar(session.summary, self.config.retrieval_k, self.provider)
        hits = [h for h in hits if h.similarity >= self.config.s_min]
        if not hits:
            session.emit("retrieval", hits=[], note=f"no hit above cutoff {self.config.s_min}")
            return []
        outcome = rerank(session.summary, hits, self.gateway, session.usage, pipeline=1)
        if outcome.degraded:
            session.emit("degradation", where="rerank", note=outcome.note)
        hits = outcome.hits
        session.emit(
            "retrieval",
            hits=[
                {
                    "id": h.record.id,
                    "similarity": round(h.similarity, 6),
                    "rerank_position": h.rerank_position,
                    "root_cause": str(h.record.root_cause) if h.record.root_cause else None,
                }
                for h in hits
            ],
        )

        confirmed: list[TaxonomyPath] = []
        seen: set[str] = set()
        for hit in hits:
            path = hit.record.root_cause
            if path is None or str(path) in seen:
                continue
            seen.add(str(path))
            if self.taxonomy.lookup(path) is None:
                session.emit("degradation", where="pipeline1", note=f"label {path} not in taxonomy")
                continue
            verdict = self._test_hypothesis(session, path, pipeline=1)
            if verdict.decision == Decision.CONFIRMED:
                confirmed.append(path)
        return confirmed

    def _test_hypothesis(self, session: DiagnosisSession, path: TaxonomyPath, pipeline: int) -> Verdict:
        overall, results = verify_node(
            path, self.taxonomy, self.registry, self.env, time_ledger=session.verification_ledger
        )
        entries = session.memory.push_branch(path, results)
        session.emit(
            "evidence_collected",
            pipeline=pipeline,
            path=str(path),
            overall=overall.value,
            results=[{"script_id": r.script_id, "outcome": r.outcome.value, "digest": r.digest()} for r in results],
            memory=session.memory.branch_paths(),
            note="failing checks support the hypothesis" if overall == Outcome.FAIL else None,
        )
        try:
            if entries:
                try:
                    verdict = agents.reflect(path, entries, session.memory, self.gateway, session.usage, pipeline)
                except (BackendUnavailable, ReplayExhausted) as exc:
                    verdict = Verdict(Decision.INCONCLUSIVE, "", [], note=f"backend: {exc}")
            else:
                verdict = Verdict(Decision.INCONCLUSIVE, "no verification evidence collected", [], note="no-evidence")
            if verdict.decision == Decision.CONFIRMED:
                session.memory.record_confirmed(path)
            self._record_verdict(session, path, verdict, pipeline)
        finally:
            session.memory.pop_branch(path)
        return verdict

    def _record_verdict(self, session: DiagnosisSession, path: TaxonomyPath, verdict: Verdict, pipeline: int):
        digest_by_id = {e.id: e.digest for e in session.memory.all_entries()}
        digests = [digest_by_id[i] for i in verdict.cited_evidence if i in digest_by_id]
        if not digests:
            digests = [e.digest for e in session.memory.frames[-1].entries] if session.memory.frames else []
        session.tested.append(
            TestedHypothesis(
                path=path,
                decision=verdict.decision,
                rationale=verdict.rationale,
                evidence_digests=digests,
                pipeline=pipeline,
            )
        )
        session.emit(
            "verdict",
            pipeline=pipeline,
            path=str(path),
            decision=verdict.decision,
            rationale=verdict.rationale,
            cited_evidence=verdict.cited_evidence,
            note=verdict.note,
            memory=session.memory.branch_paths(),
        )

    # -- pipeline 2: taxonomy-guided search ------------------------------------

    def _pipeline2(self, session: DiagnosisSession) -> list[TaxonomyPath]:
        session.emit("pipeline_started", pipeline=2)
        found: list[TaxonomyPath] = []
        try:
            self._explore_node(session, None, self.taxonomy.root, found)
        except _BudgetExhausted:
            session.emit("budget_exceeded", limit=self.config.llm_budget)
        except _StopExploration:
            pass
        session.emit(
            "pipeline_finished",
            pipeline=2,
            result="resolved" if found else "fall_through",
        )
        return found

    def _guard_budget(self, session: DiagnosisSession):
        if session.usage.invocations() >= self.config.llm_budget:
            raise _BudgetExhausted()

    def _explore_node(
        self,
        session: DiagnosisSession,
        path: TaxonomyPath | None,
        node: TaxonomyNode,
        found: list[TaxonomyPath],
    ):
        memory = session.memory
        session.emit(
            "node_entered",
            pipeline=2,
            path=str(path) if path else "",
            memory=memory.branch_paths(),
        )

        if path is not None and node.is_leaf:
            entries = memory.all_entries()
            if entries:
                self._guard_budget(session)
                try:
                    verdict = agents.reflect(path, entries, memory, self.gateway, session.usage, pipeline=2)
                except (BackendUnavailable, ReplayExhausted) as exc:
                    verdict = Verdict(Decision.INCONCLUSIVE, "", [], note=f"backend: {exc}")
            else:
                verdict = Verdict(Decision.INCONCLUSIVE, "no verification evidence collected", [], note="no-evidence")
            if verdict.decision == Decision.CONFIRMED:
                memory.record_confirmed(path)
                found.append(path)
            self._record_verdict(session, path, verdict, pipeline=2)
            if verdict.decision == Decision.CONFIRMED and self.config.stop_after_first_confirmed:
                raise _StopExploration()
            return

        self._guard_budget(session)
        try:
            ranked = agents.rank_children(path, node, memory, self.gateway, session.usage, pipeline=2)
        except (BackendUnavailable, ReplayExhausted) as exc:
            ranked = agents.RankedHypotheses(
                ordered=[], pruned=[c.label for c in node.children], early_stop=True, note=f"backend: {exc}"
            )
        session.emit(
            "hypotheses_ranked",
            pipeline=2,
            path=str(path) if path else "",
            ordered=ranked.ordered,
            pruned=ranked.pruned,
            early_stop=ranked.early_stop,
            note=ranked.note,
            memory=memory.branch_paths(),
        )
        for label in ranked.pruned:
            session.emit(
                "branch_pruned",
                pipeline=2,
                path=str(path) if path else "",
                child=label,
                memory=memory.branch_paths(),
            )
        if ranked.early_stop:
            session.emit(
                "early_stop",
                pipeline=2,
                path=str(path) if path else "",
                note=ranked.note,
                memory=memory.branch_paths(),
            )
            return

        for label in ranked.ordered:
            child = node.child(label)
            child_path = path.child(label) if path else TaxonomyPath.of(label)
            overall, results = verify_node(
                child_path, self.taxonomy, self.registry, self.env, time_ledger=session.verification_ledger
            )
            memory.push_branch(child_path, results)
            session.emit(
                "evidence_collected",
                pipeline=2,
                path=str(child_path),
                overall=overall.value,
                results=[
                    {"script_id": r.script_id, "outcome": r.outcome.value, "digest": r.digest()}
                    for r in results
                ],
                memory=memory.branch_paths(),
                note="failing checks support the hypothesis" if overall == Outcome.FAIL else None,
            )
            try:
                self._explore_node(session, child_path, child, found)
            finally:
                memory.pop_branch(child_path)
                session.emit(
                    "backtrack",
                    pipeline=2,
                    path=str(path) if path else "",
                    from_path=str(child_path),
                    memory=memory.branch_paths(),
                )

    # -- pipeline 3: exploration with feedback ---------------------------------

    def _pipeline3(self, session: DiagnosisSession, feedback: FeedbackProvider) -> DiagnosisOutcome:
        session.emit("pipeline_started", pipeline=3)
        snippets = self.kb.retrieve(session.summary, self.config.kb_k, self.provider)
        kb_texts = [f"{s.title}: {s.text}" if s.title else s.text for s, _ in snippets]
        trace_summary = "\n".join(f"{t.path}: {t.decision}" for t in session.tested)

        feedback_text: str | None = None
        advised: list[str] | None = None
        for round_no in range(1, feedback.max_rounds + 1):
            try:
                result = agents.explore(
                    session.memory.incident_text(),
                    trace_summary,
                    kb_texts,
                    feedback_text,
                    self.gateway,
                    session.usage,
                )
            except (BackendUnavailable, ReplayExhausted) as exc:
                session.emit("degradation", where="explore", note=str(exc))
                break
            if result.degraded:
                session.emit("degradation", where="explore", note=result.note)
                break
            session.suggestion_rounds.append(
                {
                    "round": round_no,
                    "hypotheses": result.hypotheses,
                    "suggestions": [
                        {"text": s, "requires_human_execution": True} for s in result.suggestions
                    ],
                }
            )
            session.emit(
                "suggestions",
                pipeline=3,
                round=round_no,
                hypotheses=result.hypotheses,
                suggestions=result.suggestions,
            )
            session.status = "awaiting_feedback"
            session.emit("awaiting_feedback", round=round_no)
            answer = feedback.next_feedback(result.suggestions)
            session.status = "running"
            session.emit("feedback", round=round_no, kind=answer.kind, text=answer.text)
            if answer.kind == Feedback.ACCEPT:
                advised = result.suggestions
                break
            if answer.kind == Feedback.DECLINE:
                break
            feedback_text = answer.text or ""
            session.feedback_texts.append(feedback_text)

        if advised is not None:
            session.emit("pipeline_finished", pipeline=3, result="advised")
            return DiagnosisOutcome(
                status=DiagnosisOutcome.ADVISED, resolving_pipeline=3, suggestions=advised
            )
        ticket = self.create_ticket(session)
        session.ticket = ticket
        session.emit("ticket_created", incident_digest=ticket.incident_digest)
        session.emit("pipeline_finished", pipeline=3, result="escalated")
        return DiagnosisOutcome(status=DiagnosisOutcome.ESCALATED, resolving_pipeline=None, ticket=ticket)

    # -- escalation ------------------------------------------------------------

    def create_ticket(self, session: DiagnosisSession) -> Ticket:
        entered = [e.payload["path"] for e in session.trace if e.type == "node_entered"]
        pruned = sum(1 for e in session.trace if e.type == "branch_pruned")
        early_stops = sum(1 for e in session.trace if e.type == "early_stop")
        suggestions = [s for round_ in session.suggestion_rounds for s in round_["suggestions"]]
        return Ticket(
            incident_digest=short_digest(
                {"id": session.incident.id, "description": session.incident.description}
            ),
            incident_summary=session.summary,
            tested_hypotheses=list(session.tested),
            traversal_summary={
                "nodes_entered": entered,
                "branches_pruned": pruned,
                "early_stops": early_stops,
                "llm_invocations": session.usage.invocations(),
                "verification_seconds": round(session.verification_seconds(), 3),
            },
            suggestions=suggestions,
            feedback=list(session.feedback_texts),
            created_at=format_rfc3339(session.clock.now()),
        )
