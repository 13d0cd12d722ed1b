"""Agent roles over the gateway: summarization, planning, reflection,
conclusion, exploration, plus the offline labelling/refinement/extraction
calls used by the taxonomy builder.

Each role is a versioned prompt template plus a strict parser. Parsers never
leak partially-parsed state: an answer either validates against the role's
JSON schema (shipped under ``schemas/``) or triggers a bounded repair loop,
after which the call degrades to a safe value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from string import Template

import jsonschema

from .gateway import ChatMessage, ChatRequest, Gateway, UsageLedger
from .taxonomy import TaxonomyNode, TaxonomyPath, MAIN_CATEGORIES
from .util import extract_fenced_json, truncate_text

PARSE_REPAIR_RETRIES = 2
DEFAULT_SUMMARY_CHARS = 1200

_TEMPLATE_CACHE: dict[str, tuple[str, Template]] = {}
_SCHEMA_CACHE: dict[str, dict] = {}


def load_template(name: str) -> tuple[str, Template]:
    """Return (system text, user template) for a prompt file."""
    if name not in _TEMPLATE_CACHE:
        raw = resources.files("infradiag.prompts").joinpath(f"{name}.txt").read_text("utf-8")
        head, _, user = raw.partition("---user---")
        lines = head.strip().splitlines()
        system = "\n".join(lines[1:]).strip()  # first line is the version marker
        _TEMPLATE_CACHE[name] = (system, Template(user.strip()))
    return _TEMPLATE_CACHE[name]


def load_schema(name: str) -> dict:
    if name not in _SCHEMA_CACHE:
        raw = resources.files("infradiag.schemas").joinpath(f"{name}.json").read_text("utf-8")
        _SCHEMA_CACHE[name] = json.loads(raw)
    return _SCHEMA_CACHE[name]


def load_playbook() -> str:
    return resources.files("infradiag.data").joinpath("troubleshooting_playbook.md").read_text("utf-8")


def render(name: str, **fields: str) -> tuple[str, str]:
    system, template = load_template(name)
    return system, template.substitute(**fields)


# ---------------------------------------------------------------------------
# memory

@dataclass(frozen=True)
class EvidenceEntry:
    id: str
    path: str
    script_id: str
    outcome: str
    stdout_snippet: str
    digest: str


@dataclass
class BranchFrame:
    path: TaxonomyPath
    entries: list[EvidenceEntry] = field(default_factory=list)


class AgentMemory:
    """Session-confined working memory mirroring the current search path.

    One frame per branch on the active path; frames (and their evidence) are
    dropped when the branch is exited, so stack depth always equals search
    depth. Evidence supporting a confirmed leaf is snapshotted separately for
    the conclusion agent before the stack unwinds.
    """

    def __init__(self, description: str, summary: str | None = None):
        self.description = description
        self.summary = summary
        self.frames: list[BranchFrame] = []
        self.confirmed: dict[str, list[EvidenceEntry]] = {}
        self._next_eid = 1

    @property
    def depth(self) -> int:
        return len(self.frames)

    def branch_paths(self) -> list[str]:
        return [str(f.path) for f in self.frames]

    def push_branch(self, path: TaxonomyPath, results) -> list[EvidenceEntry]:
        entries = []
        for result in results:
            entries.append(
                EvidenceEntry(
                    id=f"E{self._next_eid}",
                    path=str(path),
                    script_id=result.script_id,
                    outcome=result.outcome.value,
                    stdout_snippet=truncate_text(result.stdout.strip(), 200),
                    digest=result.digest(),
                )
            )
            self._next_eid += 1
        self.frames.append(BranchFrame(path=path, entries=entries))
        return entries

    def pop_branch(self, path: TaxonomyPath):
        if not self.frames or str(self.frames[-1].path) != str(path):
            raise RuntimeError(f"branch stack out of order; popping {path}")
        self.frames.pop()

    def all_entries(self) -> list[EvidenceEntry]:
        return [e for frame in self.frames for e in frame.entries]

    def record_confirmed(self, path: TaxonomyPath):
        self.confirmed[str(path)] = list(self.all_entries())

    def incident_text(self) -> str:
        if self.summary and self.summary != self.description:
            return f"{self.summary}\n(original description digest follows)\n{truncate_text(self.description, 400)}"
        return self.description


def render_evidence(entries: list[EvidenceEntry]) -> str:
    if not entries:
        return "(none yet)"
    return "\n".join(
        f"- [{e.id}] path={e.path} script={e.script_id} outcome={e.outcome} stdout: {e.stdout_snippet}"
        for e in entries
    )


# ---------------------------------------------------------------------------
# structured-call plumbing

class MalformedOutput(ValueError):
    pass


def _structured_call(
    gateway: Gateway,
    ledger: UsageLedger | None,
    role: str,
    pipeline: int | None,
    system: str,
    user: str,
    grammar: str,
    semantic_check,
):
    """Call the model, parse a fenced JSON answer, repair a bounded number of times.

    ``semantic_check(parsed) -> value`` raises MalformedOutput to trigger repair.
    Raises MalformedOutput after the retries are spent; callers degrade.
    """
    schema = load_schema(grammar)
    messages = [ChatMessage("system", system), ChatMessage("user", user)]
    last_error = "no attempt"
    for _ in range(1 + PARSE_REPAIR_RETRIES):
        req = ChatRequest(messages=list(messages), response_grammar=grammar)
        resp = gateway.complete(req, ledger=ledger, role=role, pipeline=pipeline)
        try:
            parsed = extract_fenced_json(resp.text)
            jsonschema.validate(parsed, schema)
            return semantic_check(parsed)
        except (ValueError, jsonschema.ValidationError) as exc:
            last_error = str(exc)
            messages = messages + [
                ChatMessage("assistant", resp.text),
                ChatMessage(
                    "user",
                    "Your reply was not valid: "
                    + truncate_text(last_error, 300)
                    + "\nAnswer again with only a fenced JSON block matching this schema:\n"
                    + json.dumps(schema, sort_keys=True),
                ),
            ]
    raise MalformedOutput(last_error)


# ---------------------------------------------------------------------------
# online roles

@dataclass
class SummaryOutcome:
    text: str
    degraded: bool = False
    invoked_llm: bool = True


def summarize(
    description: str,
    gateway: Gateway,
    ledger: UsageLedger | None = None,
    max_chars: int = DEFAULT_SUMMARY_CHARS,
) -> SummaryOutcome:
    """Condense a raw incident report; single short lines pass through as-is."""
    if not description:
        raise ValueError("description must be non-empty")
    if "\n" not in description.strip() and len(description) <= max_chars:
        return SummaryOutcome(text=description.strip(), invoked_llm=False)
    system, user = render("summarize", max_chars=str(max_chars), description=description)
    req = ChatRequest(messages=[ChatMessage("system", system), ChatMessage("user", user)])
    resp = gateway.complete(req, ledger=ledger, role="summarizer", pipeline=None)
    text = resp.text.strip()
    if not text:
        return SummaryOutcome(text=truncate_text(description, max_chars), degraded=True)
    return SummaryOutcome(text=truncate_text(text, max_chars))


@dataclass
class RankedHypotheses:
    ordered: list[str]
    pruned: list[str]
    early_stop: bool
    note: str | None = None


def rank_children(
    node_path: TaxonomyPath | None,
    node: TaxonomyNode,
    memory: AgentMemory,
    gateway: Gateway,
    ledger: UsageLedger | None = None,
    pipeline: int | None = 2,
) -> RankedHypotheses:
    """Rank a node's children most-to-least likely; omissions are pruned.

    Labels not among the children are dropped by the parser (the model picks
    from a fixed choice set, it never invents labels). An empty surviving
    ranking is the early-stop signal for the whole branch.
    """
    if not node.children:
        raise ValueError("rank_children requires at least one child")
    labels = [c.label for c in node.children]
    candidates = "\n".join(
        f"{i + 1}. {c.label}: {truncate_text(c.description or '(no description)', 160)}"
        for i, c in enumerate(node.children)
    )
    system, user = render(
        "rank_children",
        node=str(node_path) if node_path else "(taxonomy root)",
        candidates=candidates,
        incident=memory.incident_text(),
        evidence=render_evidence(memory.all_entries()),
    )

    def check(parsed) -> list[str]:
        seen: list[str] = []
        for item in parsed:
            if item in labels and item not in seen:
                seen.append(item)
        return seen

    try:
        ordered = _structured_call(gateway, ledger, "planner", pipeline, system, user, "ranking", check)
    except MalformedOutput as exc:
        return RankedHypotheses(
            ordered=[], pruned=list(labels), early_stop=True, note=f"malformed-output: {exc}"
        )
    pruned = [l for l in labels if l not in ordered]
    return RankedHypotheses(ordered=ordered, pruned=pruned, early_stop=not ordered)


class Decision:
    CONFIRMED = "confirmed"
    REJECTED = "rejected"
    INCONCLUSIVE = "inconclusive"


@dataclass
class Verdict:
    decision: str
    rationale: str
    cited_evidence: list[str]
    note: str | None = None


def reflect(
    hypothesis: TaxonomyPath,
    evidence: list[EvidenceEntry],
    memory: AgentMemory,
    gateway: Gateway,
    ledger: UsageLedger | None = None,
    pipeline: int | None = 2,
) -> Verdict:
    """Judge a hypothesis on collected evidence; never called without any."""
    if not evidence:
        raise ValueError("reflect requires non-empty evidence")
    valid_ids = {e.id for e in evidence}
    system, user = render(
        "reflect",
        hypothesis=str(hypothesis),
        incident=memory.incident_text(),
        evidence=render_evidence(evidence),
    )

    def check(parsed) -> Verdict:
        cited = [str(i) for i in parsed["evidence_ids"]]
        if parsed["decision"] in (Decision.CONFIRMED, Decision.REJECTED):
            cited = [c for c in cited if c in valid_ids]
            if not cited:
                raise MalformedOutput("confirmed/rejected verdicts must cite known evidence ids")
        return Verdict(decision=parsed["decision"], rationale=parsed["rationale"], cited_evidence=cited)

    try:
        return _structured_call(gateway, ledger, "reflector", pipeline, system, user, "verdict", check)
    except MalformedOutput as exc:
        return Verdict(
            decision=Decision.INCONCLUSIVE,
            rationale="",
            cited_evidence=[],
            note=f"malformed-output: {exc}",
        )


def conclude(
    incident_text: str,
    outcome_line: str,
    root_causes: list[str],
    tested_rows: list[str],
    gateway: Gateway,
    ledger: UsageLedger | None = None,
) -> str:
    system, user = render(
        "conclude",
        incident=incident_text,
        outcome=outcome_line,
        root_causes="\n".join(f"- {r}" for r in root_causes) or "(none)",
        tested="\n".join(f"- {r}" for r in tested_rows) or "(none)",
    )
    req = ChatRequest(messages=[ChatMessage("system", system), ChatMessage("user", user)])
    resp = gateway.complete(req, ledger=ledger, role="concluder", pipeline=None)
    return resp.text.strip()


@dataclass
class ExploreResult:
    hypotheses: list[str]
    suggestions: list[str]
    degraded: bool = False
    note: str | None = None


def explore(
    incident_text: str,
    trace_summary: str,
    kb_snippets: list[str],
    feedback: str | None,
    gateway: Gateway,
    ledger: UsageLedger | None = None,
) -> ExploreResult:
    """Free-form hypothesis and suggestion generation for the last-resort pipeline.

    Suggestions are advice only; execution stays with the human operator.
    """
    system, user = render(
        "explore",
        incident=incident_text,
        trace_summary=trace_summary or "(none)",
        kb="\n".join(f"- {s}" for s in kb_snippets) or "(no domain notes matched)",
        playbook=load_playbook(),
        feedback=feedback or "(none yet)",
    )

    def check(parsed) -> ExploreResult:
        return ExploreResult(
            hypotheses=[str(h) for h in parsed["hypotheses"]],
            suggestions=[str(s) for s in parsed["suggestions"]],
        )

    try:
        return _structured_call(gateway, ledger, "explorer", 3, system, user, "explore", check)
    except MalformedOutput as exc:
        return ExploreResult(hypotheses=[], suggestions=[], degraded=True, note=f"malformed-output: {exc}")


# ---------------------------------------------------------------------------
# offline roles (taxonomy builder, verification extraction)

def pass1_labels(records, gateway: Gateway, ledger: UsageLedger | None = None) -> tuple[list[dict], str | None]:
    """Initial labelling over a batch of historical incidents."""
    listing = []
    for r in records:
        discussion = truncate_text(r.oce_discussion or "(no discussion)", 400)
        listing.append(f"- id={r.id}\n  description: {truncate_text(r.description, 400)}\n  discussion: {discussion}")
    system, user = render(
        "pass1_label",
        main_categories=", ".join(MAIN_CATEGORIES),
        incidents="\n".join(listing),
    )

    def check(parsed) -> list[dict]:
        return [dict(item) for item in parsed]

    try:
        return _structured_call(gateway, ledger, "labeler", None, system, user, "pass1", check), None
    except MalformedOutput as exc:
        return [], f"malformed-output: {exc}"


def refine_description(
    label: str, existing: str, candidate: str, gateway: Gateway, ledger: UsageLedger | None = None
) -> str:
    system, user = render("refine_description", label=label, existing=existing, candidate=candidate)
    req = ChatRequest(messages=[ChatMessage("system", system), ChatMessage("user", user)])
    resp = gateway.complete(req, ledger=ledger, role="refiner", pipeline=None)
    text = resp.text.strip()
    return text if text else existing


def extract_checks(
    label: str, discussions: list[str], gateway: Gateway, ledger: UsageLedger | None = None
) -> tuple[list[dict], str | None]:
    """Draft verification commands out of on-call discussions for one label."""
    system, user = render(
        "extract_checks",
        label=label,
        discussions="\n".join(f"- {truncate_text(d, 500)}" for d in discussions),
    )

    def check(parsed) -> list[dict]:
        return [dict(item) for item in parsed]

    try:
        return _structured_call(gateway, ledger, "extractor", None, system, user, "extraction", check), None
    except MalformedOutput as exc:
        return [], f"malformed-output: {exc}"
