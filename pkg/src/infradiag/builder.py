"""Offline knowledge construction: two-pass taxonomy build and check binding.

Pass 1 labels raw historical incidents in bulk; the output format is
``<main_category>.<sub_category>.<detailed_error_msg>``. Pass 2 replays those
labels against the (initially bootstrap) taxonomy in chronological order:
existing labels get their descriptions refined, new ones are appended and
stamped with the introducing incident's timestamp. Troubleshooting-guide
labels are merged afterwards. Verification extraction then drafts one or more
checks per populated leaf and binds the accepted ones.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import agents
from .corpus import IncidentRecord
from .gateway import Gateway, UsageLedger
from .taxonomy import (
    MAIN_CATEGORIES,
    MAIN_CATEGORY_ALIASES,
    Added,
    Origin,
    SchemaError,
    Taxonomy,
    TaxonomyPath,
)
from .util import parse_rfc3339
from .verify import ExtractionReport, ScriptRegistry, extract_instructions

PASS1_CHUNK_SIZE = 10


@dataclass
class BuildReport:
    added: list[str] = field(default_factory=list)
    refined: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    labels_by_incident: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "added": self.added,
            "refined": self.refined,
            "skipped": [{"subject": s, "reason": r} for s, r in self.skipped],
            "labels_by_incident": self.labels_by_incident,
        }


def _normalize_label(raw_label: str) -> TaxonomyPath:
    path = TaxonomyPath.parse(raw_label)
    main = MAIN_CATEGORY_ALIASES.get(path.main_category, path.main_category)
    if main not in MAIN_CATEGORIES:
        raise SchemaError(f"unknown main category {path.main_category!r}", raw_label)
    return TaxonomyPath((main,) + path.segments[1:])


class TwoPassBuilder:
    def __init__(self, gateway: Gateway, chunk_size: int = PASS1_CHUNK_SIZE):
        self.gateway = gateway
        self.chunk_size = chunk_size

    def build(
        self,
        records: list[IncidentRecord],
        taxonomy: Taxonomy | None = None,
        tsg_labels: list[dict] | None = None,
        ledger: UsageLedger | None = None,
    ) -> tuple[Taxonomy, BuildReport]:
        taxonomy = taxonomy if taxonomy is not None else Taxonomy.bootstrap()
        report = BuildReport()
        ordered = sorted(records, key=lambda r: (r.created_at, r.id))

        # Pass 1: initial labelling in bulk. Duplicate or conflicting labels
        # for one incident are all kept; pass 2 reconciles by refinement.
        labelled: list[tuple[IncidentRecord, str, str]] = []
        for start in range(0, len(ordered), self.chunk_size):
            chunk = ordered[start : start + self.chunk_size]
            items, note = agents.pass1_labels(chunk, self.gateway, ledger)
            if note:
                report.skipped.append((f"chunk@{start}", note))
                continue
            by_id = {r.id: r for r in chunk}
            for item in items:
                record = by_id.get(str(item["id"]))
                if record is None:
                    report.skipped.append((str(item["id"]), "label for unknown incident id"))
                    continue
                labelled.append((record, item["label"], item["description"]))
                report.labels_by_incident.setdefault(record.id, []).append(item["label"])

        # Pass 2: refinement and expansion against the live taxonomy.
        for record, raw_label, description in labelled:
            try:
                path = _normalize_label(raw_label)
            except SchemaError as exc:
                report.skipped.append((record.id, f"bad label {raw_label!r}: {exc}"))
                continue
            existing = taxonomy.lookup(path)
            if existing is not None:
                refined = agents.refine_description(
                    str(path), existing.description, description, self.gateway, ledger
                )
                taxonomy.upsert_label(path, refined, Origin.INCIDENT_DERIVED, record.created_at)
                report.refined.append(str(path))
            else:
                result = taxonomy.upsert_label(
                    path, description, Origin.INCIDENT_DERIVED, record.created_at
                )
                assert isinstance(result, Added)
                report.added.append(str(path))

        for entry in tsg_labels or []:
            try:
                path = _normalize_label(entry["label"])
                created = parse_rfc3339(entry["date"]) if entry.get("date") else None
                result = taxonomy.upsert_label(
                    path, entry.get("description", ""), Origin.TSG_DERIVED, created
                )
            except SchemaError as exc:
                report.skipped.append((entry.get("label", "?"), f"tsg: {exc}"))
                continue
            if isinstance(result, Added):
                report.added.append(str(path))
            else:
                report.refined.append(str(path))

        return taxonomy, report


def group_records_by_label(records: list[IncidentRecord]) -> dict[str, list[IncidentRecord]]:
    groups: dict[str, list[IncidentRecord]] = {}
    for record in records:
        if record.root_cause is None:
            continue
        groups.setdefault(str(record.root_cause), []).append(record)
    return groups


def bind_drafts(taxonomy: Taxonomy, extraction: ExtractionReport, registry: ScriptRegistry) -> int:
    """Promote accepted drafts into the registry and the owning nodes."""
    bound = 0
    for draft in extraction.drafts:
        if draft.status != "draft":
            continue
        node = taxonomy.lookup(draft.script.bound_path)
        if node is None:
            continue
        registry.add(draft.script)
        if draft.script.id not in node.verification:
            node.verification.append(draft.script.id)
            bound += 1
    return bound


def offline_build(
    records: list[IncidentRecord],
    gateway: Gateway,
    tsg_labels: list[dict] | None = None,
    ledger: UsageLedger | None = None,
) -> tuple[Taxonomy, ScriptRegistry, BuildReport, ExtractionReport]:
    """Full offline phase: taxonomy, then extracted and bound verification checks.

    The historical labels on the records (when present) drive extraction
    grouping; builder output labels drive the taxonomy itself.
    """
    builder = TwoPassBuilder(gateway)
    taxonomy, report = builder.build(records, tsg_labels=tsg_labels, ledger=ledger)
    registry = ScriptRegistry()
    extraction = extract_instructions(group_records_by_label(records), gateway, ledger)
    bind_drafts(taxonomy, extraction, registry)
    return taxonomy, registry, report, extraction


def load_tsg_file(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
