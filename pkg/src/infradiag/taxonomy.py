"""Hierarchical root-cause taxonomy: schema, persistence, lookup, mutation.

The tree is at most three levels deep (main category, sub-category, detailed
fault). Labels are addressed by dot-joined paths such as
``GPU.MEMORY.ECC Error``. Construction happens offline (see ``builder``);
once handed to the diagnosis engine a taxonomy is treated as read-only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Iterator

from .util import format_rfc3339, parse_rfc3339

PATH_SEPARATOR = "."
MAX_DEPTH = 3

MAIN_CATEGORIES = (
    "GPU",
    "System Software",
    "Interconnect & Networking",
    "Framework & Library",
    "User Application",
    "Other",
)

# Historical documents are inconsistent about the user-facing category name.
MAIN_CATEGORY_ALIASES = {"User": "User Application"}

AUTO_CREATED_DESCRIPTION = "(auto-created, pending refinement)"

_NODE_FIELDS = {"label", "description", "origin", "created_at", "verification", "children"}


class SchemaError(ValueError):
    """Taxonomy document or path violates the schema; carries the offending path."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{message} (at {path!r})" if path else message)
        self.path = path


class Origin(str, Enum):
    INCIDENT_DERIVED = "incident"
    TSG_DERIVED = "tsg"
    MANUAL = "manual"


@dataclass(frozen=True)
class TaxonomyPath:
    """Dot-joined label path, one to three segments deep."""

    segments: tuple[str, ...]

    def __post_init__(self):
        if not 1 <= len(self.segments) <= MAX_DEPTH:
            raise SchemaError(
                f"path depth must be 1..{MAX_DEPTH}, got {len(self.segments)}",
                PATH_SEPARATOR.join(self.segments),
            )
        for seg in self.segments:
            if not seg:
                raise SchemaError("empty path segment", PATH_SEPARATOR.join(self.segments))
            if PATH_SEPARATOR in seg:
                raise SchemaError(
                    f"segment may not contain {PATH_SEPARATOR!r}: {seg!r}", seg
                )

    @classmethod
    def parse(cls, text: str) -> "TaxonomyPath":
        return cls(tuple(text.split(PATH_SEPARATOR)))

    @classmethod
    def of(cls, *segments: str) -> "TaxonomyPath":
        return cls(tuple(segments))

    def __str__(self) -> str:
        return PATH_SEPARATOR.join(self.segments)

    @property
    def depth(self) -> int:
        return len(self.segments)

    @property
    def main_category(self) -> str:
        return self.segments[0]

    @property
    def leaf_label(self) -> str:
        return self.segments[-1]

    @property
    def parent(self) -> "TaxonomyPath | None":
        if len(self.segments) == 1:
            return None
        return TaxonomyPath(self.segments[:-1])

    def child(self, label: str) -> "TaxonomyPath":
        return TaxonomyPath(self.segments + (label,))

    def truncate(self, depth: int) -> "TaxonomyPath":
        return TaxonomyPath(self.segments[: max(1, depth)])

    def ancestors_or_self(self) -> list["TaxonomyPath"]:
        return [TaxonomyPath(self.segments[: i + 1]) for i in range(len(self.segments))]


def as_path(value: "TaxonomyPath | str") -> TaxonomyPath:
    return value if isinstance(value, TaxonomyPath) else TaxonomyPath.parse(value)


@dataclass
class TaxonomyNode:
    label: str
    description: str = ""
    origin: Origin = Origin.MANUAL
    created_at: datetime | None = None
    verification: list[str] = field(default_factory=list)
    children: list["TaxonomyNode"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def child(self, label: str) -> "TaxonomyNode | None":
        for node in self.children:
            if node.label == label:
                return node
        return None


@dataclass(frozen=True)
class Added:
    path: TaxonomyPath


@dataclass(frozen=True)
class Refined:
    path: TaxonomyPath
    old_description: str


class Taxonomy:
    """Three-level label tree with a path index kept in lockstep.

    Sibling order is insertion order and is preserved on disk; the engine
    relies on it as the deterministic tie-break when ranking children.
    """

    def __init__(self):
        self.root = TaxonomyNode(label="")
        self._index: dict[str, TaxonomyNode] = {}

    # -- construction ------------------------------------------------------

    @classmethod
    def bootstrap(cls) -> "Taxonomy":
        """Fresh taxonomy holding exactly the six main categories."""
        tax = cls()
        for label in MAIN_CATEGORIES:
            node = TaxonomyNode(label=label, origin=Origin.MANUAL)
            tax.root.children.append(node)
            tax._index[label] = node
        return tax

    @classmethod
    def load(cls, document: dict) -> "Taxonomy":
        if not isinstance(document, dict):
            raise SchemaError("taxonomy document must be an object")
        unknown = set(document) - {"version", "nodes"}
        if unknown:
            raise SchemaError(f"unknown document fields: {sorted(unknown)}")
        if document.get("version") != 1:
            raise SchemaError(f"unsupported version: {document.get('version')!r}")
        nodes = document.get("nodes")
        if not isinstance(nodes, list):
            raise SchemaError("'nodes' must be an array")

        tax = cls()
        seen_mains: list[str] = []
        for raw in nodes:
            node, label = tax._load_node(raw, parent_path="", depth=1)
            if label in seen_mains:
                raise SchemaError("duplicate sibling label", label)
            seen_mains.append(label)
            tax.root.children.append(node)
        missing = [m for m in MAIN_CATEGORIES if m not in seen_mains]
        extra = [m for m in seen_mains if m not in MAIN_CATEGORIES]
        if missing or extra:
            raise SchemaError(
                f"main categories must be exactly {list(MAIN_CATEGORIES)}; "
                f"missing={missing} extra={extra}"
            )
        tax._reorder_mains()
        return tax

    @classmethod
    def load_file(cls, path: str | Path) -> "Taxonomy":
        with open(path, encoding="utf-8") as fh:
            return cls.load(json.load(fh))

    def _load_node(self, raw, parent_path: str, depth: int) -> tuple[TaxonomyNode, str]:
        where = parent_path or "<root>"
        if not isinstance(raw, dict):
            raise SchemaError("node must be an object", where)
        unknown = set(raw) - _NODE_FIELDS
        label = raw.get("label")
        path = f"{parent_path}{PATH_SEPARATOR}{label}" if parent_path else str(label)
        if unknown:
            raise SchemaError(f"unknown node fields: {sorted(unknown)}", path)
        if not isinstance(label, str) or not label:
            raise SchemaError("node label must be a non-empty string", where)
        if PATH_SEPARATOR in label:
            raise SchemaError(f"label may not contain {PATH_SEPARATOR!r}", path)
        if depth == 1:
            label = MAIN_CATEGORY_ALIASES.get(label, label)
            path = label
        if depth > MAX_DEPTH:
            raise SchemaError(f"depth {depth} exceeds maximum {MAX_DEPTH}", path)

        created_raw = raw.get("created_at")
        node = TaxonomyNode(
            label=label,
            description=str(raw.get("description") or ""),
            origin=Origin(raw.get("origin", Origin.MANUAL.value)),
            created_at=parse_rfc3339(created_raw) if created_raw else None,
            verification=list(raw.get("verification") or []),
        )
        self._index[path] = node

        seen: set[str] = set()
        for child_raw in raw.get("children") or []:
            child, child_label = self._load_node(child_raw, path, depth + 1)
            if child_label in seen:
                raise SchemaError(
                    "duplicate sibling label", f"{path}{PATH_SEPARATOR}{child_label}"
                )
            seen.add(child_label)
            node.children.append(child)
        return node, label

    def _reorder_mains(self):
        by_label = {n.label: n for n in self.root.children}
        self.root.children = [by_label[m] for m in MAIN_CATEGORIES]

    # -- persistence -------------------------------------------------------

    def to_document(self) -> dict:
        def dump(node: TaxonomyNode) -> dict:
            return {
                "label": node.label,
                "description": node.description,
                "origin": node.origin.value,
                "created_at": format_rfc3339(node.created_at) if node.created_at else None,
                "verification": list(node.verification),
                "children": [dump(c) for c in node.children],
            }

        return {"version": 1, "nodes": [dump(n) for n in self.root.children]}

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=2, ensure_ascii=False) + "\n"

    def save_file(self, path: str | Path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def copy(self) -> "Taxonomy":
        return Taxonomy.load(self.to_document())

    # -- queries -----------------------------------------------------------

    def lookup(self, path: TaxonomyPath | str) -> TaxonomyNode | None:
        return self._index.get(str(as_path(path)))

    def __contains__(self, path) -> bool:
        return self.lookup(path) is not None

    def walk(self) -> Iterator[tuple[TaxonomyPath, TaxonomyNode]]:
        def descend(node: TaxonomyNode, prefix: tuple[str, ...]):
            for child in node.children:
                path = prefix + (child.label,)
                yield TaxonomyPath(path), child
                yield from descend(child, path)

        yield from descend(self.root, ())

    def node_count(self) -> int:
        return len(self._index)

    def leaf_paths(self) -> list[TaxonomyPath]:
        return [p for p, n in self.walk() if n.is_leaf]

    def index_paths(self) -> set[str]:
        return set(self._index)

    # -- mutation (offline construction only) ------------------------------

    def upsert_label(
        self,
        path: TaxonomyPath | str,
        description: str,
        origin: Origin = Origin.INCIDENT_DERIVED,
        created_at: datetime | None = None,
    ) -> Added | Refined:
        """Insert or refine one label.

        Missing intermediate nodes are auto-created (recorded as additions)
        when the origin is incident-derived; other origins require the parent
        to exist already.
        """
        path = as_path(path)
        if path.depth == 1:
            canonical = MAIN_CATEGORY_ALIASES.get(path.segments[0], path.segments[0])
            if canonical not in MAIN_CATEGORIES:
                raise SchemaError("new main categories are not allowed", str(path))
            path = TaxonomyPath((canonical,))

        existing = self.lookup(path)
        if existing is not None:
            old = existing.description
            existing.description = description
            return Refined(path=path, old_description=old)

        parent_path = path.parent
        if parent_path is not None and self.lookup(parent_path) is None:
            if origin is not Origin.INCIDENT_DERIVED:
                raise SchemaError("parent does not exist", str(parent_path))
            self.upsert_label(parent_path, AUTO_CREATED_DESCRIPTION, origin, created_at)

        parent_node = self.root if parent_path is None else self.lookup(parent_path)
        assert parent_node is not None
        node = TaxonomyNode(
            label=path.leaf_label,
            description=description,
            origin=origin,
            created_at=created_at,
        )
        parent_node.children.append(node)
        self._index[str(path)] = node
        return Added(path=path)

    def remove_label(self, path: TaxonomyPath | str) -> bool:
        """Detach a subtree; used to build ablated copies before publishing."""
        path = as_path(path)
        node = self.lookup(path)
        if node is None:
            return False
        parent = self.root if path.parent is None else self.lookup(path.parent)
        assert parent is not None
        parent.children = [c for c in parent.children if c.label != path.leaf_label]
        for stale in [p for p in self._index if p == str(path) or p.startswith(str(path) + PATH_SEPARATOR)]:
            del self._index[stale]
        return True

    # -- statistics --------------------------------------------------------

    def label_growth(self) -> list[tuple[str, int]]:
        """Monthly counts of label additions, zero-filled across the span.

        Additions are dated by ``created_at`` (the builder stamps nodes with
        the timestamp of the incident that introduced them), so the series
        reflects when fault types first appeared, not when the build ran.
        The six bootstrap categories are outside the count; everything else
        partitions into exactly one bucket.
        """
        dated: list[datetime] = []
        for path, node in self.walk():
            if path.depth == 1:
                continue
            if node.created_at is None:
                raise ValueError(f"node {path} has no created_at; growth is undefined")
            dated.append(node.created_at)
        if not dated:
            return []
        counts: dict[tuple[int, int], int] = {}
        for ts in dated:
            key = (ts.year, ts.month)
            counts[key] = counts.get(key, 0) + 1
        first, last = min(counts), max(counts)
        out = []
        year, month = first
        while (year, month) <= last:
            out.append((f"{year:04d}-{month:02d}", counts.get((year, month), 0)))
            month += 1
            if month == 13:
                year, month = year + 1, 1
        return out
