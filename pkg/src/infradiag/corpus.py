"""Historical incident database: records, embeddings, retrieval, statistics.

Storage is deliberately desk-scale: one JSON record per line plus a binary
sidecar of little-endian float32 vectors in the same order. Similarity is
cosine over unit vectors, so a plain dot product.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .taxonomy import TaxonomyPath, as_path
from .util import extract_fenced_json, parse_rfc3339, format_rfc3339, round_half_up, stable_token_hash

DEFAULT_DIMENSION = 256
DEFAULT_CLUSTER_THRESHOLD = 0.8

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class StorageError(RuntimeError):
    pass


class EmptyCategory(ValueError):
    pass


@dataclass
class IncidentRecord:
    id: str
    description: str
    created_at: datetime
    summary: str | None = None
    oce_discussion: str | None = None
    root_cause: TaxonomyPath | None = None
    resolved_at: datetime | None = None
    embedding: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.description:
            raise ValueError("incident description must be non-empty")
        if self.resolved_at is not None and self.resolved_at < self.created_at:
            raise ValueError("resolved_at precedes created_at")

    @property
    def ttm_hours(self) -> float | None:
        if self.resolved_at is None:
            return None
        return (self.resolved_at - self.created_at).total_seconds() / 3600.0

    @property
    def retrieval_text(self) -> str:
        return self.summary if self.summary else self.description

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "description": self.description,
            "summary": self.summary,
            "oce_discussion": self.oce_discussion,
            "root_cause": str(self.root_cause) if self.root_cause else None,
            "created_at": format_rfc3339(self.created_at),
            "resolved_at": format_rfc3339(self.resolved_at) if self.resolved_at else None,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "IncidentRecord":
        return cls(
            id=str(raw["id"]),
            description=raw["description"],
            summary=raw.get("summary"),
            oce_discussion=raw.get("oce_discussion"),
            root_cause=as_path(raw["root_cause"]) if raw.get("root_cause") else None,
            created_at=parse_rfc3339(raw["created_at"]),
            resolved_at=parse_rfc3339(raw["resolved_at"]) if raw.get("resolved_at") else None,
        )


class EmbeddingProvider(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic feature-hashing embedder.

    Lowercase, split on non-alphanumerics, hash each token into one of
    ``dimension`` buckets with a +-1 sign from a second hash, L2-normalize.
    No model weights, no network, stable across processes.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            vec[stable_token_hash("", salt="bucket") % self.dimension] = 1.0
            return vec.astype(np.float32)
        for tok in tokens:
            bucket = stable_token_hash(tok, salt="bucket") % self.dimension
            sign = 1.0 if stable_token_hash(tok, salt="sign") % 2 == 0 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[stable_token_hash("", salt="bucket") % self.dimension] = 1.0
            norm = 1.0
        return (vec / norm).astype(np.float32)


@dataclass
class RetrievalHit:
    record: IncidentRecord
    similarity: float
    rerank_position: int | None = None


class IncidentStore:
    """In-memory store over the JSONL + vector-sidecar persistence format."""

    def __init__(self):
        self._records: dict[str, IncidentRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[IncidentRecord]:
        return list(self._records.values())

    def get(self, record_id: str) -> IncidentRecord | None:
        return self._records.get(record_id)

    def ingest(self, record: IncidentRecord, provider: EmbeddingProvider) -> str:
        """Persist one record, computing its embedding; same-id replaces."""
        stored = replace(record, embedding=provider.embed(record.retrieval_text))
        self._records[record.id] = stored
        return record.id

    def retrieve_similar(
        self, query: str, k: int, provider: EmbeddingProvider
    ) -> list[RetrievalHit]:
        """Top-k by cosine similarity, ties broken by ascending id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self._records:
            return []
        ordered = sorted(self._records.values(), key=lambda r: r.id)
        matrix = np.stack([r.embedding for r in ordered])
        sims = matrix @ provider.embed(query)
        ranked = sorted(range(len(ordered)), key=lambda i: (-sims[i], ordered[i].id))
        return [
            RetrievalHit(record=ordered[i], similarity=float(sims[i]))
            for i in ranked[:k]
        ]

    # -- persistence -------------------------------------------------------

    def save(self, jsonl_path: str | Path, vector_path: str | Path | None = None):
        jsonl_path = Path(jsonl_path)
        try:
            with open(jsonl_path, "w", encoding="utf-8") as fh:
                for record in self._records.values():
                    fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
            if vector_path is not None:
                vectors = [r.embedding for r in self._records.values()]
                np.stack(vectors).astype("<f4").tofile(vector_path)
        except OSError as exc:
            raise StorageError(f"cannot persist store: {exc}") from exc

    @classmethod
    def load(
        cls,
        jsonl_path: str | Path,
        vector_path: str | Path | None = None,
        provider: EmbeddingProvider | None = None,
    ) -> "IncidentStore":
        store = cls()
        try:
            lines = Path(jsonl_path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise StorageError(f"cannot read store: {exc}") from exc
        records = [IncidentRecord.from_json(json.loads(line)) for line in lines if line.strip()]
        if vector_path is not None:
            dim = provider.dimension if provider else DEFAULT_DIMENSION
            flat = np.fromfile(vector_path, dtype="<f4")
            if flat.size != len(records) * dim:
                raise StorageError(
                    f"vector sidecar holds {flat.size} floats, expected {len(records) * dim}"
                )
            matrix = flat.reshape(len(records), dim)
            for record, vec in zip(records, matrix):
                store._records[record.id] = replace(record, embedding=vec.copy())
        else:
            if provider is None:
                raise StorageError("need a vector sidecar or an embedding provider")
            for record in records:
                store.ingest(record, provider)
        return store

    # -- statistics --------------------------------------------------------

    def recurrence_rate(self, category: str) -> float:
        """Incidents in a main category per distinct fault type in it."""
        labeled = [
            r for r in self._records.values()
            if r.root_cause is not None and r.root_cause.main_category == category
        ]
        if not labeled:
            raise EmptyCategory(f"no labeled incidents under {category!r}")
        distinct = {str(r.root_cause) for r in labeled}
        return round_half_up(len(labeled) / len(distinct), 2)


def distinct_description_clusters(
    records: Sequence[IncidentRecord],
    provider: EmbeddingProvider,
    threshold: float = DEFAULT_CLUSTER_THRESHOLD,
) -> int:
    """Greedy single-pass clustering by centroid cosine similarity.

    Records are scanned in ascending id order; each joins the first existing
    cluster whose centroid similarity reaches the threshold, else founds a
    new one.
    """
    if not records:
        raise ValueError("records must be non-empty")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    clusters: list[list[np.ndarray]] = []
    centroids: list[np.ndarray] = []
    for record in sorted(records, key=lambda r: r.id):
        vec = record.embedding
        if vec is None:
            vec = provider.embed(record.retrieval_text)
        vec = np.asarray(vec, dtype=np.float64)
        placed = False
        for i, centroid in enumerate(centroids):
            norm = np.linalg.norm(centroid)
            sim = float(centroid @ vec / norm) if norm > 0 else 0.0
            if sim >= threshold:
                clusters[i].append(vec)
                centroids[i] = np.mean(clusters[i], axis=0)
                placed = True
                break
        if not placed:
            clusters.append([vec])
            centroids.append(vec.copy())
    return len(clusters)


@dataclass
class RerankOutcome:
    hits: list[RetrievalHit]
    degraded: bool = False
    note: str | None = None


def rerank(query: str, hits: list[RetrievalHit], gateway, ledger=None, pipeline: int | None = None) -> RerankOutcome:
    """Ask the model to reorder retrieval hits; fall back to input order.

    Any malformed reply degrades to the identity permutation; the caller logs
    the degradation on the session.
    """
    from .gateway import ChatMessage, ChatRequest  # local import avoids a cycle at module load

    if not hits:
        raise ValueError("hits must be non-empty")
    if len(hits) == 1:
        hits[0].rerank_position = 1
        return RerankOutcome(hits=list(hits))

    listing = "\n".join(
        f"{i + 1}. id={h.record.id} similarity={h.similarity:.3f} :: {h.record.retrieval_text[:200]}"
        for i, h in enumerate(hits)
    )
    req = ChatRequest(
        messages=[
            ChatMessage("system", "You are the retrieval reranker for infrastructure incident search."),
            ChatMessage(
                "user",
                "Order the candidate incidents from most to least relevant to the query.\n"
                "Reply with a fenced JSON array of candidate ids, best first.\n\n"
                f"## Query\n{query}\n\n## Candidates\n{listing}\n",
            ),
        ],
        response_grammar="rerank",
    )
    try:
        resp = gateway.complete(req, ledger=ledger, role="reranker", pipeline=pipeline)
        order = extract_fenced_json(resp.text)
        if not isinstance(order, list):
            raise ValueError("ranking must be a JSON array")
        by_id = {h.record.id: h for h in hits}
        picked = [by_id[str(i)] for i in order if str(i) in by_id]
        seen = {id(h) for h in picked}
        if len(picked) != len(seen):
            raise ValueError("ranking repeats candidates")
        remainder = [h for h in hits if id(h) not in seen]
        final = picked + remainder
    except Exception as exc:  # noqa: BLE001 - degrade, never abort a session
        for i, h in enumerate(hits):
            h.rerank_position = i + 1
        return RerankOutcome(hits=list(hits), degraded=True, note=f"rerank degraded: {exc}")
    for i, h in enumerate(final):
        h.rerank_position = i + 1
    return RerankOutcome(hits=final)


@dataclass
class KbSnippet:
    id: str
    title: str
    text: str
    embedding: np.ndarray | None = None


class KnowledgeBase:
    """Domain notes (tool usage, site conventions) retrievable by similarity."""

    def __init__(self, snippets: Iterable[KbSnippet] = ()):
        self.snippets = list(snippets)

    @classmethod
    def load(cls, path: str | Path, provider: EmbeddingProvider) -> "KnowledgeBase":
        snippets = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            snippets.append(
                KbSnippet(
                    id=str(raw["id"]),
                    title=raw.get("title", ""),
                    text=raw["text"],
                    embedding=provider.embed(raw.get("title", "") + " " + raw["text"]),
                )
            )
        return cls(snippets)

    def retrieve(self, query: str, k: int, provider: EmbeddingProvider) -> list[tuple[KbSnippet, float]]:
        if not self.snippets:
            return []
        qv = provider.embed(query)
        scored = [(s, float(s.embedding @ qv)) for s in self.snippets]
        scored.sort(key=lambda pair: (-pair[1], pair[0].id))
        return scored[:k]
