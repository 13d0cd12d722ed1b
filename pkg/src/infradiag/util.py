"""Shared plumbing: clocks, timestamps, canonical JSON, fenced-block parsing."""
from __future__ import annotations

import hashlib
import json
import re
from datetime import datetime, timedelta, timezone
from decimal import ROUND_HALF_UP, Decimal

RFC3339_EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def format_rfc3339(dt: datetime) -> str:
    """UTC timestamp, 'Z' suffix, microseconds only when nonzero."""
    dt = dt.astimezone(timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + "Z"


def parse_rfc3339(text: str) -> datetime:
    cleaned = text.strip()
    if cleaned.endswith(("Z", "z")):
        cleaned = cleaned[:-1] + "+00:00"
    dt = datetime.fromisoformat(cleaned)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


class WallClock:
    """Real time; used with live backends and real environments."""

    def now(self) -> datetime:
        return utc_now()


class LogicalClock:
    """Deterministic clock: each reading advances a fixed step.

    Replay-backed sessions use this so traces, ledgers, and reports are
    byte-identical across runs.
    """

    def __init__(self, start: datetime = RFC3339_EPOCH, step_seconds: float = 1.0):
        self._current = start
        self._step = timedelta(seconds=step_seconds)

    def now(self) -> datetime:
        value = self._current
        self._current = self._current + self._step
        return value


def canonical_json(obj) -> str:
    """Compact, key-sorted JSON; the input to every digest in the system."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def short_digest(obj) -> str:
    return sha256_hex(canonical_json(obj))[:12]


def stable_token_hash(token: str, salt: str = "") -> int:
    """Process-stable token hash (builtin hash() is randomized per run)."""
    digest = hashlib.blake2b((salt + token).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def round_half_up(value: float, ndigits: int) -> float:
    quant = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(value)).quantize(quant, rounding=ROUND_HALF_UP))


def extract_fenced_json(text: str):
    """Pull the first fenced JSON block out of a model reply.

    Falls back to treating the whole reply as JSON when no fence is present.
    Raises ValueError when nothing parseable is found.
    """
    match = _FENCE_RE.search(text)
    candidate = match.group(1) if match else text.strip()
    try:
        return json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise ValueError(f"no parseable JSON in reply: {exc}") from exc


def truncate_text(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    return text[: max(0, limit - 3)] + "..."
