"""LLM traffic chokepoint: chat contract, live and replay backends, cost model.

Every completion in the system flows through :class:`Gateway` so that token
usage, durations, and per-agent attribution land in one append-only ledger.
The replay backend makes whole diagnosis sessions bit-deterministic, which is
what the golden-trace tests and the evaluation harness rely on.
"""
from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import httpx

from .util import LogicalClock, WallClock, canonical_json, round_half_up, sha256_hex

ENV_ENDPOINT = "INFRADIAG_LLM_ENDPOINT"
ENV_API_KEY = "INFRADIAG_LLM_API_KEY"
ENV_MODEL = "INFRADIAG_LLM_MODEL"
ENV_TIMEOUT = "INFRADIAG_LLM_TIMEOUT"

DEFAULT_MODEL_TAG = "chat-default"

logger = logging.getLogger(__name__)


class BackendUnavailable(RuntimeError):
    pass


class ReplayExhausted(RuntimeError):
    pass


class UnknownModel(KeyError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass
class ChatRequest:
    messages: list[ChatMessage]
    model_tag: str = DEFAULT_MODEL_TAG
    temperature: float = 0.0
    max_output_tokens: int = 1024
    response_grammar: str | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("message list must be non-empty")
        if self.messages[0].role != "system":
            raise ValueError("first message must be system-role")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def digest(self) -> str:
        return sha256_hex(
            canonical_json(
                {
                    "messages": [[m.role, m.content] for m in self.messages],
                    "model_tag": self.model_tag,
                    "temperature": self.temperature,
                    "max_output_tokens": self.max_output_tokens,
                    "response_grammar": self.response_grammar,
                }
            )
        )


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
        )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: TokenUsage
    backend: str


@dataclass(frozen=True)
class LedgerEntry:
    role: str
    pipeline: int | None
    request_digest: str
    model_tag: str
    usage: TokenUsage
    duration_seconds: float


class UsageLedger:
    """Append-only per-session record of every LLM invocation."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: LedgerEntry):
        with self._lock:
            self._entries.append(entry)

    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def invocations(self) -> int:
        return len(self.entries())

    def totals(self) -> TokenUsage:
        total = TokenUsage()
        for entry in self.entries():
            total = total + entry.usage
        return total

    def totals_by_model(self) -> dict[str, TokenUsage]:
        out: dict[str, TokenUsage] = {}
        for entry in self.entries():
            out[entry.model_tag] = out.get(entry.model_tag, TokenUsage()) + entry.usage
        return out


def approximate_usage(req: ChatRequest, text: str) -> TokenUsage:
    """Whitespace-token count scaled by 4/3; used when a script omits usage."""

    def count(s: str) -> int:
        words = len(s.split())
        return int(math.floor(words * 4 / 3 + 0.5))

    prompt = " ".join(m.content for m in req.messages)
    return TokenUsage(input_tokens=count(prompt), output_tokens=count(text))


class Backend(Protocol):
    name: str

    def complete(self, req: ChatRequest) -> tuple[str, TokenUsage | None]: ...


class ReplayBackend:
    """Deterministic backend replaying scripted exchanges.

    Script lines look like ``{"digest": ..., "request_summary": ...,
    "response_text": ..., "usage": {...}}``. Entries with a digest are matched
    by request digest (catching prompt drift); entries with a null digest form
    a sequential cursor for hand-written scenarios. Single-session use only.
    """

    name = "replay"

    def __init__(self, entries: list[dict]):
        self._by_digest: dict[str, list[dict]] = {}
        self._cursor: list[dict] = []
        for entry in entries:
            if entry.get("digest"):
                self._by_digest.setdefault(entry["digest"], []).append(entry)
            else:
                self._cursor.append(entry)
        self._cursor_pos = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        entries = [
            json.loads(line)
            for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        return cls(entries)

    def complete(self, req: ChatRequest) -> tuple[str, TokenUsage | None]:
        digest = req.digest()
        bucket = self._by_digest.get(digest)
        if bucket:
            entry = bucket.pop(0)
        elif self._cursor_pos < len(self._cursor):
            entry = self._cursor[self._cursor_pos]
            self._cursor_pos += 1
        else:
            raise ReplayExhausted(
                f"no scripted exchange for request {digest[:12]} "
                f"(grammar={req.response_grammar!r})"
            )
        usage = entry.get("usage")
        if usage is not None:
            usage = TokenUsage(int(usage["input_tokens"]), int(usage["output_tokens"]))
        return entry["response_text"], usage


class LiveBackend:
    """De-facto chat-completions HTTP backend, configured via environment.

    Retries transport failures and 5xx responses with exponential backoff;
    anything else surfaces as :class:`BackendUnavailable`.
    """

    name = "live"

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model_tag: str | None = None,
        timeout: float | None = None,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT, "")
        self.api_key = api_key or os.environ.get(ENV_API_KEY, "")
        self.model_tag = model_tag or os.environ.get(ENV_MODEL, DEFAULT_MODEL_TAG)
        self.timeout = timeout if timeout is not None else float(os.environ.get(ENV_TIMEOUT, "60"))
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        if not self.endpoint:
            raise BackendUnavailable(f"no endpoint configured ({ENV_ENDPOINT} unset)")

    def complete(self, req: ChatRequest) -> tuple[str, TokenUsage | None]:
        body = {
            "model": req.model_tag or self.model_tag,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                if resp.status_code >= 500:
                    last_error = BackendUnavailable(f"server error {resp.status_code}")
                elif resp.status_code >= 400:
                    raise BackendUnavailable(f"request rejected: {resp.status_code} {resp.text[:200]}")
                else:
                    payload = resp.json()
                    text = payload["choices"][0]["message"]["content"]
                    usage = payload.get("usage") or {}
                    return text, TokenUsage(
                        int(usage.get("prompt_tokens", 0)),
                        int(usage.get("completion_tokens", 0)),
                    )
            except BackendUnavailable:
                raise
            except Exception as exc:  # noqa: BLE001 - transport errors retry
                last_error = exc
            if attempt + 1 < self.max_attempts:
                delay = self.backoff_base * (2**attempt)
                logger.warning(
                    "live backend attempt %d/%d failed (%s); retrying in %.1fs",
                    attempt + 1, self.max_attempts, last_error, delay,
                )
                time.sleep(delay)
        raise BackendUnavailable(
            f"live backend failed after {self.max_attempts} attempts: {last_error}"
        )


class Gateway:
    """Routes completions to a backend and accounts for them in a ledger."""

    def __init__(self, backend: Backend, clock: WallClock | LogicalClock | None = None):
        self.backend = backend
        self.clock = clock or WallClock()

    def complete(
        self,
        req: ChatRequest,
        ledger: UsageLedger | None = None,
        role: str = "",
        pipeline: int | None = None,
    ) -> ChatResponse:
        started = self.clock.now()
        text, usage = self.backend.complete(req)
        finished = self.clock.now()
        if usage is None:
            usage = approximate_usage(req, text)
        if ledger is not None:
            ledger.append(
                LedgerEntry(
                    role=role,
                    pipeline=pipeline,
                    request_digest=req.digest(),
                    model_tag=req.model_tag,
                    usage=usage,
                    duration_seconds=(finished - started).total_seconds(),
                )
            )
        return ChatResponse(text=text, usage=usage, backend=self.backend.name)


@dataclass
class PricingConfig:
    """USD per million input/output tokens, keyed by model tag."""

    rates: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "PricingConfig":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib  # Python >= 3.11
            except ModuleNotFoundError:
                import tomli as tomllib
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        else:
            raw = json.loads(path.read_text(encoding="utf-8"))
        rates = {}
        for tag, pair in raw.items():
            if isinstance(pair, dict):
                rates[tag] = (float(pair["input_usd_per_million"]), float(pair["output_usd_per_million"]))
            else:
                rates[tag] = (float(pair[0]), float(pair[1]))
        return cls(rates=rates)


def cost(totals: Mapping[str, TokenUsage | tuple[float, float]], pricing: PricingConfig) -> float:
    """Linear API cost over per-model token totals, rounded half-up to cents of a cent.

    Totals may be fractional (per-incident averages are) so plain float pairs
    are accepted alongside :class:`TokenUsage`.
    """
    total = 0.0
    for tag, usage in totals.items():
        if tag not in pricing.rates:
            raise UnknownModel(tag)
        in_rate, out_rate = pricing.rates[tag]
        if isinstance(usage, TokenUsage):
            in_tok, out_tok = usage.input_tokens, usage.output_tokens
        else:
            in_tok, out_tok = usage
        total += in_tok * in_rate / 1e6 + out_tok * out_rate / 1e6
    return round_half_up(total, 3)
