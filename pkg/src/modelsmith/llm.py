"""Chat-completion backends with tool calling.

Two providers share one contract: :class:`HTTPBackend` speaks a generic
chat-completions HTTP API, and :class:`ScriptedBackend` replays a JSON Lines
script so that whole agent runs are deterministic under test.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx
import yaml

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool_result")
DEFAULT_TEMPERATURE = 1.0
TOKEN_SAFETY_MARGIN = 1.2


class BackendError(Exception):
    retryable = False


class RetryableError(BackendError):
    retryable = True


class ProtocolError(BackendError):
    pass


class UnknownToolError(ProtocolError):
    """The model asked for a tool that was not offered in the request.

    The offending response is attached so an agent loop can answer the
    call with an error result instead of aborting.
    """

    def __init__(self, message: str, response: "CompletionResponse"):
        super().__init__(message)
        self.response = response


class ScriptExhaustedError(BackendError):
    pass


class ScriptFormatError(BackendError):
    pass


class RetriesExhaustedError(BackendError):
    def __init__(self, attempts: list[BaseException]):
        self.attempts = attempts
        history = "; ".join(f"#{i + 1}: {e!r}" for i, e in enumerate(attempts))
        super().__init__(f"gave up after {len(attempts)} attempts ({history})")


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    args: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "args": self.args}


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str
    tool_call_id: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown message role {self.role!r}")
        if (self.role == "tool_result") != (self.tool_call_id is not None):
            raise ValueError("tool_call_id is required exactly for tool_result messages")
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_call_id is not None:
            d["tool_call_id"] = self.tool_call_id
        if self.tool_calls:
            d["tool_calls"] = [c.to_dict() for c in self.tool_calls]
        return d


@dataclass(frozen=True)
class ToolParam:
    name: str
    type: str = "string"
    required: bool = True
    description: str = ""


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    parameters: tuple[ToolParam, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "parameters", tuple(self.parameters))
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ValueError(f"tool {self.name}: duplicate parameter names")

    def json_schema(self) -> dict:
        return {
            "type": "object",
            "properties": {
                p.name: {"type": p.type, "description": p.description} for p in self.parameters
            },
            "required": [p.name for p in self.parameters if p.required],
        }


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    tools: tuple[ToolSchema, ...] = ()
    temperature: float = DEFAULT_TEMPERATURE
    max_output: int = 8192

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "tools", tuple(self.tools))

    def validate(self) -> None:
        if not self.messages:
            raise ProtocolError("request has no messages")
        if self.messages[0].role != "system":
            raise ProtocolError("first message must be the system prompt")
        names = [t.name for t in self.tools]
        if len(set(names)) != len(names):
            raise ProtocolError("duplicate tool names in request")
        issued: set[str] = set()
        for m in self.messages:
            issued.update(c.id for c in m.tool_calls)
            if m.role == "tool_result" and m.tool_call_id not in issued:
                raise ProtocolError(f"tool result for unknown call id {m.tool_call_id!r}")

    def input_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.input_tokens + other.input_tokens, self.output_tokens + other.output_tokens
        )


@dataclass(frozen=True)
class CompletionResponse:
    final_text: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()
    usage: Usage = Usage()
    attempts: int = field(default=1, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))
        if (self.final_text is None) == (not self.tool_calls):
            raise ProtocolError("response must carry exactly one of final text or tool calls")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "usage": {"input": self.usage.input_tokens, "output": self.usage.output_tokens}
        }
        if self.final_text is not None:
            d["final_text"] = self.final_text
        else:
            d["tool_calls"] = [c.to_dict() for c in self.tool_calls]
        return d

    def as_message(self) -> ChatMessage:
        return ChatMessage("assistant", self.final_text or "", tool_calls=self.tool_calls)


class UsageLedger:
    """Thread-safe per-run accumulation of token usage."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls: list[Usage] = []

    def record(self, usage: Usage) -> None:
        with self._lock:
            self.calls.append(usage)

    @property
    def total(self) -> Usage:
        with self._lock:
            return sum(self.calls, Usage())

    def __len__(self) -> int:
        return len(self.calls)


class ChatBackend:
    """Base class; subclasses implement :meth:`_complete`."""

    model = "unspecified"

    def __init__(self, ledger: UsageLedger | None = None):
        self.ledger = ledger or UsageLedger()

    def _complete(self, request: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        request.validate()
        response = self._complete(request)
        self.ledger.record(response.usage)
        offered = {t.name for t in request.tools}
        unknown = [c.name for c in response.tool_calls if c.name not in offered]
        if unknown:
            raise UnknownToolError(f"model called unknown tool(s): {', '.join(unknown)}", response)
        return response


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    multiplier: float = 2.0


def complete_with_retries(
    backend: ChatBackend,
    request: CompletionRequest,
    policy: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResponse:
    if policy.max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    failures: list[BaseException] = []
    delay = policy.base_delay
    for attempt in range(1, policy.max_attempts + 1):
        try:
            response = backend.complete(request)
        except BackendError as exc:
            if not exc.retryable:
                raise
            failures.append(exc)
            logger.warning("backend attempt %d failed: %s", attempt, exc)
            if attempt < policy.max_attempts:
                sleep(delay)
                delay *= policy.multiplier
            continue
        return replace(response, attempts=attempt)
    raise RetriesExhaustedError(failures)


# -- scripted provider ---------------------------------------------------------


@dataclass
class ScriptEntry:
    substring: str
    role: str | None
    response: dict
    line: int
    consumed: bool = False
    repeat: bool = False


class ScriptedBackend(ChatBackend):
    """Replays scripted responses.

    Each request is matched against the last message: the first unconsumed
    entry whose substring occurs in that message's content (and whose
    optional role filter equals its role) is consumed and returned.
    Entries marked ``repeat`` are never consumed.
    """

    model = "scripted"

    def __init__(self, entries: Sequence[ScriptEntry], ledger: UsageLedger | None = None):
        super().__init__(ledger)
        self.entries = list(entries)
        self._lock = threading.Lock()
        self.log: list[int] = []

    @classmethod
    def from_records(cls, records: Sequence[dict], **kwargs) -> "ScriptedBackend":
        return cls([_parse_entry(r, i + 1) for i, r in enumerate(records)], **kwargs)

    def remaining(self) -> int:
        return sum(not e.consumed and not e.repeat for e in self.entries)

    def _complete(self, request: CompletionRequest) -> CompletionResponse:
        last = request.messages[-1]
        with self._lock:
            for idx, entry in enumerate(self.entries):
                if entry.consumed or entry.substring not in last.content:
                    continue
                if entry.role is not None and entry.role != last.role:
                    continue
                entry.consumed = not entry.repeat
                self.log.append(idx)
                return self._respond(idx, entry, request)
        tail = last.content[-300:]
        raise ScriptExhaustedError(f"no script entry matches the {last.role} message ending: {tail!r}")

    def _respond(self, idx: int, entry: ScriptEntry, request: CompletionRequest) -> CompletionResponse:
        r = entry.response
        input_tokens = estimate_tokens(request.input_text())
        if "tool_calls" in r:
            calls = tuple(
                ToolCall(c.get("id") or f"call-{idx + 1}-{j + 1}", c["name"], dict(c.get("args") or {}))
                for j, c in enumerate(r["tool_calls"])
            )
            out = estimate_tokens(json.dumps([c.to_dict() for c in calls], sort_keys=True))
            return CompletionResponse(tool_calls=calls, usage=Usage(input_tokens, out))
        return CompletionResponse(
            final_text=r["text"], usage=Usage(input_tokens, estimate_tokens(r["text"]))
        )


def _parse_entry(record: Any, line: int) -> ScriptEntry:
    if not isinstance(record, dict):
        raise ScriptFormatError(f"line {line}: entry must be an object")
    match = record.get("match")
    response = record.get("response")
    if not isinstance(match, dict) or not isinstance(match.get("substring"), str):
        raise ScriptFormatError(f"line {line}: match.substring is required")
    if not isinstance(response, dict) or (("text" in response) == ("tool_calls" in response)):
        raise ScriptFormatError(f"line {line}: response needs exactly one of text / tool_calls")
    if "text" in response and not isinstance(response["text"], str):
        raise ScriptFormatError(f"line {line}: response.text must be a string")
    if "tool_calls" in response:
        calls = response["tool_calls"]
        if not isinstance(calls, list) or not calls:
            raise ScriptFormatError(f"line {line}: tool_calls must be a non-empty list")
        for c in calls:
            if not isinstance(c, dict) or not isinstance(c.get("name"), str):
                raise ScriptFormatError(f"line {line}: every tool call needs a name")
            if not isinstance(c.get("args", {}), dict):
                raise ScriptFormatError(f"line {line}: tool call args must be an object")
    role = match.get("role")
    if role is not None and role not in ROLES:
        raise ScriptFormatError(f"line {line}: unknown role filter {role!r}")
    repeat = record.get("repeat", False)
    if not isinstance(repeat, bool):
        raise ScriptFormatError(f"line {line}: repeat must be a boolean")
    return ScriptEntry(match["substring"], role, response, line, repeat=repeat)


def load_scripted_backend(script_path: str | os.PathLike, **kwargs) -> ScriptedBackend:
    entries = []
    with open(script_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ScriptFormatError(f"{script_path} line {lineno}: {exc.msg}") from exc
            entries.append(_parse_entry(record, lineno))
    return ScriptedBackend(entries, **kwargs)


# -- live HTTP provider ----------------------------------------------------------


@dataclass
class BackendConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    temperature: float = DEFAULT_TEMPERATURE
    max_output: int = 8192
    api_key_env: str = "MODELSMITH_API_KEY"
    timeout: float = 600.0
    context_budget_tokens: int = 160_000

    @classmethod
    def from_mapping(cls, data: dict) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


class HTTPBackend(ChatBackend):
    def __init__(
        self,
        config: BackendConfig,
        transport: httpx.BaseTransport | None = None,
        ledger: UsageLedger | None = None,
    ):
        super().__init__(ledger)
        self.config = config
        self.model = config.model
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=config.base_url, headers=headers, timeout=config.timeout, transport=transport
        )

    def _payload(self, request: CompletionRequest) -> dict:
        messages = []
        for m in request.messages:
            if m.role == "tool_result":
                messages.append({"role": "tool", "tool_call_id": m.tool_call_id, "content": m.content})
            elif m.tool_calls:
                messages.append({
                    "role": "assistant",
                    "content": m.content or None,
                    "tool_calls": [
                        {
                            "id": c.id,
                            "type": "function",
                            "function": {"name": c.name, "arguments": json.dumps(c.args)},
                        }
                        for c in m.tool_calls
                    ],
                })
            else:
                messages.append({"role": m.role, "content": m.content})
        payload = {
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }
        if request.tools:
            payload["tools"] = [
                {
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.json_schema(),
                    },
                }
                for t in request.tools
            ]
        return payload

    def _complete(self, request: CompletionRequest) -> CompletionResponse:
        try:
            resp = self._client.post("/chat/completions", json=self._payload(request))
        except httpx.TransportError as exc:
            raise RetryableError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableError(f"provider returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProtocolError(f"provider rejected request: HTTP {resp.status_code}: {resp.text[:500]}")
        try:
            body = resp.json()
            message = body["choices"][0]["message"]
            usage_raw = body.get("usage") or {}
            usage = Usage(
                int(usage_raw.get("prompt_tokens", 0)), int(usage_raw.get("completion_tokens", 0))
            )
            raw_calls = message.get("tool_calls") or []
            if raw_calls:
                calls = tuple(
                    ToolCall(
                        c["id"],
                        c["function"]["name"],
                        json.loads(c["function"].get("arguments") or "{}"),
                    )
                    for c in raw_calls
                )
                return CompletionResponse(tool_calls=calls, usage=usage)
            content = message.get("content")
            if not isinstance(content, str):
                raise ProtocolError("response has neither content nor tool calls")
            return CompletionResponse(final_text=content, usage=usage)
        except ProtocolError:
            raise
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed provider payload: {exc}") from exc


def load_backend_config(path: str | os.PathLike) -> BackendConfig:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return BackendConfig.from_mapping(data.get("backend", data))
