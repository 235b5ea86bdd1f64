"""The tool-calling agent loop and its transcripts."""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

from ..llm import (
    TOKEN_SAFETY_MARGIN,
    BackendError,
    ChatBackend,
    ChatMessage,
    CompletionRequest,
    CompletionResponse,
    RetryPolicy,
    ToolCall,
    ToolSchema,
    UnknownToolError,
    Usage,
    complete_with_retries,
    estimate_tokens,
)

logger = logging.getLogger(__name__)

OUTCOMES = ("completed", "step_limit", "budget_exhausted", "failed", "no_candidates")
DEFAULT_CONTEXT_BUDGET = 160_000


class ToolError(Exception):
    """Raised by a tool handler; becomes an error tool result."""


class ContextOverflowError(Exception):
    pass


class BudgetView(Protocol):
    def exhausted(self) -> bool: ...

    def remaining(self) -> float: ...


@dataclass(frozen=True)
class AgentRole:
    name: str
    allowed_tools: frozenset[str]
    max_steps: int
    prompt: str = ""

    def __post_init__(self):
        object.__setattr__(self, "allowed_tools", frozenset(self.allowed_tools))
        if not self.prompt:
            object.__setattr__(self, "prompt", self.name)


class Deferred:
    """A tool result computed later, possibly concurrently with sibling calls."""

    def __init__(self, fn: Callable[[], str]):
        self.fn = fn


@dataclass
class Tool:
    schema: ToolSchema
    handler: Callable[[dict], "str | Deferred"]

    @property
    def name(self) -> str:
        return self.schema.name


class ToolRegistry:
    def __init__(self, tools: Iterable[Tool] = ()):
        self.tools: dict[str, Tool] = {}
        for t in tools:
            self.add(t)

    def add(self, tool: Tool) -> None:
        if tool.name in self.tools:
            raise ValueError(f"duplicate tool {tool.name}")
        self.tools[tool.name] = tool

    def __contains__(self, name: str) -> bool:
        return name in self.tools

    def schemas(self, names: Iterable[str]) -> tuple[ToolSchema, ...]:
        return tuple(self.tools[n].schema for n in sorted(names) if n in self.tools)


@dataclass
class ToolExecution:
    call_id: str
    name: str
    args: dict
    result: str
    is_error: bool
    started: float
    ended: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Step:
    index: int
    started: float
    ended: float
    context: dict
    response: dict
    executions: list[ToolExecution] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "started": self.started,
            "ended": self.ended,
            "context": self.context,
            "response": self.response,
            "executions": [e.to_dict() for e in self.executions],
        }


@dataclass
class AgentTranscript:
    role: str
    repo_id: int | None
    initial_context: list[ChatMessage]
    steps: list[Step] = field(default_factory=list)
    outcome: str = "failed"
    final_text: str = ""
    error: str | None = None
    usage: Usage = Usage()
    started: float = 0.0
    ended: float = 0.0
    notes: list[str] = field(default_factory=list)

    def tool_executions(self) -> list[ToolExecution]:
        return [e for s in self.steps for e in s.executions]

    def to_records(self) -> list[dict]:
        head = {
            "type": "header",
            "role": self.role,
            "repo_id": self.repo_id,
            "started": self.started,
            "initial_context": [m.to_dict() for m in self.initial_context],
        }
        steps = [{"type": "step", **s.to_dict()} for s in self.steps]
        tail = {
            "type": "outcome",
            "outcome": self.outcome,
            "final_text": self.final_text,
            "error": self.error,
            "notes": self.notes,
            "ended": self.ended,
            "usage": {"input": self.usage.input_tokens, "output": self.usage.output_tokens},
        }
        return [head, *steps, tail]

    def write_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def context_tokens(messages: Iterable[ChatMessage]) -> int:
    return sum(estimate_tokens(m.content) for m in messages)


def _fits(tokens: int, budget: int) -> bool:
    return tokens * TOKEN_SAFETY_MARGIN <= budget


def fit_history(
    fixed: list[ChatMessage], history: list[list[ChatMessage]], budget: int
) -> tuple[list[ChatMessage], int]:
    """Drop the oldest history groups until the context fits; returns (messages, elided)."""
    fixed_tokens = context_tokens(fixed)
    if not _fits(fixed_tokens, budget):
        raise ContextOverflowError(
            f"fixed context needs ~{fixed_tokens} tokens, over the {budget}-token budget"
        )
    sizes = [context_tokens(g) for g in history]
    elided = 0
    while elided < len(history):
        marker = estimate_tokens(_marker(elided).content) if elided else 0
        if _fits(fixed_tokens + marker + sum(sizes[elided:]), budget):
            break
        elided += 1
    messages = list(fixed)
    if elided:
        messages.append(_marker(elided))
    for g in history[elided:]:
        messages.extend(g)
    return messages, elided


def _marker(n: int) -> ChatMessage:
    return ChatMessage("user", f"[... {n} earlier step(s) elided to fit the context budget ...]")


def _never() -> str | None:
    return None


def run_agent(
    role: AgentRole,
    initial_context: list[ChatMessage],
    tool_registry: ToolRegistry,
    backend: ChatBackend,
    budget_view: BudgetView,
    *,
    tag: str | None = None,
    repo_id: int | None = None,
    context_budget: int = DEFAULT_CONTEXT_BUDGET,
    retry: RetryPolicy = RetryPolicy(),
    temperature: float = 1.0,
    stop_check: Callable[[], str | None] = _never,
    clock: Callable[[], float] = time.time,
) -> AgentTranscript:
    """Call the backend until it answers in text, runs out of steps, or runs out of budget."""
    missing = role.allowed_tools - set(tool_registry.tools)
    if missing:
        raise ValueError(f"registry lacks tools for {role.name}: {sorted(missing)}")
    tag = tag or role.name
    transcript = AgentTranscript(role.name, repo_id, list(initial_context), started=clock())
    history: list[list[ChatMessage]] = []
    tools = tool_registry.schemas(role.allowed_tools)
    outcome = "step_limit"

    for index in range(role.max_steps):
        if budget_view.exhausted():
            outcome = "budget_exhausted"
            break
        stop = stop_check()
        if stop:
            outcome = stop
            break
        try:
            messages, elided = fit_history(transcript.initial_context, history, context_budget)
        except ContextOverflowError as exc:
            transcript.error = str(exc)
            outcome = "failed"
            break
        started = clock()
        request = CompletionRequest(
            model=backend.model, messages=tuple(messages), tools=tools, temperature=temperature
        )
        try:
            response = complete_with_retries(backend, request, retry)
        except UnknownToolError as exc:
            response = exc.response
        except BackendError as exc:
            transcript.error = f"{type(exc).__name__}: {exc}"
            outcome = "failed"
            break
        transcript.usage = transcript.usage + response.usage
        step = Step(
            index=index,
            started=started,
            ended=started,
            context={"messages": len(messages), "tokens": context_tokens(messages), "elided": elided},
            response=response.to_dict(),
        )
        transcript.steps.append(step)
        if response.final_text is not None:
            transcript.final_text = response.final_text
            step.ended = clock()
            outcome = "completed"
            break
        step.executions = _execute_calls(role, response, tool_registry, tag, clock)
        step.ended = clock()
        group = [response.as_message()] + [
            ChatMessage("tool_result", e.result, tool_call_id=e.call_id) for e in step.executions
        ]
        history.append(group)

    transcript.outcome = outcome
    transcript.ended = clock()
    return transcript


def _execute_calls(
    role: AgentRole,
    response: CompletionResponse,
    registry: ToolRegistry,
    tag: str,
    clock: Callable[[], float],
) -> list[ToolExecution]:
    done: list[ToolExecution] = []
    deferred: list[tuple[ToolCall, float, Deferred]] = []

    def record(call: ToolCall, started: float, text: str, is_error: bool) -> ToolExecution:
        prefix = f"[{tag}] {call.name} -> "
        body = f"ERROR: {text}" if is_error else text
        return ToolExecution(call.id, call.name, call.args, prefix + body, is_error, started, clock())

    for call in response.tool_calls:
        started = clock()
        if call.name not in role.allowed_tools or call.name not in registry:
            done.append(record(call, started, f"tool {call.name!r} is not available to the {role.name} role", True))
            continue
        try:
            out = registry.tools[call.name].handler(call.args)
        except ToolError as exc:
            done.append(record(call, started, str(exc), True))
            continue
        except Exception as exc:  # tool bugs must not kill the loop
            logger.exception("tool %s failed", call.name)
            done.append(record(call, started, f"{type(exc).__name__}: {exc}", True))
            continue
        if isinstance(out, Deferred):
            deferred.append((call, started, out))
        else:
            done.append(record(call, started, out, False))

    if deferred:
        lock = threading.Lock()
        with ThreadPoolExecutor(max_workers=len(deferred)) as pool:
            futures = {pool.submit(d.fn): (call, started) for call, started, d in deferred}
            for fut in as_completed(futures):
                call, started = futures[fut]
                try:
                    ex = record(call, started, fut.result(), False)
                except ToolError as exc:
                    ex = record(call, started, str(exc), True)
                except Exception as exc:
                    logger.exception("deferred tool %s failed", call.name)
                    ex = record(call, started, f"{type(exc).__name__}: {exc}", True)
                with lock:
                    done.append(ex)
    return done
