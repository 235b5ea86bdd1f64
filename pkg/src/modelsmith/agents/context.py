"""Context assembly and the knowledge query tool (dynamic context loading).

Every invocation starts with the system prompt and the rendered L1 index
only.  Category instructions and document bodies enter the conversation
solely as results of ``query`` calls made during the invocation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .. import knowledge as ks
from .. import prompts
from ..knowledge import KnowledgeBase
from ..llm import ChatMessage, ToolParam, ToolSchema
from ..task import TaskSpec
from ..workspace import SolutionRepository, read_artifact, summarize, truncate_middle
from .loop import AgentRole, ContextOverflowError, ToolError, context_tokens, fit_history, _fits

REPO_EXCERPT_CAP = 8_000

QUERY_SCHEMA = ToolSchema(
    "query",
    "Load knowledge. query(key) returns a category's instruction and document index; "
    "query(key, doc_id) returns one document from a category loaded earlier.",
    (
        ToolParam("key", "string", True, "category key from the knowledge index"),
        ToolParam("doc_id", "string", False, "document id from the category's index"),
    ),
)


@dataclass
class LoadedKnowledge:
    categories: set[str] = field(default_factory=set)
    documents: set[tuple[str, str]] = field(default_factory=set)


def query_tool(kb: KnowledgeBase, loaded: LoadedKnowledge, args: dict) -> str:
    key = args.get("key")
    doc_id = args.get("doc_id")
    if not isinstance(key, str) or not key:
        raise ToolError("query needs a category key")
    if doc_id in (None, ""):
        try:
            value = ks.query_category(kb, key)
        except ks.NotFoundError as exc:
            raise ToolError(str(exc)) from None
        loaded.categories.add(key)
        return ks.render_l1_value(value)
    if key not in loaded.categories:
        raise ToolError(
            f"category {key!r} is not loaded; call query(key={key!r}) first, "
            "then pick a document from its index"
        )
    if doc_id not in ks.query_category(kb, key).doc_ids:
        raise ToolError(f"no document {doc_id!r} in the index of {key!r}")
    try:
        doc = ks.query_document(kb, key, doc_id)
    except ks.NotFoundError as exc:
        raise ToolError(str(exc)) from None
    loaded.documents.add((key, doc_id))
    return doc.body


def _repo_section(repo: SolutionRepository, cap: int) -> str:
    parts = [f"## Repository {repo.name} (status: {repo.status})"]
    for rel in ("plan.md", "config.yaml"):
        try:
            text = read_artifact(repo, rel).text
        except FileNotFoundError:
            text = ""
        parts.append(f"### {rel}\n{truncate_middle(text, cap)[0] if text.strip() else '(empty)'}")
    last = next((r for r in reversed(repo.results) if r is not None), None)
    if last is not None:
        try:
            with open(last.stderr_path, encoding="utf-8", errors="replace") as fh:
                err = fh.read()
            with open(last.stdout_path, encoding="utf-8", errors="replace") as fh:
                out = fh.read()
        except OSError:
            err = out = ""
        metric = (
            f"{last.parsed_metrics.metric_name}={last.parsed_metrics.value:g}"
            if last.parsed_metrics else "none"
        )
        parts.append(
            f"### last result {last.run_id}: exit={last.exit_code} timed_out={last.timed_out} "
            f"metric={metric}\n`{last.command}`\n--- stdout ---\n{truncate_middle(out, cap // 2)[0]}"
            f"\n--- stderr ---\n{truncate_middle(err, cap // 2)[0]}"
        )
    return "\n\n".join(parts)


def _repo_states(repo_state) -> list[SolutionRepository]:
    if repo_state is None:
        return []
    if isinstance(repo_state, SolutionRepository):
        return [repo_state]
    return list(repo_state)


def assemble_context(
    role: AgentRole,
    task: TaskSpec,
    repo_state: SolutionRepository | Sequence[SolutionRepository] | None,
    kb: KnowledgeBase,
    loaded: LoadedKnowledge,
    history: list[list[ChatMessage]] | None = None,
    budget: int = 160_000,
    *,
    instructions: str = "",
    prompt_values: dict | None = None,
) -> list[ChatMessage]:
    """System prompt, then index + task + repository state, then history.

    ``loaded`` is accepted for symmetry with the query tool; assembly never
    re-injects loaded knowledge.
    """
    system = ChatMessage("system", prompts.load(role.prompt).render(**(prompt_values or {})))
    repos = _repo_states(repo_state)
    header = f"Agent: {role.name}"
    if len(repos) == 1 and role.name not in ("manager", "aggregator"):
        header += f" | Repository: {repos[0].name}"
    fixed_head = (
        f"{header}\n\n## Knowledge index (load with the query tool)\n{ks.render_l1_index(kb)}\n\n"
        f"## Task {task.task_id}\n{task.description.strip()}\n"
        f"Metric: {task.metric_name} ({task.direction})"
    )
    if instructions:
        fixed_head += f"\n\n## Instructions\n{instructions.strip()}"

    def build(cap: int | None) -> list[ChatMessage]:
        if cap == 0 or not repos:
            body = fixed_head
        elif role.name in ("manager", "aggregator"):
            summaries = "\n".join(summarize(r) for r in repos)
            if cap is not None:
                summaries = truncate_middle(summaries, cap)[0]
            body = f"{fixed_head}\n\n## Repositories\n{summaries}"
        else:
            body = fixed_head + "\n\n" + _repo_section(repos[0], cap or REPO_EXCERPT_CAP)
        return [system, ChatMessage("user", body)]

    history = history or []
    fixed = build(None)
    if _fits(context_tokens(fixed) + sum(context_tokens(g) for g in history), budget):
        return fixed + [m for g in history for m in g]
    try:
        return fit_history(fixed, history, budget)[0]
    except ContextOverflowError:
        pass
    cap = REPO_EXCERPT_CAP
    while cap >= 64:
        cap //= 2
        fixed = build(cap)
        if _fits(context_tokens(fixed), budget):
            return fixed
    fixed = build(0)
    if _fits(context_tokens(fixed), budget):
        return fixed
    raise ContextOverflowError(
        f"system prompt, knowledge index and task alone exceed the {budget}-token budget"
    )
