"""Knowledge builder agents and the bootstrap pipeline.

The L2 builder turns a group of sources (or a finished run directory) into
one categorised document; the L1 builder writes or evolves a category's
instruction and document index.  Both answer with a fenced envelope::

    ```
    CATEGORY: <key>                       (L2 only)
    DESCRIPTION: <one line>
    INDEX: <doc_id> :: <description>      (L1 only, repeated)

    <body / instruction>
    ```

Every validation failure gets exactly one corrective re-prompt.
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import knowledge as ks
from . import prompts
from .ingestion import (
    EmbeddingProvider,
    SourceDocument,
    SourceGroup,
    cluster_sources,
    confirm_groups,
    dedup_corpus,
    filter_relevance,
    load_corpus,
)
from .knowledge import KnowledgeBase, L1IndexEntry, L1Value, L2Document, IndexItem
from .llm import (
    BackendError,
    ChatBackend,
    ChatMessage,
    CompletionRequest,
    RetryPolicy,
    complete_with_retries,
)

logger = logging.getLogger(__name__)

DIGEST_CAP = 32_000
SOURCES_CAP = 48_000
L1_INPUT_CAP = 96_000
FAILED_LOG_TAIL_LINES = 50


class EnvelopeError(ValueError):
    pass


class BuilderError(Exception):
    """A builder gave up after its corrective re-prompt."""


class PreconditionError(BuilderError):
    pass


class EmptyKnowledgeBaseError(BuilderError):
    pass


@dataclass(frozen=True)
class Envelope:
    category: str | None
    description: str
    index: tuple[tuple[str, str], ...]
    body: str


_OPEN = re.compile(r"^(`{3,})[\w+-]*\s*$")


def parse_envelope(text: str) -> Envelope:
    lines = text.splitlines()
    start = fence = None
    for i, line in enumerate(lines):
        m = _OPEN.match(line.strip())
        if m:
            start, fence = i, m.group(1)
            break
    if start is None:
        raise EnvelopeError("no fenced block found")
    end = None
    for i in range(len(lines) - 1, start, -1):
        if lines[i].strip() == fence:
            end = i
            break
    if end is None:
        raise EnvelopeError("fenced block is not closed")
    block = lines[start + 1 : end]

    category = description = None
    index: list[tuple[str, str]] = []
    i = 0
    while i < len(block) and block[i].strip():
        key, sep, value = block[i].partition(":")
        key = key.strip().upper()
        if not sep:
            raise EnvelopeError(f"malformed header line {block[i]!r}")
        if key == "CATEGORY":
            category = value.strip()
        elif key == "DESCRIPTION":
            description = value.strip()
        elif key == "INDEX":
            doc_id, sep2, desc = value.partition("::")
            if not sep2 or not doc_id.strip() or not desc.strip():
                raise EnvelopeError(f"malformed INDEX line {block[i]!r}")
            index.append((doc_id.strip(), desc.strip()))
        else:
            raise EnvelopeError(f"unknown header field {key!r}")
        i += 1
    body = "\n".join(block[i:]).strip("\n")
    if not body.strip():
        raise EnvelopeError("envelope body is empty")
    return Envelope(category, description or "", tuple(index), body + "\n")


def _converse(
    backend: ChatBackend,
    system: str,
    user: str,
    validate: Callable[[Envelope], object],
    retry: RetryPolicy,
):
    """One conversation with at most one corrective re-prompt."""
    messages = [ChatMessage("system", system), ChatMessage("user", user)]
    for attempt in (1, 2):
        response = complete_with_retries(
            backend, CompletionRequest(model=backend.model, messages=tuple(messages)), retry
        )
        text = response.final_text or ""
        try:
            return validate(parse_envelope(text))
        except (EnvelopeError, ks.KnowledgeError) as exc:
            if attempt == 2:
                raise BuilderError(f"builder output rejected twice: {exc}") from exc
            logger.info("builder output rejected (%s); re-prompting", exc)
            messages += [
                ChatMessage("assistant", text),
                ChatMessage(
                    "user",
                    f"CORRECTION: {exc}. Reply again with a single fenced block in the required form.",
                ),
            ]


def _render_index(l1_index: Sequence[L1IndexEntry]) -> str:
    return "\n".join(f"- {e.key} [{e.kind}]: {' '.join(e.description.split())}" for e in l1_index)


def _cap_sections(sections: Sequence[tuple[str, str]], cap: int) -> str:
    """Join titled sections, truncating each body to an equal share of ``cap``."""
    share = max(200, cap // max(1, len(sections)))
    parts = []
    for title, body in sections:
        if len(body) > share:
            body = body[:share] + f"\n[... truncated {len(body) - share} characters ...]"
        parts.append(f"### {title}\n{body}")
    return "\n\n".join(parts)


def _l2_validator(l1_index: Sequence[L1IndexEntry]):
    keys = [e.key for e in l1_index]

    def validate(env: Envelope) -> Envelope:
        if not env.category:
            raise EnvelopeError("CATEGORY is missing")
        if env.category not in keys:
            raise EnvelopeError(
                f"category {env.category!r} is not in the taxonomy; valid keys: {', '.join(keys)}"
            )
        if not env.description:
            raise EnvelopeError("DESCRIPTION is missing")
        return env

    return validate


def build_l2_from_sources(
    group: SourceGroup,
    texts: Mapping[str, SourceDocument],
    l1_index: Sequence[L1IndexEntry],
    backend: ChatBackend,
    *,
    input_cap: int = SOURCES_CAP,
    now: Callable[[], str] = ks.utc_now,
    retry: RetryPolicy = RetryPolicy(),
) -> tuple[str, L2Document]:
    if not group.members:
        raise PreconditionError("empty source group")
    if not l1_index:
        raise PreconditionError("empty L1 index")
    system = prompts.load("l2_sources").render(l1_index=_render_index(l1_index))
    sources = _cap_sections(
        [(f"{sid} ({texts[sid].origin})", texts[sid].text) for sid in group.members], input_cap
    )
    user = f"group_id: {group.group_id}\nsources: {', '.join(group.members)}\n\n{sources}"
    env = _converse(backend, system, user, _l2_validator(l1_index), retry)
    doc = L2Document(
        key=env.category,
        body=env.body,
        description=env.description,
        provenance="web_sources",
        sources=group.members,
        created_at=now(),
    )
    doc.check()
    return env.category, doc


# -- run directories ---------------------------------------------------------------


def run_id_of(run_dir: str | os.PathLike) -> str:
    run_dir = Path(run_dir)
    meta = run_dir / "run.json"
    if meta.is_file():
        try:
            return json.loads(meta.read_text(encoding="utf-8"))["run_id"]
        except (ValueError, KeyError):
            pass
    return run_dir.name


def _tail(path: Path, n: int) -> str:
    if not path.is_file():
        return ""
    with open(path, "rb") as fh:
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        fh.seek(max(0, size - 256 * 1024))
        data = fh.read().decode("utf-8", errors="replace")
    return "\n".join(data.splitlines()[-n:])


def assemble_run_digest(run_dir: str | os.PathLike, cap: int = DIGEST_CAP) -> str:
    """Deterministic digest of a finished run, at most ``cap`` characters."""
    run_dir = Path(run_dir)
    if not (run_dir / "final" / "report.md").is_file():
        raise PreconditionError(f"{run_dir} has no final/report.md; the run is not complete")
    parts = [f"# Run {run_id_of(run_dir)}"]
    task_file = run_dir / "task.json"
    if task_file.is_file():
        task = json.loads(task_file.read_text(encoding="utf-8"))
        direction = "higher is better" if task.get("higher_is_better", True) else "lower is better"
        parts.append(
            f"## Task\n{task.get('description', '').strip()}\n"
            f"Metric: {task.get('metric_name', '?')} ({direction})"
        )
    repos = sorted(
        (p for p in (run_dir / "repos").glob("repo-*") if p.is_dir()),
        key=lambda p: int(p.name.split("-")[1]),
    )
    for repo in repos:
        plan = (repo / "plan.md").read_text(encoding="utf-8") if (repo / "plan.md").exists() else ""
        parts.append(f"## {repo.name} plan\n{plan.strip() or '(no plan)'}")
    metric_lines = []
    failures = []
    for repo in repos:
        index = repo / "results" / "index.json"
        results = json.loads(index.read_text(encoding="utf-8")) if index.is_file() else []
        state = repo / "results" / "state.json"
        status = json.loads(state.read_text(encoding="utf-8")).get("status") if state.is_file() else "?"
        best = None
        for r in results:
            m = r.get("parsed_metrics")
            if not m or m.get("split") != "validation":
                continue
            if best is None or (m["value"] > best["value"] if m["higher_is_better"] else m["value"] < best["value"]):
                best = m
        for r in results:
            if r.get("exit_code") != 0:
                log = _tail(Path(r["stderr_path"]), FAILED_LOG_TAIL_LINES) or _tail(
                    Path(r["stdout_path"]), FAILED_LOG_TAIL_LINES
                )
                failures.append(
                    f"### {repo.name} {r['run_id']} exit={r['exit_code']}"
                    f"{' (timed out)' if r.get('timed_out') else ''}: `{r['command']}`\n{log}"
                )
        best_txt = f"{best['metric_name']}={best['value']:g}" if best else "no validation metric"
        metric_lines.append(f"- {repo.name} ({status}): {best_txt}; {len(results)} runs")
    parts.append("## Best metrics\n" + ("\n".join(metric_lines) or "(no repositories)"))
    report = (run_dir / "final" / "report.md").read_text(encoding="utf-8")
    parts.append("## Final report\n" + report[:4000])
    if failures:
        parts.append("## Failed executions\n" + "\n\n".join(failures))
    digest = "\n\n".join(parts)
    if len(digest) > cap:
        marker = "\n[... digest truncated ...]"
        digest = digest[: cap - len(marker)] + marker
    return digest


def build_l2_from_rundir(
    run_dir: str | os.PathLike,
    l1_index: Sequence[L1IndexEntry],
    backend: ChatBackend,
    *,
    digest_cap: int = DIGEST_CAP,
    now: Callable[[], str] = ks.utc_now,
    retry: RetryPolicy = RetryPolicy(),
) -> tuple[str, L2Document]:
    digest = assemble_run_digest(run_dir, digest_cap)
    run_id = run_id_of(run_dir)
    system = prompts.load("l2_rundir").render(l1_index=_render_index(l1_index))
    env = _converse(backend, system, f"run_id: {run_id}\n\n{digest}", _l2_validator(l1_index), retry)
    doc = L2Document(
        key=env.category,
        body=env.body,
        description=env.description,
        provenance="run_takeaway",
        sources=(f"run:{run_id}",),
        created_at=now(),
    )
    doc.check()
    return env.category, doc


# -- L1 builder ------------------------------------------------------------------


def _l1_validator(key: str, required: set[str], line_cap: int):
    def validate(env: Envelope) -> Envelope:
        listed = [doc_id for doc_id, _ in env.index]
        missing = sorted(required - set(listed))
        extra = sorted(set(listed) - required)
        if missing:
            raise EnvelopeError(f"index omits document(s) {', '.join(missing)}")
        if extra:
            raise EnvelopeError(f"index names unknown document(s) {', '.join(extra)}")
        if len(set(listed)) != len(listed):
            raise EnvelopeError("index lists a document twice")
        lines = len(env.body.strip("\n").splitlines())
        if lines > line_cap:
            raise EnvelopeError(f"instruction has {lines} lines; the limit is {line_cap}")
        return env

    return validate


def bootstrap_l1(
    kb: KnowledgeBase,
    key: str,
    backend: ChatBackend,
    *,
    input_cap: int = L1_INPUT_CAP,
    line_cap: int = ks.DEFAULT_INSTRUCTION_LINE_CAP,
    retry: RetryPolicy = RetryPolicy(),
) -> L1Value | None:
    """Write ``L1[key]`` from scratch; ``None`` (with a warning) when the category has no documents."""
    entry = kb.entry(key)
    if key in kb.l1_values:
        raise PreconditionError(f"category {key!r} already has an L1 value")
    docs = kb.documents(key)
    if not docs:
        logger.warning("category %s has no documents; left unbuilt", key)
        return None
    system = prompts.load("l1_bootstrap").render(line_cap=line_cap)
    sections = _cap_sections(
        [(f"{d.doc_id}: {d.description}", d.body) for d in docs.values()], input_cap
    )
    user = (
        f"category: {key} [{entry.kind}]\n{entry.description}\n\n"
        f"Documents under this category:\n\n{sections}"
    )
    env = _converse(backend, system, user, _l1_validator(key, set(docs), line_cap), retry)
    value = L1Value(key, env.body, tuple(IndexItem(d, desc) for d, desc in env.index), revision=1)
    ks.replace_l1_value(kb, key, value, instruction_line_cap=line_cap)
    return value


def evolve_l1(
    kb: KnowledgeBase,
    key: str,
    new_doc_id: str,
    backend: ChatBackend,
    *,
    input_cap: int = L1_INPUT_CAP,
    line_cap: int = ks.DEFAULT_INSTRUCTION_LINE_CAP,
    retry: RetryPolicy = RetryPolicy(),
) -> L1Value:
    current = ks.query_category(kb, key)
    new_doc = ks.query_document(kb, key, new_doc_id)
    if new_doc_id in current.doc_ids:
        raise PreconditionError(f"{new_doc_id} is already indexed under {key}")
    required = set(current.doc_ids) | {new_doc_id}
    system = prompts.load("l1_evolve").render(line_cap=line_cap)
    body = new_doc.body
    if len(body) > input_cap:
        body = body[:input_cap] + "\n[... truncated ...]"
    user = (
        f"category: {key}\n\n## Current L1 value\n{ks.render_l1_value(current)}\n"
        f"## New document {new_doc_id}: {new_doc.description}\n{body}"
    )
    env = _converse(backend, system, user, _l1_validator(key, required, line_cap), retry)
    new_desc = dict(env.index)[new_doc_id]
    value = L1Value(
        key,
        env.body,
        current.l2_index + (IndexItem(new_doc_id, new_desc),),
        revision=current.revision + 1,
    )
    ks.replace_l1_value(kb, key, value, instruction_line_cap=line_cap)
    return value


# -- bootstrap pipeline ---------------------------------------------------------------


@dataclass
class BootstrapConfig:
    dedup_threshold: float = 0.85
    shingle_size: int = 5
    num_hashes: int = 128
    seed: int = 0
    cosine_threshold: float = 0.7
    max_workers: int = 4
    builder_workers: int = 2
    line_cap: int = ks.DEFAULT_INSTRUCTION_LINE_CAP
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "BootstrapConfig":
        known = set(cls.__dataclass_fields__) - {"retry"}
        cfg = cls(**{k: v for k, v in data.items() if k in known})
        if "retry" in data:
            cfg.retry = RetryPolicy(**data["retry"])
        return cfg


@dataclass
class PipelineReport:
    ingested: int = 0
    deduped: int = 0
    dropped: int = 0
    groups: int = 0
    docs: int = 0
    categories_built: int = 0
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bootstrap_knowledge_base(
    corpus: str | os.PathLike | Sequence[SourceDocument],
    l1_index: str | os.PathLike | Sequence[L1IndexEntry],
    backend: ChatBackend,
    provider: EmbeddingProvider,
    config: BootstrapConfig | None = None,
    *,
    out_path: str | os.PathLike | None = None,
    now: Callable[[], str] = ks.utc_now,
) -> tuple[KnowledgeBase, PipelineReport]:
    config = config or BootstrapConfig()
    docs = load_corpus(corpus) if isinstance(corpus, (str, os.PathLike)) else list(corpus)
    entries = ks.load_l1_index_file(l1_index) if isinstance(l1_index, (str, os.PathLike)) else tuple(l1_index)
    report = PipelineReport(ingested=len(docs))

    unique, clusters = dedup_corpus(
        docs, config.dedup_threshold, k=config.shingle_size, num_hashes=config.num_hashes, seed=config.seed
    )
    report.deduped = len(docs) - len(unique)
    relevant, dropped = filter_relevance(unique, backend, max_workers=config.max_workers, retry=config.retry)
    report.dropped = len(dropped)
    by_id = {d.source_id: d for d in relevant}
    groups = cluster_sources(relevant, provider, config.cosine_threshold, max_workers=config.max_workers)
    groups = confirm_groups(groups, by_id, backend, retry=config.retry)
    report.groups = len(groups)

    def build(group: SourceGroup):
        try:
            return build_l2_from_sources(group, by_id, entries, backend, now=now, retry=config.retry)
        except (BuilderError, BackendError) as exc:
            return exc

    kb = KnowledgeBase(l1_index=entries)
    with ThreadPoolExecutor(max_workers=max(1, config.builder_workers)) as pool:
        outcomes = list(pool.map(build, groups))
    # insertion in group order keeps doc ids independent of completion order
    for group, outcome in zip(groups, outcomes):
        if isinstance(outcome, Exception):
            report.failures.append(f"{group.group_id}: {outcome}")
            continue
        key, doc = outcome
        ks.insert_document(kb, key, doc)
    report.docs = kb.doc_count()

    for entry in entries:
        try:
            if bootstrap_l1(kb, entry.key, backend, line_cap=config.line_cap, retry=config.retry):
                report.categories_built += 1
        except (BuilderError, BackendError) as exc:
            report.failures.append(f"L1 {entry.key}: {exc}")
            # unindexed documents cannot stay in a strict store
            dropped_docs = kb.l2.pop(entry.key, {})
            report.docs -= len(dropped_docs)

    if report.categories_built == 0:
        raise EmptyKnowledgeBaseError(
            "bootstrap produced an empty knowledge base: " + "; ".join(report.failures)
        )
    ks.require_integrity(kb, ks.STRICT)
    if out_path is not None:
        with ks.store_lock(out_path):
            ks.save_knowledge_base(kb, out_path)
    return kb, report
