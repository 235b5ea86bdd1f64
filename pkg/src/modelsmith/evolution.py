"""Knowledge evolution from completed runs and from newly grouped web sources."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import knowledge as ks
from .builders import (
    BuilderError,
    assemble_run_digest,
    bootstrap_l1,
    build_l2_from_rundir,
    build_l2_from_sources,
    evolve_l1,
    run_id_of,
)
from .ingestion import IngestionError, load_corpus, read_groups_file
from .knowledge import KnowledgeBase
from .llm import BackendError, ChatBackend, RetryPolicy

logger = logging.getLogger(__name__)


class EvolutionRefused(Exception):
    """The request is well-formed but must not be applied (e.g. a run evolved twice)."""


@dataclass
class EvolutionChange:
    source: str  # run id or group id
    key: str
    doc_id: str
    revision_before: int | None  # None: category was unbuilt
    revision_after: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvolutionReport:
    changes: list[EvolutionChange] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"changes": [c.to_dict() for c in self.changes], "failures": list(self.failures)}


def _evolved_runs(kb: KnowledgeBase) -> set[str]:
    return {s for docs in kb.l2.values() for d in docs.values() for s in d.sources if s.startswith("run:")}


def _integrate(kb: KnowledgeBase, key: str, doc, backend: ChatBackend, source: str, retry: RetryPolicy) -> EvolutionChange:
    """Insert ``doc`` and bring its category's L1 value up to date (zero-or-one dispatch)."""
    before = kb.l1_values[key].revision if key in kb.l1_values else None
    doc_id = ks.insert_document(kb, key, doc)
    if before is None:
        value = bootstrap_l1(kb, key, backend, retry=retry)
        if value is None:  # cannot happen with a freshly inserted document
            raise BuilderError(f"category {key} could not be bootstrapped")
    else:
        value = evolve_l1(kb, key, doc_id, backend, retry=retry)
    ks.require_integrity(kb, ks.STRICT)
    return EvolutionChange(source, key, doc_id, before, value.revision)


def post_run_evolve(
    run_dir: str | os.PathLike,
    kb_path: str | os.PathLike,
    backend: ChatBackend,
    *,
    retry: RetryPolicy = RetryPolicy(),
    now: Callable[[], str] = ks.utc_now,
) -> EvolutionReport:
    """Distill one completed run into a new document; the store changes only on full success."""
    run_dir = Path(run_dir)
    assemble_run_digest(run_dir)  # fails early on runs without a final report
    run_id = run_id_of(run_dir)
    report = EvolutionReport()
    with ks.store_lock(kb_path):
        kb = ks.load_knowledge_base(kb_path, ks.STRICT)
        if f"run:{run_id}" in _evolved_runs(kb):
            raise EvolutionRefused(f"run {run_id} has already been distilled into {kb_path}")
        work = kb.snapshot()
        try:
            key, doc = build_l2_from_rundir(run_dir, kb.l1_index, backend, retry=retry, now=now)
            report.changes.append(_integrate(work, key, doc, backend, run_id, retry))
        except (BuilderError, BackendError, ks.KnowledgeError) as exc:
            report.failures.append(f"{run_id}: {type(exc).__name__}: {exc}")
            logger.warning("evolution from run %s failed; store left unchanged: %s", run_id, exc)
            return report
        ks.save_knowledge_base(work, kb_path)
    return report


def evolve_from_web(
    groups_file: str | os.PathLike,
    kb_path: str | os.PathLike,
    backend: ChatBackend,
    *,
    corpus_dir: str | os.PathLike | None = None,
    retry: RetryPolicy = RetryPolicy(),
    now: Callable[[], str] = ks.utc_now,
) -> EvolutionReport:
    """Add one document per source group; a failing group leaves no trace."""
    entries = read_groups_file(groups_file)
    report = EvolutionReport()
    if not entries:
        return report
    corpora: dict[str, dict] = {}

    def texts_for(corpus: str | None) -> dict:
        where = str(corpus or corpus_dir or "")
        if not where:
            raise BuilderError("groups file names no corpus and none was given")
        if where not in corpora:
            corpora[where] = {d.source_id: d for d in load_corpus(where)}
        return corpora[where]

    with ks.store_lock(kb_path):
        kb = ks.load_knowledge_base(kb_path, ks.STRICT)
        changed = False
        for group, corpus in entries:
            work = kb.snapshot()
            try:
                texts = texts_for(corpus)
                missing = [m for m in group.members if m not in texts]
                if missing:
                    raise IngestionError(f"corpus lacks source(s) {', '.join(missing)}")
                key, doc = build_l2_from_sources(group, texts, kb.l1_index, backend, retry=retry, now=now)
                change = _integrate(work, key, doc, backend, group.group_id, retry)
            except (BuilderError, BackendError, ks.KnowledgeError, IngestionError, OSError) as exc:
                report.failures.append(f"{group.group_id}: {type(exc).__name__}: {exc}")
                logger.warning("group %s skipped: %s", group.group_id, exc)
                continue
            kb = work
            changed = True
            report.changes.append(change)
        if changed:
            ks.save_knowledge_base(kb, kb_path)
    return report
