"""Two-level knowledge store.

The store is a pair of nested lookups.  The L1 index is a closed taxonomy of
category keys; each built category holds an L1 value (a self-contained
instruction plus an index of pointers to its documents) and the L2 lookup
holds the documents themselves, keyed by ``(category, doc_id)``.

On disk::

    manifest.json                       format version + taxonomy (+ revisions)
    categories/<key>/instruction.md     L1 instruction (absent until built)
    categories/<key>/index.json         [{doc_id, description}, ...]
    categories/<key>/docs/<doc_id>.md   metadata header block + body
"""

from __future__ import annotations

import copy
import json
import logging
import os
import re
import shutil
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

import filelock

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KEY_PATTERN = re.compile(r"[a-z0-9][a-z0-9-]*")
MAX_KEY_LENGTH = 64
MAX_INDEX_DESCRIPTION_LINES = 6
MAX_DOC_DESCRIPTION_LINES = 3
DEFAULT_INSTRUCTION_LINE_CAP = 400

KINDS = ("modality_task", "modeling_strategy")
PROVENANCE_KINDS = ("web_sources", "run_takeaway")
STRICT = "strict"
PENDING_EVOLUTION = "pending_evolution"

_HEADER_FENCE = "---"


class KnowledgeError(Exception):
    """Base class for knowledge-store errors."""


class KnowledgeFormatError(KnowledgeError):
    pass


class NotFoundError(KnowledgeError, LookupError):
    pass


class CategoryNotBuiltError(NotFoundError):
    """The category is part of the taxonomy but has no L1 value yet."""


class TaxonomyError(KnowledgeError):
    pass


class ConflictError(KnowledgeError):
    pass


class InvalidEntryError(KnowledgeError, ValueError):
    pass


class IntegrityError(KnowledgeError):
    def __init__(self, message: str, violations: Iterable["Violation"] = ()):
        self.violations = list(violations)
        if self.violations:
            message = message + ": " + "; ".join(str(v) for v in self.violations)
        super().__init__(message)


def utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def _line_count(text: str) -> int:
    return len(text.strip("\n").splitlines())


def check_key(key: str) -> str:
    if not isinstance(key, str) or len(key) > MAX_KEY_LENGTH or not KEY_PATTERN.fullmatch(key):
        raise InvalidEntryError(f"invalid category key {key!r}")
    return key


@dataclass(frozen=True)
class L1IndexEntry:
    key: str
    description: str
    kind: str

    def __post_init__(self):
        check_key(self.key)
        if not self.description.strip():
            raise InvalidEntryError(f"{self.key}: empty description")
        if _line_count(self.description) > MAX_INDEX_DESCRIPTION_LINES:
            raise InvalidEntryError(
                f"{self.key}: description exceeds {MAX_INDEX_DESCRIPTION_LINES} lines"
            )
        if self.kind not in KINDS:
            raise InvalidEntryError(f"{self.key}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class IndexItem:
    """One pointer in a category's L2 index."""

    doc_id: str
    description: str


@dataclass(frozen=True)
class L1Value:
    key: str
    instruction: str
    l2_index: tuple[IndexItem, ...] = ()
    revision: int = 1

    def __post_init__(self):
        object.__setattr__(self, "l2_index", tuple(self.l2_index))
        if not self.instruction.strip():
            raise InvalidEntryError(f"{self.key}: empty instruction")

    @property
    def doc_ids(self) -> list[str]:
        return [item.doc_id for item in self.l2_index]


@dataclass(frozen=True)
class L2Document:
    key: str
    body: str
    description: str
    provenance: str
    sources: tuple[str, ...]
    created_at: str = field(default_factory=utc_now)
    doc_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))

    def check(self) -> None:
        if not self.body.strip():
            raise InvalidEntryError("document body is empty")
        if not self.description.strip():
            raise InvalidEntryError("document description is empty")
        if _line_count(self.description) > MAX_DOC_DESCRIPTION_LINES:
            raise InvalidEntryError(
                f"document description exceeds {MAX_DOC_DESCRIPTION_LINES} lines"
            )
        if self.provenance not in PROVENANCE_KINDS:
            raise InvalidEntryError(f"unknown provenance {self.provenance!r}")
        if not self.sources:
            raise InvalidEntryError("provenance lists no source identifiers")


@dataclass(frozen=True)
class Violation:
    key: str
    doc_id: str | None
    rule: str

    def __str__(self) -> str:
        where = self.key if self.doc_id is None else f"{self.key}/{self.doc_id}"
        return f"{where}: {self.rule}"


@dataclass
class IntegrityReport:
    mode: str
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)


@dataclass
class KnowledgeBase:
    l1_index: tuple[L1IndexEntry, ...]
    l1_values: dict[str, L1Value] = field(default_factory=dict)
    l2: dict[str, dict[str, L2Document]] = field(default_factory=dict)
    lock: threading.RLock = field(
        default_factory=threading.RLock, repr=False, compare=False
    )

    def __post_init__(self):
        self.l1_index = tuple(self.l1_index)
        keys = [e.key for e in self.l1_index]
        if len(set(keys)) != len(keys):
            raise InvalidEntryError("duplicate category key in L1 index")

    def __deepcopy__(self, memo):
        return KnowledgeBase(
            l1_index=self.l1_index,
            l1_values=dict(self.l1_values),
            l2={k: dict(docs) for k, docs in self.l2.items()},
        )

    @property
    def keys(self) -> list[str]:
        return [e.key for e in self.l1_index]

    def entry(self, key: str) -> L1IndexEntry:
        for e in self.l1_index:
            if e.key == key:
                return e
        raise NotFoundError(f"unknown category {key!r}; valid keys: {', '.join(self.keys)}")

    def documents(self, key: str) -> dict[str, L2Document]:
        return self.l2.get(key, {})

    def doc_count(self) -> int:
        return sum(len(docs) for docs in self.l2.values())

    def snapshot(self) -> "KnowledgeBase":
        return copy.deepcopy(self)


# -- integrity ---------------------------------------------------------------


def validate_integrity(kb: KnowledgeBase, mode: str = STRICT) -> IntegrityReport:
    """Check referential closure between L1 indices and stored L2 documents.

    ``strict`` requires every stored document to be indexed; ``pending_evolution``
    tolerates unindexed documents.  Dangling pointers fail in both modes.
    """
    if mode not in (STRICT, PENDING_EVOLUTION):
        raise ValueError(f"unknown integrity mode {mode!r}")
    report = IntegrityReport(mode)
    bad = report.violations.append
    taxonomy = set(kb.keys)

    for key in sorted(set(kb.l1_values) | set(kb.l2)):
        if key not in taxonomy:
            bad(Violation(key, None, "category not in L1 index"))

    for key, value in sorted(kb.l1_values.items()):
        if value.key != key:
            bad(Violation(key, None, f"L1 value keyed as {value.key!r}"))
        stored = kb.l2.get(key, {})
        seen: set[str] = set()
        for item in value.l2_index:
            if item.doc_id in seen:
                bad(Violation(key, item.doc_id, "duplicate index entry"))
            seen.add(item.doc_id)
            if item.doc_id not in stored:
                bad(Violation(key, item.doc_id, "dangling pointer"))

    for key, docs in sorted(kb.l2.items()):
        value = kb.l1_values.get(key)
        indexed = set(value.doc_ids) if value else set()
        for doc_id, doc in sorted(docs.items()):
            if doc.doc_id != doc_id or doc.key != key:
                bad(Violation(key, doc_id, "document identity mismatch"))
            if mode == STRICT and doc_id not in indexed:
                bad(Violation(key, doc_id, "orphan document (not indexed)"))
    return report


def require_integrity(kb: KnowledgeBase, mode: str = STRICT) -> None:
    report = validate_integrity(kb, mode)
    if not report.ok:
        raise IntegrityError(f"knowledge base fails {mode} integrity", report.violations)


# -- queries -----------------------------------------------------------------


def query_category(kb: KnowledgeBase, key: str) -> L1Value:
    kb.entry(key)
    value = kb.l1_values.get(key)
    if value is None:
        raise CategoryNotBuiltError(f"category {key!r} exists but is not yet built")
    return value


def query_document(kb: KnowledgeBase, key: str, doc_id: str) -> L2Document:
    kb.entry(key)
    try:
        return kb.l2[key][doc_id]
    except KeyError:
        raise NotFoundError(f"no document {doc_id!r} under category {key!r}") from None


def render_l1_index(kb: KnowledgeBase) -> str:
    lines = []
    for e in kb.l1_index:
        desc = " ".join(e.description.split())
        status = "" if e.key in kb.l1_values else " (not yet built)"
        lines.append(f"- {e.key} [{e.kind}]{status}: {desc}")
    return "\n".join(lines)


def render_l1_value(value: L1Value) -> str:
    index = "\n".join(f"- {item.doc_id}: {item.description}" for item in value.l2_index)
    return (
        f"# Category: {value.key} (revision {value.revision})\n\n"
        f"{value.instruction.rstrip()}\n\n"
        f"## Documents\n{index or '(none)'}\n"
    )


# -- mutation ----------------------------------------------------------------

_SEQ = re.compile(r"-(\d+)$")


def next_doc_id(kb: KnowledgeBase, key: str) -> str:
    highest = 0
    for doc_id in kb.documents(key):
        m = _SEQ.search(doc_id)
        if m and doc_id.startswith(key + "-"):
            highest = max(highest, int(m.group(1)))
    return f"{key}-{highest + 1:04d}"


def insert_document(kb: KnowledgeBase, key: str, doc: L2Document) -> str:
    """Store ``doc`` under ``key`` with a fresh id; leaves it unindexed."""
    with kb.lock:
        if key not in kb.keys:
            raise TaxonomyError(f"category {key!r} is not in the L1 index")
        doc.check()
        doc_id = next_doc_id(kb, key)
        stored = L2Document(
            key=key,
            body=doc.body,
            description=doc.description,
            provenance=doc.provenance,
            sources=doc.sources,
            created_at=doc.created_at,
            doc_id=doc_id,
        )
        kb.l2.setdefault(key, {})[doc_id] = stored
        return doc_id


def replace_l1_value(
    kb: KnowledgeBase,
    key: str,
    value: L1Value,
    *,
    instruction_line_cap: int = DEFAULT_INSTRUCTION_LINE_CAP,
) -> None:
    with kb.lock:
        if key not in kb.keys:
            raise TaxonomyError(f"category {key!r} is not in the L1 index")
        if value.key != key:
            raise InvalidEntryError(f"value keyed {value.key!r} offered for {key!r}")
        if _line_count(value.instruction) > instruction_line_cap:
            raise InvalidEntryError(
                f"{key}: instruction exceeds {instruction_line_cap} lines"
            )
        stored = kb.l2.get(key, {})
        problems = []
        seen: set[str] = set()
        for item in value.l2_index:
            if item.doc_id in seen:
                problems.append(Violation(key, item.doc_id, "duplicate index entry"))
            seen.add(item.doc_id)
            if item.doc_id not in stored:
                problems.append(Violation(key, item.doc_id, "dangling pointer"))
            if not item.description.strip() or _line_count(item.description) > MAX_DOC_DESCRIPTION_LINES:
                problems.append(Violation(key, item.doc_id, "bad index description"))
        if problems:
            raise IntegrityError("refusing L1 value", problems)
        current = kb.l1_values.get(key)
        current_rev = current.revision if current else 0
        if value.revision <= current_rev:
            raise ConflictError(
                f"{key}: revision {value.revision} is not newer than {current_rev}"
            )
        kb.l1_values[key] = value


# -- persistence -------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _read_text(path: Path) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def format_document(doc: L2Document) -> str:
    meta = {
        "doc_id": doc.doc_id,
        "description": doc.description,
        "provenance": {"kind": doc.provenance, "sources": list(doc.sources)},
        "created_at": doc.created_at,
    }
    header = json.dumps(meta, ensure_ascii=False, sort_keys=True)
    return f"{_HEADER_FENCE}\n{header}\n{_HEADER_FENCE}\n{doc.body}"


def parse_document(text: str, key: str, path: Path) -> L2Document:
    parts = text.split("\n", 3)
    if len(parts) < 3 or parts[0] != _HEADER_FENCE or parts[2] != _HEADER_FENCE:
        raise KnowledgeFormatError(f"{path}: missing metadata header block")
    try:
        meta = json.loads(parts[1])
        prov = meta["provenance"]
        return L2Document(
            key=key,
            body=parts[3] if len(parts) > 3 else "",
            description=meta["description"],
            provenance=prov["kind"],
            sources=tuple(prov["sources"]),
            created_at=meta["created_at"],
            doc_id=meta["doc_id"],
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise KnowledgeFormatError(f"{path}: bad metadata header ({exc})") from exc


def load_knowledge_base(root: str | os.PathLike, mode: str | None = STRICT) -> KnowledgeBase:
    """Read a store from disk and check it in ``mode`` (``None`` skips the check)."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise KnowledgeFormatError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(_read_text(manifest_path))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise KnowledgeFormatError(
                f"unsupported format version {manifest.get('format_version')!r}"
            )
        entries = [
            L1IndexEntry(c["key"], c["description"], c["kind"]) for c in manifest["categories"]
        ]
        revisions = {c["key"]: c.get("revision", 0) for c in manifest["categories"]}
    except (ValueError, KeyError, TypeError) as exc:
        raise KnowledgeFormatError(f"{manifest_path}: {exc}") from exc

    kb = KnowledgeBase(l1_index=tuple(entries))
    cat_root = root / "categories"
    on_disk = sorted(p.name for p in cat_root.iterdir() if p.is_dir()) if cat_root.is_dir() else []
    unknown = [name for name in on_disk if name not in revisions]
    if unknown:
        raise IntegrityError(
            "categories on disk outside the taxonomy",
            [Violation(name, None, "category not in L1 index") for name in unknown],
        )

    for key in on_disk:
        cdir = cat_root / key
        docs_dir = cdir / "docs"
        if docs_dir.is_dir():
            for path in sorted(docs_dir.glob("*.md")):
                doc = parse_document(_read_text(path), key, path)
                if doc.doc_id != path.stem:
                    raise KnowledgeFormatError(f"{path}: header names {doc.doc_id!r}")
                kb.l2.setdefault(key, {})[doc.doc_id] = doc
        instruction_path = cdir / "instruction.md"
        if instruction_path.is_file():
            try:
                raw_index = json.loads(_read_text(cdir / "index.json"))
                items = tuple(IndexItem(i["doc_id"], i["description"]) for i in raw_index)
            except FileNotFoundError as exc:
                raise KnowledgeFormatError(f"{cdir}: instruction without index.json") from exc
            except (ValueError, KeyError, TypeError) as exc:
                raise KnowledgeFormatError(f"{cdir / 'index.json'}: {exc}") from exc
            kb.l1_values[key] = L1Value(
                key=key,
                instruction=_read_text(instruction_path),
                l2_index=items,
                revision=revisions[key],
            )
    if mode is not None:
        require_integrity(kb, mode)
    return kb


def _manifest(kb: KnowledgeBase) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "categories": [
            {
                "key": e.key,
                "kind": e.kind,
                "description": e.description,
                "revision": kb.l1_values[e.key].revision if e.key in kb.l1_values else 0,
            }
            for e in kb.l1_index
        ],
    }


def save_knowledge_base(kb: KnowledgeBase, root: str | os.PathLike) -> None:
    """Write ``kb`` to ``root`` atomically (staging directory, then rename)."""
    root = Path(root)
    with kb.lock:
        require_integrity(kb, STRICT)
        root.parent.mkdir(parents=True, exist_ok=True)
        tag = uuid.uuid4().hex[:8]
        staging = root.parent / f".{root.name}.staging-{tag}"
        try:
            _write_text(
                staging / "manifest.json",
                json.dumps(_manifest(kb), indent=2, ensure_ascii=False) + "\n",
            )
            for e in kb.l1_index:
                docs = kb.l2.get(e.key, {})
                value = kb.l1_values.get(e.key)
                if not docs and value is None:
                    continue
                cdir = staging / "categories" / e.key
                cdir.mkdir(parents=True)
                for doc_id, doc in sorted(docs.items()):
                    _write_text(cdir / "docs" / f"{doc_id}.md", format_document(doc))
                if value is not None:
                    _write_text(cdir / "instruction.md", value.instruction)
                    index = [
                        {"doc_id": i.doc_id, "description": i.description}
                        for i in value.l2_index
                    ]
                    _write_text(
                        cdir / "index.json",
                        json.dumps(index, indent=2, ensure_ascii=False) + "\n",
                    )
        except OSError:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        retired = root.parent / f".{root.name}.old-{tag}"
        if root.exists():
            os.replace(root, retired)
        os.replace(staging, root)
        shutil.rmtree(retired, ignore_errors=True)


def store_lock(root: str | os.PathLike, timeout: float = 60.0) -> filelock.FileLock:
    """Exclusive writer lock for the store at ``root`` (a sibling lock file)."""
    root = Path(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    return filelock.FileLock(str(root.parent / f".{root.name}.lock"), timeout=timeout)


def load_l1_index_file(path: str | os.PathLike) -> tuple[L1IndexEntry, ...]:
    """Read a human-authored taxonomy file (JSON list of {key, kind, description})."""
    try:
        raw = json.loads(_read_text(Path(path)))
        if isinstance(raw, dict):
            raw = raw["categories"]
        entries = tuple(L1IndexEntry(r["key"], r["description"], r["kind"]) for r in raw)
    except (ValueError, KeyError, TypeError) as exc:
        raise KnowledgeFormatError(f"{path}: {exc}") from exc
    if len({e.key for e in entries}) != len(entries):
        raise KnowledgeFormatError(f"{path}: duplicate category key")
    return entries


def default_l1_index_path() -> Path:
    return Path(__file__).parent / "data" / "l1_index.json"
