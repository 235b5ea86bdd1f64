"""Corpus ingestion: MinHash dedup, relevance filtering, embedding clusters."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from . import prompts
from .llm import (
    BackendError,
    ChatBackend,
    ChatMessage,
    CompletionRequest,
    RetryableError,
    RetryPolicy,
    complete_with_retries,
)

logger = logging.getLogger(__name__)

ORIGINS = ("competition_writeup", "blog", "library_doc", "code_repo", "paper")
EMPTY_SENTINEL = np.uint64(2**64 - 1)
_PUNCT = set(string.punctuation)

DEFAULT_SHINGLE_SIZE = 5
DEFAULT_NUM_HASHES = 128
DEFAULT_DEDUP_THRESHOLD = 0.85
DEFAULT_COSINE_THRESHOLD = 0.7


class IngestionError(Exception):
    pass


class ComparabilityError(IngestionError, ValueError):
    pass


class RelevanceAborted(IngestionError):
    def __init__(self, message: str, completed: dict[str, "Verdict"]):
        super().__init__(message)
        self.completed = completed


@dataclass(frozen=True)
class SourceDocument:
    source_id: str
    text: str
    origin: str = "blog"
    location: str = ""
    fetched_at: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise IngestionError(f"{self.source_id}: empty text")
        if self.origin not in ORIGINS:
            raise IngestionError(f"{self.source_id}: unknown origin {self.origin!r}")


@dataclass(frozen=True)
class SourceGroup:
    group_id: str
    members: tuple[str, ...]
    centroid_hint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members or len(set(self.members)) != len(self.members):
            raise IngestionError(f"{self.group_id}: members must be non-empty and unique")


def load_corpus(corpus_dir: str | os.PathLike) -> list[SourceDocument]:
    """Read ``corpus.jsonl`` (source_id, origin, path, url?, fetched_at) and the files it names."""
    root = Path(corpus_dir)
    manifest = root / "corpus.jsonl"
    if not manifest.is_file():
        raise IngestionError(f"{root}: no corpus.jsonl manifest")
    docs: list[SourceDocument] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            sid, rel = rec["source_id"], rec["path"]
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(f"{manifest} line {lineno}: {exc}") from exc
        if sid in seen:
            raise IngestionError(f"{manifest} line {lineno}: duplicate source_id {sid!r}")
        seen.add(sid)
        text = (root / rel).read_text(encoding="utf-8")
        docs.append(
            SourceDocument(
                source_id=sid,
                text=text,
                origin=rec.get("origin", "blog"),
                location=rec.get("url") or rel,
                fetched_at=rec.get("fetched_at", ""),
            )
        )
    return docs


# -- shingling and MinHash -----------------------------------------------------


def tokenize(text: str) -> list[str]:
    return [t for t in text.lower().split() if not all(ch in _PUNCT for ch in t)]


def shingle(text: str, k: int) -> set[str]:
    if k < 1:
        raise ValueError("shingle size must be >= 1")
    tokens = tokenize(text)
    return {" ".join(tokens[i : i + k]) for i in range(len(tokens) - k + 1)}


def _base_hashes(shingles) -> np.ndarray:
    return np.fromiter(
        (
            int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little")
            for s in shingles
        ),
        dtype=np.uint64,
        count=len(shingles),
    )


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser: a bijection on 64-bit words
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True, eq=False)
class MinHashSignature:
    values: np.ndarray
    num_hashes: int
    seed: int
    empty: bool = False

    def __eq__(self, other):
        if not isinstance(other, MinHashSignature):
            return NotImplemented
        return (
            self.num_hashes == other.num_hashes
            and self.seed == other.seed
            and self.empty == other.empty
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def _salts(num_hashes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2**64 - 1, size=num_hashes, dtype=np.uint64, endpoint=True)


def minhash_signature(shingles, num_hashes: int = DEFAULT_NUM_HASHES, seed: int = 0) -> MinHashSignature:
    """values[i] = min over shingles of mix64(base_hash(s) ^ salt_i)."""
    if num_hashes < 1:
        raise ValueError("num_hashes must be >= 1")
    shingles = sorted(shingles)
    if not shingles:
        return MinHashSignature(np.full(num_hashes, EMPTY_SENTINEL, dtype=np.uint64), num_hashes, seed, True)
    base = _base_hashes(shingles)
    salts = _salts(num_hashes, seed)
    with np.errstate(over="ignore"):
        hashed = _mix64(base[None, :] ^ salts[:, None])
    return MinHashSignature(hashed.min(axis=1), num_hashes, seed)


def estimate_jaccard(a: MinHashSignature, b: MinHashSignature) -> float:
    if a.num_hashes != b.num_hashes or a.seed != b.seed:
        raise ComparabilityError(
            f"signatures not comparable: ({a.num_hashes}, {a.seed}) vs ({b.num_hashes}, {b.seed})"
        )
    return float(np.mean(a.values == b.values))


def exact_jaccard(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0


@dataclass(frozen=True)
class DuplicateCluster:
    kept: str
    members: tuple[str, ...]

    @property
    def dropped(self) -> tuple[str, ...]:
        return tuple(m for m in self.members if m != self.kept)


def document_signature(doc: SourceDocument, k: int, num_hashes: int, seed: int) -> MinHashSignature:
    sh = shingle(doc.text, k)
    if not sh:
        # shorter than one window: the whole token run is the only shingle
        sh = {" ".join(tokenize(doc.text))}
    return minhash_signature(sh, num_hashes, seed)


def dedup_corpus(
    docs: Sequence[SourceDocument],
    threshold: float = DEFAULT_DEDUP_THRESHOLD,
    *,
    k: int = DEFAULT_SHINGLE_SIZE,
    num_hashes: int = DEFAULT_NUM_HASHES,
    seed: int = 0,
) -> tuple[list[SourceDocument], list[DuplicateCluster]]:
    """Greedy all-pairs near-duplicate clustering.

    Documents are scanned in order; each unassigned document absorbs every
    later unassigned document whose estimated Jaccard to it is at least
    ``threshold``.  Each cluster keeps its longest text (ties: lowest id).
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    sigs = [document_signature(d, k, num_hashes, seed) for d in docs]
    assigned = [False] * len(docs)
    dropped: set[str] = set()
    clusters: list[DuplicateCluster] = []
    for i, doc in enumerate(docs):
        if assigned[i]:
            continue
        assigned[i] = True
        members = [i]
        for j in range(i + 1, len(docs)):
            if not assigned[j] and estimate_jaccard(sigs[i], sigs[j]) >= threshold:
                assigned[j] = True
                members.append(j)
        if len(members) > 1:
            rep = min(members, key=lambda m: (-len(docs[m].text), docs[m].source_id))
            ids = tuple(docs[m].source_id for m in members)
            clusters.append(DuplicateCluster(docs[rep].source_id, ids))
            dropped.update(docs[m].source_id for m in members if m != rep)
    kept = [d for d in docs if d.source_id not in dropped]
    return kept, clusters


# -- LLM relevance -------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    keep: bool
    reason: str
    malformed: bool = False


_VERDICT = re.compile(r"^\s*VERDICT:\s*(\w+)\s*$", re.I | re.M)
_REASON = re.compile(r"^\s*REASON:\s*(.+?)\s*$", re.I | re.M)


def parse_verdict(text: str, keep_word: str = "keep", drop_word: str = "drop") -> Verdict:
    m = _VERDICT.search(text)
    r = _REASON.search(text)
    reason = r.group(1) if r else ""
    if m and m.group(1).lower() == keep_word:
        return Verdict(True, reason)
    if m and m.group(1).lower() == drop_word:
        return Verdict(False, reason)
    return Verdict(True, "malformed verdict; kept", malformed=True)


def _excerpt(text: str, cap: int) -> str:
    if len(text) <= cap:
        return text
    return text[:cap] + f"\n[... {len(text) - cap} characters truncated ...]"


def classify_relevance(
    doc: SourceDocument,
    backend: ChatBackend,
    *,
    retry: RetryPolicy = RetryPolicy(),
    excerpt_chars: int = 12_000,
) -> Verdict:
    request = CompletionRequest(
        model=backend.model,
        messages=(
            ChatMessage("system", prompts.load("relevance").render()),
            ChatMessage(
                "user",
                f"source_id: {doc.source_id}\norigin: {doc.origin}\n\n"
                f"{_excerpt(doc.text, excerpt_chars)}",
            ),
        ),
    )
    response = complete_with_retries(backend, request, retry)
    verdict = parse_verdict(response.final_text or "")
    if verdict.malformed:
        logger.warning("relevance verdict for %s is malformed; keeping it", doc.source_id)
    return verdict


def filter_relevance(
    docs: Sequence[SourceDocument],
    backend: ChatBackend,
    *,
    max_workers: int = 4,
    retry: RetryPolicy = RetryPolicy(),
    progress_path: str | os.PathLike | None = None,
) -> tuple[list[SourceDocument], list[tuple[SourceDocument, str]]]:
    verdicts: dict[str, Verdict] = {}
    failure: BaseException | None = None
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        futures = {d.source_id: pool.submit(classify_relevance, d, backend, retry=retry) for d in docs}
        for sid, fut in futures.items():
            try:
                verdicts[sid] = fut.result()
            except BackendError as exc:
                failure = failure or exc
    if failure is not None:
        if progress_path is not None:
            Path(progress_path).write_text(
                json.dumps(
                    {sid: {"keep": v.keep, "reason": v.reason} for sid, v in verdicts.items()},
                    indent=2,
                ),
                encoding="utf-8",
            )
        raise RelevanceAborted(f"relevance filtering aborted: {failure}", verdicts) from failure
    kept = [d for d in docs if verdicts[d.source_id].keep]
    dropped = [(d, verdicts[d.source_id].reason) for d in docs if not verdicts[d.source_id].keep]
    return kept, dropped


# -- embeddings and clustering ---------------------------------------------------


class EmbeddingProvider(Protocol):
    dim: int

    def embed_text(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic hashed bag-of-words embedding (test provider)."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in tokenize(text):
            h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
            vec[h % self.dim] += 1.0
        if not vec.any():
            vec[0] = 1.0
        return vec


class HTTPEmbedder:
    """Embedding service speaking the common ``POST /embeddings`` contract."""

    def __init__(self, base_url: str, model: str, dim: int, api_key_env: str = "MODELSMITH_API_KEY",
                 transport: httpx.BaseTransport | None = None):
        self.dim = dim
        self.model = model
        key = os.environ.get(api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(base_url=base_url, headers=headers, transport=transport, timeout=120)

    def embed_text(self, text: str) -> np.ndarray:
        try:
            resp = self._client.post("/embeddings", json={"model": self.model, "input": text})
            resp.raise_for_status()
            vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=float)
        except (httpx.HTTPError, ValueError, KeyError, IndexError) as exc:
            raise RetryableError(f"embedding provider failed: {exc}") from exc
        if vec.shape != (self.dim,):
            raise RetryableError(f"embedding has shape {vec.shape}, expected ({self.dim},)")
        return vec


def embed(doc: SourceDocument | str, provider: EmbeddingProvider) -> np.ndarray:
    text = doc if isinstance(doc, str) else doc.text
    vec = np.asarray(provider.embed_text(text), dtype=float)
    norm = float(np.linalg.norm(vec))
    if not math.isfinite(norm) or norm == 0.0:
        raise RetryableError("embedding provider returned a zero or non-finite vector")
    return vec / norm


def cluster_sources(
    docs: Sequence[SourceDocument],
    provider: EmbeddingProvider,
    cosine_threshold: float = DEFAULT_COSINE_THRESHOLD,
    *,
    max_workers: int = 4,
) -> list[SourceGroup]:
    """Single pass: each doc joins the first group whose first member is close enough."""
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        vectors = list(pool.map(lambda d: embed(d, provider), docs))
    reps: list[np.ndarray] = []
    members: list[list[str]] = []
    for doc, vec in zip(docs, vectors):
        for g, rep in enumerate(reps):
            if float(rep @ vec) >= cosine_threshold:
                members[g].append(doc.source_id)
                break
        else:
            reps.append(vec)
            members.append([doc.source_id])
    by_id = {d.source_id: d for d in docs}
    return [
        SourceGroup(f"group-{i + 1:04d}", tuple(ids), _hint(by_id[ids[0]].text))
        for i, ids in enumerate(members)
    ]


def _hint(text: str) -> str:
    first = next((line.strip() for line in text.splitlines() if line.strip()), "")
    return first[:120]


def confirm_groups(
    groups: Sequence[SourceGroup],
    docs: dict[str, SourceDocument],
    backend: ChatBackend,
    *,
    retry: RetryPolicy = RetryPolicy(),
    excerpt_chars: int = 2_000,
) -> list[SourceGroup]:
    """Ask the backend to confirm each multi-member group; split rejected groups."""
    out: list[SourceGroup] = []
    for group in groups:
        if len(group.members) == 1:
            out.append(group)
            continue
        listing = "\n\n".join(
            f"### {sid}\n{_excerpt(docs[sid].text, excerpt_chars)}" for sid in group.members
        )
        request = CompletionRequest(
            model=backend.model,
            messages=(
                ChatMessage("system", prompts.load("group_check").render()),
                ChatMessage("user", f"group_id: {group.group_id}\n\n{listing}"),
            ),
        )
        text = complete_with_retries(backend, request, retry).final_text or ""
        verdict = parse_verdict(text, keep_word="keep", drop_word="split")
        if verdict.malformed:
            logger.warning("group check for %s is malformed; keeping group", group.group_id)
        if verdict.keep:
            out.append(group)
        else:
            out.extend(
                SourceGroup(f"{group.group_id}-{i + 1}", (sid,), _hint(docs[sid].text))
                for i, sid in enumerate(group.members)
            )
    return out


def write_groups_file(groups: Sequence[SourceGroup], path: str | os.PathLike, corpus_dir: str | None = None) -> None:
    records = []
    for g in groups:
        rec = {"group_id": g.group_id, "members": list(g.members)}
        if corpus_dir is not None:
            rec["corpus"] = corpus_dir
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")


def read_groups_file(path: str | os.PathLike) -> list[tuple[SourceGroup, str | None]]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return [(SourceGroup(r["group_id"], tuple(r["members"])), r.get("corpus")) for r in raw]
    except (ValueError, KeyError, TypeError) as exc:
        raise IngestionError(f"{path}: bad groups file ({exc})") from exc


@dataclass
class IngestionResult:
    ingested: int
    kept: list[SourceDocument]
    duplicate_clusters: list[DuplicateCluster]
    dropped: list[tuple[SourceDocument, str]]
    groups: list[SourceGroup] = field(default_factory=list)

    @property
    def deduped(self) -> int:
        return sum(len(c.dropped) for c in self.duplicate_clusters)


def ingest(
    docs: Sequence[SourceDocument],
    backend: ChatBackend,
    provider: EmbeddingProvider,
    *,
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD,
    shingle_size: int = DEFAULT_SHINGLE_SIZE,
    num_hashes: int = DEFAULT_NUM_HASHES,
    seed: int = 0,
    cosine_threshold: float = DEFAULT_COSINE_THRESHOLD,
    max_workers: int = 4,
    retry: RetryPolicy = RetryPolicy(),
) -> IngestionResult:
    """dedup -> relevance filter -> embedding clusters -> group confirmation."""
    unique, clusters = dedup_corpus(docs, dedup_threshold, k=shingle_size, num_hashes=num_hashes, seed=seed)
    relevant, dropped = filter_relevance(unique, backend, max_workers=max_workers, retry=retry)
    groups = cluster_sources(relevant, provider, cosine_threshold, max_workers=max_workers)
    groups = confirm_groups(groups, {d.source_id: d for d in relevant}, backend, retry=retry)
    return IngestionResult(len(docs), relevant, clusters, dropped, groups)
