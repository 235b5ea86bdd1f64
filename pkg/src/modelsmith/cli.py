"""Command-line entry point: ``modelsmith <subcommand>``.

Exit codes: 0 success, 2 partial, 1 failure, 3 invalid input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import knowledge as ks
from .agents.roles import AgentSettings
from .budget import BudgetError, RunBudget
from .builders import BootstrapConfig, BuilderError, EmptyKnowledgeBaseError, bootstrap_knowledge_base
from .evolution import EvolutionRefused, evolve_from_web, post_run_evolve
from .ingestion import HashingEmbedder, HTTPEmbedder, IngestionError, ingest, load_corpus, write_groups_file
from .llm import BackendConfig, BackendError, HTTPBackend, RetryPolicy, load_scripted_backend
from .orchestrator import DEFAULT_REPOS, InvalidInputError, run_task
from .task import TaskError, load_task_file

EXIT_OK, EXIT_FAILURE, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2, 3
RUN_EXIT = {"success": EXIT_OK, "partial": EXIT_PARTIAL, "failed": EXIT_FAILURE}

logger = logging.getLogger("modelsmith")


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def _backend(args, config: dict):
    if getattr(args, "scripted", None):
        try:
            return load_scripted_backend(args.scripted)
        except (OSError, BackendError) as exc:
            raise UsageError(f"script {args.scripted}: {exc}") from exc
    settings = dict(config.get("backend", {}))
    if getattr(args, "backend_config", None):
        more = _load_config(args.backend_config)
        settings.update(more.get("backend", more))
    if not settings:
        raise UsageError("no backend: pass --backend-config, --config with a backend section, or --scripted")
    return HTTPBackend(BackendConfig.from_mapping(settings))


def _provider(config: dict):
    emb = dict(config.get("embedding", {}))
    kind = emb.pop("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(int(emb.get("dim", 256)))
    if kind == "http":
        try:
            return HTTPEmbedder(emb["base_url"], emb["model"], int(emb["dim"]), emb.get("api_key_env", "MODELSMITH_API_KEY"))
        except KeyError as exc:
            raise UsageError(f"embedding config lacks {exc}") from exc
    raise UsageError(f"unknown embedding provider kind {kind!r}")


def _retry(config: dict) -> RetryPolicy:
    return RetryPolicy(**config.get("retry", {}))


def cmd_run(args, config: dict) -> int:
    try:
        task = load_task_file(args.task_file, args.data_dir)
    except TaskError as exc:
        raise UsageError(str(exc)) from exc
    b = dict(config.get("budget", {}))
    if args.budget is not None:
        b["wall_clock_seconds"] = args.budget
    try:
        budget = RunBudget(**b) if b else None
    except (BudgetError, TypeError) as exc:
        raise UsageError(f"budget: {exc}") from exc
    agents_cfg = config.get("agents", {})
    settings = AgentSettings(retry=_retry(config))
    settings.max_steps.update(agents_cfg.get("max_steps", {}))
    if "context_budget" in agents_cfg:
        settings.context_budget = int(agents_cfg["context_budget"])
    backend = _backend(args, config)
    try:
        out = run_task(task, args.kb, backend, args.repos, budget, args.run_dir, settings=settings)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    print(f"status: {out.status}")
    print(f"run_dir: {out.run_dir}")
    print(f"report: {out.report_path}")
    if out.failed_phase:
        print(f"failed phase: {out.failed_phase}: {out.error}", file=sys.stderr)
    return RUN_EXIT[out.status]


def cmd_bootstrap(args, config: dict) -> int:
    cfg = BootstrapConfig.from_mapping(config.get("bootstrap", {}))
    if args.seed is not None:
        cfg.seed = args.seed
    l1_index = args.l1_index or ks.default_l1_index_path()
    try:
        corpus = load_corpus(args.corpus)
    except (IngestionError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    backend = _backend(args, config)
    try:
        _, report = bootstrap_knowledge_base(corpus, l1_index, backend, _provider(config), cfg, out_path=args.out_kb)
    except EmptyKnowledgeBaseError as exc:
        print(f"bootstrap failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_ingest(args, config: dict) -> int:
    cfg = BootstrapConfig.from_mapping(config.get("bootstrap", {}))
    try:
        docs = load_corpus(args.corpus)
    except (IngestionError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    result = ingest(
        docs,
        _backend(args, config),
        _provider(config),
        dedup_threshold=cfg.dedup_threshold,
        shingle_size=cfg.shingle_size,
        num_hashes=cfg.num_hashes,
        seed=cfg.seed,
        cosine_threshold=cfg.cosine_threshold,
        max_workers=cfg.max_workers,
        retry=cfg.retry,
    )
    write_groups_file(result.groups, args.out, str(Path(args.corpus).resolve()))
    print(f"ingested {result.ingested}; near-duplicates removed {result.deduped}; "
          f"irrelevant dropped {len(result.dropped)}; groups {len(result.groups)} -> {args.out}")
    return EXIT_OK


def cmd_evolve_run(args, config: dict) -> int:
    backend = _backend(args, config)
    try:
        report = post_run_evolve(args.run_dir, args.kb, backend, retry=_retry(config))
    except EvolutionRefused as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except BuilderError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.ok else EXIT_FAILURE


def cmd_evolve_web(args, config: dict) -> int:
    backend = _backend(args, config)
    try:
        report = evolve_from_web(args.groups, args.kb, backend, corpus_dir=args.corpus, retry=_retry(config))
    except IngestionError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps(report.to_dict(), indent=2))
    if report.failures:
        return EXIT_PARTIAL if report.changes else EXIT_FAILURE
    return EXIT_OK


def cmd_kb_validate(args, config: dict) -> int:
    try:
        kb = ks.load_knowledge_base(args.kb, mode=None)
    except ks.IntegrityError as exc:
        for v in exc.violations:
            print(f"{v.key}\t{v.doc_id or '-'}\t{v.rule}")
        print(f"{args.mode}: {exc}")
        return EXIT_FAILURE
    except (ks.KnowledgeError, OSError) as exc:
        print(f"cannot load {args.kb}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    report = ks.validate_integrity(kb, args.mode)
    for v in report.violations:
        print(f"{v.key}\t{v.doc_id or '-'}\t{v.rule}")
    print(f"{args.mode}: {'ok' if report.ok else f'{len(report.violations)} violation(s)'}; "
          f"{len(kb.l1_values)} categories built, {kb.doc_count()} documents")
    return EXIT_OK if report.ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modelsmith", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML with backend, budget, agents, bootstrap, embedding and retry sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def backend_flags(sp):
        sp.add_argument("--backend-config", help="YAML with chat backend settings")
        sp.add_argument("--scripted", metavar="FILE", help="replay a JSONL script instead of a live backend")

    r = sub.add_parser("run", help="run the agent pipeline on one task")
    r.add_argument("--task-file", required=True)
    r.add_argument("--data-dir", help="overrides the task file's data_dir")
    r.add_argument("--kb", required=True)
    r.add_argument("--repos", type=int, default=DEFAULT_REPOS)
    r.add_argument("--budget", type=float, metavar="SECONDS")
    r.add_argument("--run-dir")
    backend_flags(r)
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bootstrap", help="build a knowledge base from a source corpus")
    b.add_argument("--corpus", required=True)
    b.add_argument("--l1-index", help="taxonomy JSON (default: the bundled 30-category index)")
    b.add_argument("--out-kb", required=True)
    b.add_argument("--seed", type=int)
    backend_flags(b)
    b.set_defaults(fn=cmd_bootstrap)

    i = sub.add_parser("ingest", help="dedup, filter and group a corpus into a groups file")
    i.add_argument("--corpus", required=True)
    i.add_argument("--out", required=True)
    backend_flags(i)
    i.set_defaults(fn=cmd_ingest)

    e = sub.add_parser("evolve-run", help="distill a completed run into the knowledge base")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--kb", required=True)
    backend_flags(e)
    e.set_defaults(fn=cmd_evolve_run)

    w = sub.add_parser("evolve-web", help="add documents from a groups file")
    w.add_argument("--groups", required=True)
    w.add_argument("--kb", required=True)
    w.add_argument("--corpus", help="corpus directory for groups that do not name one")
    backend_flags(w)
    w.set_defaults(fn=cmd_evolve_web)

    v = sub.add_parser("kb-validate", help="check knowledge-base integrity")
    v.add_argument("--kb", required=True)
    v.add_argument("--mode", choices=(ks.STRICT, ks.PENDING_EVOLUTION), default=ks.STRICT)
    v.set_defaults(fn=cmd_kb_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args, _load_config(args.config))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        return EXIT_FAILURE
    except Exception as exc:
        logger.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
