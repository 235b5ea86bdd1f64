"""One end-to-end run: setup, manager, aggregator, final report."""

from __future__ import annotations

import json
import logging
import os
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from . import knowledge as ks
from .agents.roles import AgentSettings, AggregatorOutput, RunContext, run_aggregator, run_manager, run_setup
from .budget import RunBudget, enforce_budget
from .llm import ChatBackend
from .report import plot_metric_trajectory, render_report, write_repo_summary
from .task import TaskError, TaskSpec
from .workspace import create_repository

logger = logging.getLogger(__name__)

DEFAULT_REPOS = 7
DEFAULT_WALL_CLOCK = 24 * 3600.0
RUN_STATUSES = ("success", "partial", "failed")


class InvalidInputError(Exception):
    """The run cannot start: bad task, knowledge base, or run directory."""


@dataclass
class RunOutput:
    run_dir: Path
    final_dir: Path
    status: str
    ledger: dict = field(default_factory=dict)
    failed_phase: str | None = None
    error: str | None = None
    source_repos: list[int] = field(default_factory=list)
    strategy: str = ""

    @property
    def report_path(self) -> Path:
        return self.final_dir / "report.md"


def _now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _new_run_dir(root: Path, task_id: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    return root / f"{task_id}-{stamp}-{os.getpid()}"


def run_task(
    task: TaskSpec,
    kb_path: str | os.PathLike,
    backend: ChatBackend,
    n_repos: int = DEFAULT_REPOS,
    budget: RunBudget | None = None,
    run_dir: str | os.PathLike | None = None,
    *,
    settings: AgentSettings | None = None,
    clock: Callable[[], float] = time.monotonic,
    runs_root: str | os.PathLike = "runs",
) -> RunOutput:
    """Run the full agent pipeline on ``task``; invalid inputs raise before any backend call."""
    try:
        task.validate()
    except TaskError as exc:
        raise InvalidInputError(str(exc)) from exc
    if n_repos < 1:
        raise InvalidInputError("at least one repository is required")
    try:
        kb = ks.load_knowledge_base(kb_path, ks.STRICT)
    except ks.KnowledgeError as exc:
        raise InvalidInputError(f"knowledge base {kb_path}: {exc}") from exc
    except OSError as exc:
        raise InvalidInputError(f"knowledge base {kb_path}: {exc}") from exc

    run_dir = Path(run_dir) if run_dir is not None else _new_run_dir(Path(runs_root), task.task_id)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise InvalidInputError(f"run directory {run_dir} is not empty")
    budget = budget or RunBudget(DEFAULT_WALL_CLOCK)
    tracker = enforce_budget(budget, clock)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_id = run_dir.name
    started_at = _now_iso()
    (run_dir / "task.json").write_text(json.dumps(task.to_dict(), indent=2), encoding="utf-8")
    meta = {
        "run_id": run_id,
        "task_id": task.task_id,
        "n_repos": n_repos,
        "kb_path": str(Path(kb_path).resolve()),
        "backend_model": backend.model,
        "budget": {
            "wall_clock_seconds": budget.wall_clock_seconds,
            "aggregator_reserve_seconds": budget.aggregator_reserve_seconds,
            "per_execute_timeout": budget.per_execute_timeout,
        },
        "started_at": started_at,
    }
    _write_json(run_dir / "run.json", meta)

    repos_root = run_dir / "repos"
    repos = {i: create_repository(repos_root, i) for i in range(1, n_repos + 1)}
    ctx = RunContext(
        run_dir=run_dir,
        task=task,
        kb=kb,
        backend=backend,
        repos=repos,
        budget_view=tracker.manager,
        settings=settings or AgentSettings(),
        clock=clock,
    )
    phases: dict[str, float] = {}
    failed_phase = error = None
    notes: list[str] = []
    agg: AggregatorOutput | None = None

    def timed(name, fn):
        t0 = clock()
        try:
            return fn()
        finally:
            phases[name] = round(clock() - t0, 3)

    try:
        setup_transcript, overrides = timed("setup", lambda: run_setup(ctx, budget_view=tracker.manager))
        ctx.env_overrides = overrides
        if setup_transcript is None or setup_transcript.outcome != "completed":
            notes.append("setup did not complete; running without environment overrides")
    except Exception as exc:  # setup is never fatal
        notes.append(f"setup crashed: {exc}")

    try:
        manager = timed("manager", lambda: run_manager(ctx, budget_view=tracker.manager))
        if manager.outcome != "completed":
            notes.append(f"manager ended with outcome {manager.outcome}")
        if manager.error:
            notes.append(f"manager error: {manager.error}")
    except Exception as exc:
        failed_phase, error = "manager", f"{type(exc).__name__}: {exc}"
        logger.error("manager phase crashed\n%s", traceback.format_exc())

    if failed_phase is None:
        try:
            ctx.budget_view = tracker.aggregator
            agg = timed("aggregator", lambda: run_aggregator(ctx, budget_view=tracker.aggregator))
            notes.extend(agg.notes)
        except Exception as exc:
            failed_phase, error = "aggregator", f"{type(exc).__name__}: {exc}"
            logger.error("aggregator phase crashed\n%s", traceback.format_exc())

    final_dir = run_dir / "final"
    final_dir.mkdir(exist_ok=True)
    if failed_phase:
        status = "failed"
        notes.append(f"phase {failed_phase} failed: {error}")
    elif agg is not None and agg.status != "failed" and agg.inference_path.is_file() and agg.source_repos:
        status = "success"
    elif any(r.status == "scored" or any(x is not None and x.parsed_metrics for x in r.results) for r in repos.values()):
        status = "partial"
    else:
        status = "failed"

    transcripts = ctx.transcripts.transcripts
    ledger = {
        "input_tokens": sum(t.usage.input_tokens for t in transcripts),
        "output_tokens": sum(t.usage.output_tokens for t in transcripts),
        "backend_calls": sum(len(t.steps) for t in transcripts),
        "agent_invocations": len(transcripts),
        "elapsed_seconds": round(tracker.elapsed(), 3),
        **{f"{k}_seconds": v for k, v in phases.items()},
    }
    source_repos = agg.source_repos if agg else []
    strategy = agg.strategy if agg else "none (aggregator did not run)"
    ordered = [repos[i] for i in sorted(repos)]
    write_repo_summary(ordered, source_repos, final_dir / "repo_summary.tsv")
    try:
        plot_metric_trajectory(ordered, task, final_dir / "metric_trajectory.png")
    except Exception as exc:  # a figure must never sink a run
        notes.append(f"could not draw the metric trajectory: {exc}")
    report = render_report(
        task=task,
        run_id=run_id,
        status=status,
        repos=ordered,
        strategy=strategy,
        source_repos=source_repos,
        weights=agg.weights if agg else None,
        blend_score=agg.blend_score if agg else None,
        ledger=ledger,
        notes=notes,
        aggregator_text=agg.final_text if agg else "",
        next_steps=[
            f"distill this run into the knowledge base: modelsmith evolve-run --run-dir {run_dir} --kb {kb_path}",
            f"score the final model: python3 {final_dir / 'inference.py'} <test_dir> <predictions.csv>",
        ],
    )
    (final_dir / "report.md").write_text(report, encoding="utf-8")
    _write_json(
        final_dir / "manifest.json",
        {
            "status": status,
            "strategy": strategy,
            "source_repos": source_repos,
            "weights": agg.weights if agg else {},
            "inference": "inference.py" if (final_dir / "inference.py").is_file() else None,
        },
    )
    meta.update(status=status, ended_at=_now_iso(), failed_phase=failed_phase, ledger=ledger)
    _write_json(run_dir / "run.json", meta)
    return RunOutput(run_dir, final_dir, status, ledger, failed_phase, error, list(source_repos), strategy)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
