"""The six agent roles and their tool sets.

Workers (designer, coder, tuner) operate on one repository each under an
exclusive lease; the manager dispatches them, possibly several per reply,
and sees their results in completion order.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .. import ensembling
from ..budget import Unlimited
from ..knowledge import KnowledgeBase
from ..llm import ChatBackend, RetryPolicy, ToolParam, ToolSchema
from ..task import TaskSpec
from ..workspace import (
    ExecutionError,
    SecurityError,
    SolutionRepository,
    WorkspaceError,
    best_metric,
    confine,
    execute,
    halt_repository,
    read_artifact,
    run_shell,
    truncate_middle,
    write_artifact,
)
from .context import QUERY_SCHEMA, LoadedKnowledge, assemble_context, query_tool
from .loop import AgentRole, AgentTranscript, Deferred, Tool, ToolError, ToolRegistry, run_agent

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = {
    "designer": 12,
    "coder": 40,
    "tuner": 30,
    "manager": 120,
    "setup": 10,
    "aggregator": 20,
}
WORKERS = ("designer", "coder", "tuner")
TOOL_OUTPUT_TAIL = 4_000
_EXPORT = re.compile(r"^\s*EXPORT\s+([A-Za-z_][A-Za-z0-9_]*)=(.*)$", re.M)


class PreconditionError(Exception):
    pass


def role_tools(name: str, repo_ids: list[int], repo_id: int | None = None) -> frozenset[str]:
    if name == "setup":
        return frozenset({"execute_env", "query"})
    if name == "manager":
        tools = {"query"}
        for i in repo_ids:
            tools |= {f"invoke_designer_{i}", f"invoke_coder_{i}", f"invoke_tuner_{i}", f"read_{i}", f"halt_{i}"}
        return frozenset(tools)
    if name in WORKERS:
        return frozenset({f"read_{repo_id}", f"write_{repo_id}", f"execute_{repo_id}", "query"})
    if name == "aggregator":
        return frozenset(
            {f"read_{i}" for i in repo_ids} | {"write_final", "execute_final", "query", "hill_climb_blend"}
        )
    raise ValueError(f"unknown role {name!r}")


def make_role(name: str, repo_ids: list[int], repo_id: int | None = None, max_steps: int | None = None) -> AgentRole:
    return AgentRole(name, role_tools(name, repo_ids, repo_id), max_steps or DEFAULT_MAX_STEPS[name])


class LeaseTable:
    """Exclusive, non-blocking per-repository leases."""

    def __init__(self):
        self._lock = threading.Lock()
        self._holders: dict[int, str] = {}

    def acquire(self, repo_id: int, holder: str) -> bool:
        with self._lock:
            if repo_id in self._holders:
                return False
            self._holders[repo_id] = holder
            return True

    def release(self, repo_id: int) -> None:
        with self._lock:
            self._holders.pop(repo_id, None)

    def holder(self, repo_id: int) -> str | None:
        with self._lock:
            return self._holders.get(repo_id)


class TranscriptStore:
    """Numbers and persists transcripts under ``<run_dir>/transcripts``."""

    def __init__(self, run_dir: str | os.PathLike | None):
        self.dir = Path(run_dir) / "transcripts" if run_dir is not None else None
        self._lock = threading.Lock()
        self._seq = 0
        self.transcripts: list[AgentTranscript] = []

    def save(self, transcript: AgentTranscript) -> Path | None:
        with self._lock:
            self._seq += 1
            self.transcripts.append(transcript)
            seq = self._seq
        if self.dir is None:
            return None
        repo = f"-{transcript.repo_id}" if transcript.repo_id is not None else ""
        path = self.dir / f"{transcript.role}{repo}-{seq:04d}.jsonl"
        transcript.write_jsonl(path)
        return path


@dataclass
class AgentSettings:
    max_steps: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_MAX_STEPS))
    context_budget: int = 160_000
    temperature: float = 1.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)


@dataclass
class RunContext:
    run_dir: Path
    task: TaskSpec
    kb: KnowledgeBase
    backend: ChatBackend
    repos: dict[int, SolutionRepository]
    budget_view: object = field(default_factory=Unlimited)
    env_overrides: dict[str, str] = field(default_factory=dict)
    settings: AgentSettings = field(default_factory=AgentSettings)
    leases: LeaseTable = field(default_factory=LeaseTable)
    transcripts: TranscriptStore | None = None
    clock: Callable[[], float] = time.time

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)
        if self.transcripts is None:
            self.transcripts = TranscriptStore(self.run_dir)

    @property
    def repo_ids(self) -> list[int]:
        return sorted(self.repos)

    def role(self, name: str, repo_id: int | None = None) -> AgentRole:
        return make_role(name, self.repo_ids, repo_id, self.settings.max_steps.get(name))

    def exec_env(self) -> dict[str, str]:
        env = {"TASK_DATA_DIR": str(Path(self.task.data_dir).resolve())}
        env.update(self.env_overrides)
        return env

    def run(self, role: AgentRole, context, registry, *, tag, repo_id=None, budget_view=None, stop_check=None):
        kwargs = {}
        if stop_check is not None:
            kwargs["stop_check"] = stop_check
        transcript = run_agent(
            role,
            context,
            registry,
            self.backend,
            budget_view or self.budget_view,
            tag=tag,
            repo_id=repo_id,
            context_budget=self.settings.context_budget,
            retry=self.settings.retry,
            temperature=self.settings.temperature,
            clock=self.clock,
            **kwargs,
        )
        self.transcripts.save(transcript)
        return transcript


# -- shared tool builders -----------------------------------------------------------


def _str_arg(args: dict, name: str, required: bool = True) -> str | None:
    value = args.get(name)
    if value is None:
        if required:
            raise ToolError(f"missing argument {name!r}")
        return None
    if not isinstance(value, str):
        raise ToolError(f"argument {name!r} must be a string")
    return value


def _tail_file(path: str, cap: int = TOOL_OUTPUT_TAIL) -> str:
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError:
        return ""
    return text if len(text) <= cap else f"[... {len(text) - cap} characters omitted ...]\n" + text[-cap:]


def query_tool_for(kb: KnowledgeBase, loaded: LoadedKnowledge) -> Tool:
    return Tool(QUERY_SCHEMA, lambda args: query_tool(kb, loaded, args))


def read_tool(repo: SolutionRepository) -> Tool:
    i = repo.repo_id

    def handler(args):
        path = _str_arg(args, "path")
        try:
            res = read_artifact(repo, path)
        except (SecurityError, FileNotFoundError) as exc:
            raise ToolError(str(exc)) from None
        flag = " (truncated)" if res.truncated else ""
        return f"{repo.name}/{path}{flag}:\n{res.text}"

    schema = ToolSchema(
        f"read_{i}", f"Read a file of repository {i}.", (ToolParam("path", "string", True, "relative path"),)
    )
    return Tool(schema, handler)


class WorkerState:
    def __init__(self):
        self.wrote_plan = False
        self.executions = []


def write_tool(repo: SolutionRepository, state: WorkerState) -> Tool:
    def handler(args):
        path = _str_arg(args, "path")
        content = _str_arg(args, "content")
        try:
            write_artifact(repo, path, content)
        except WorkspaceError as exc:
            raise ToolError(str(exc)) from None
        if Path(path) == Path("plan.md"):
            state.wrote_plan = True
        return f"wrote {path} ({len(content)} characters); status {repo.status}"

    schema = ToolSchema(
        f"write_{repo.repo_id}",
        f"Write a file of repository {repo.repo_id} (parents are created).",
        (ToolParam("path", "string", True, "relative path"), ToolParam("content", "string", True, "file content")),
    )
    return Tool(schema, handler)


def _format_result(res) -> str:
    metric = (
        f"\nmetrics: {res.parsed_metrics.metric_name}={res.parsed_metrics.value:g} ({res.parsed_metrics.split})"
        if res.parsed_metrics else ""
    )
    warn = f"\nwarning: {res.warning}" if res.warning else ""
    flag = " TIMED OUT" if res.timed_out else ""
    return (
        f"{res.run_id} exit={res.exit_code}{flag} duration={res.duration:.1f}s{metric}{warn}\n"
        f"--- stdout ---\n{_tail_file(res.stdout_path)}\n--- stderr ---\n{_tail_file(res.stderr_path)}"
    )


def execute_tool(ctx: RunContext, repo: SolutionRepository, state: WorkerState, budget_view) -> Tool:
    def handler(args):
        command = _str_arg(args, "command")
        requested = args.get("timeout")
        if requested is not None and not isinstance(requested, (int, float)):
            raise ToolError("timeout must be a number of seconds")
        timeout = budget_view.execute_timeout(requested)
        try:
            res = execute(repo, command, timeout, ctx.exec_env())
        except (WorkspaceError, ExecutionError) as exc:
            raise ToolError(str(exc)) from None
        state.executions.append(res)
        return _format_result(res)

    schema = ToolSchema(
        f"execute_{repo.repo_id}",
        f"Run a shell command in repository {repo.repo_id}; metrics.json is collected afterwards.",
        (
            ToolParam("command", "string", True, "shell command"),
            ToolParam("timeout", "number", False, "seconds"),
        ),
    )
    return Tool(schema, handler)


# -- workers ----------------------------------------------------------------------------


def _run_worker(
    name: str,
    ctx: RunContext,
    repo: SolutionRepository,
    instructions: str = "",
    budget_view=None,
) -> tuple[AgentTranscript, WorkerState]:
    budget_view = budget_view or ctx.budget_view
    loaded = LoadedKnowledge()
    state = WorkerState()
    role = ctx.role(name, repo.repo_id)
    registry = ToolRegistry(
        [
            read_tool(repo),
            write_tool(repo, state),
            execute_tool(ctx, repo, state, budget_view),
            query_tool_for(ctx.kb, loaded),
        ]
    )
    context = assemble_context(
        role, ctx.task, repo, ctx.kb, loaded, budget=ctx.settings.context_budget, instructions=instructions
    )
    tag = f"{name}@{repo.name}"
    transcript = _run_unsaved(ctx, role, context, registry, tag, repo.repo_id, budget_view)
    return transcript, state


def _run_unsaved(ctx, role, context, registry, tag, repo_id, budget_view, stop_check=None):
    kwargs = {"stop_check": stop_check} if stop_check else {}
    return run_agent(
        role,
        context,
        registry,
        ctx.backend,
        budget_view,
        tag=tag,
        repo_id=repo_id,
        context_budget=ctx.settings.context_budget,
        retry=ctx.settings.retry,
        temperature=ctx.settings.temperature,
        clock=ctx.clock,
        **kwargs,
    )


def run_designer(ctx: RunContext, repo: SolutionRepository, instructions: str = "", budget_view=None) -> AgentTranscript:
    transcript, state = _run_worker("designer", ctx, repo, instructions, budget_view)
    if transcript.outcome == "completed" and not state.wrote_plan:
        transcript.outcome = "failed"
        transcript.notes.append("designer finished without writing plan.md")
    ctx.transcripts.save(transcript)
    return transcript


def run_coder(ctx: RunContext, repo: SolutionRepository, instructions: str = "", budget_view=None) -> AgentTranscript:
    if not repo.at_least("planned"):
        raise PreconditionError(f"{repo.name} has no plan (status {repo.status}); run the designer first")
    transcript, state = _run_worker("coder", ctx, repo, instructions, budget_view)
    if transcript.outcome == "completed":
        if not state.executions:
            transcript.outcome = "failed"
            transcript.notes.append("coder finished without a verification run")
        elif state.executions[-1].exit_code != 0:
            transcript.outcome = "failed"
            transcript.notes.append("last verification run did not exit cleanly")
    ctx.transcripts.save(transcript)
    return transcript


def run_tuner(ctx: RunContext, repo: SolutionRepository, instructions: str = "", budget_view=None) -> AgentTranscript:
    if not repo.at_least("coded"):
        raise PreconditionError(f"{repo.name} has no code (status {repo.status}); run the coder first")
    transcript, state = _run_worker("tuner", ctx, repo, instructions, budget_view)
    if transcript.outcome == "completed" and not state.executions:
        transcript.outcome = "failed"
        transcript.notes.append("tuner finished without launching a run")
    ctx.transcripts.save(transcript)
    return transcript


WORKER_RUNNERS = {"designer": run_designer, "coder": run_coder, "tuner": run_tuner}


# -- setup --------------------------------------------------------------------------------


def run_setup(ctx: RunContext, env_root: str | os.PathLike | None = None, budget_view=None) -> tuple[AgentTranscript | None, dict[str, str]]:
    """Prepare the shared environment; failures are logged and yield no overrides."""
    budget_view = budget_view or ctx.budget_view
    env_root = Path(env_root or ctx.run_dir / "env")
    env_root.mkdir(parents=True, exist_ok=True)
    loaded = LoadedKnowledge()
    counter = [0]

    def execute_env(args):
        command = _str_arg(args, "command")
        counter[0] += 1
        out = env_root / "logs" / f"setup-{counter[0]:03d}.out"
        err = out.with_suffix(".err")
        env = dict(os.environ)
        env.update(ctx.exec_env())
        started = time.time()
        try:
            code, timed_out = run_shell(env_root, command, budget_view.execute_timeout(args.get("timeout")), env, out, err)
        except ExecutionError as exc:
            raise ToolError(str(exc)) from None
        flag = " TIMED OUT" if timed_out else ""
        return (
            f"exit={code}{flag} duration={time.time() - started:.1f}s\n--- stdout ---\n{_tail_file(str(out))}"
            f"\n--- stderr ---\n{_tail_file(str(err))}"
        )

    registry = ToolRegistry(
        [
            Tool(
                ToolSchema(
                    "execute_env",
                    "Run a shell command in the shared environment directory.",
                    (ToolParam("command", "string", True, ""), ToolParam("timeout", "number", False, "")),
                ),
                execute_env,
            ),
            query_tool_for(ctx.kb, loaded),
        ]
    )
    role = ctx.role("setup")
    try:
        context = assemble_context(role, ctx.task, None, ctx.kb, loaded, budget=ctx.settings.context_budget)
        transcript = ctx.run(role, context, registry, tag="setup", budget_view=budget_view)
    except Exception as exc:
        logger.warning("setup agent crashed (%s); continuing without overrides", exc)
        return None, {}
    if transcript.outcome != "completed":
        logger.warning("setup ended with %s; continuing without overrides", transcript.outcome)
        return transcript, {}
    overrides = {m.group(1): m.group(2).strip() for m in _EXPORT.finditer(transcript.final_text)}
    return transcript, overrides


# -- manager --------------------------------------------------------------------------------


def _worker_summary(kind: str, repo: SolutionRepository, transcript: AgentTranscript, elapsed: float) -> str:
    best = best_metric(repo)
    best_txt = f"best {best.metric_name}={best.value:g}" if best else "no validation metric yet"
    notes = f"; notes: {'; '.join(transcript.notes)}" if transcript.notes else ""
    error = f"; error: {transcript.error}" if transcript.error else ""
    text = truncate_middle(transcript.final_text or "", 2_000)[0]
    return (
        f"{kind}@{repo.name} finished: outcome={transcript.outcome}; status={repo.status}; "
        f"{best_txt}; steps={len(transcript.steps)}; wall-clock={elapsed:.1f}s{notes}{error}\n{text}"
    )


def manager_tools(ctx: RunContext, loaded: LoadedKnowledge) -> ToolRegistry:
    registry = ToolRegistry([query_tool_for(ctx.kb, loaded)])
    for i, repo in sorted(ctx.repos.items()):
        registry.add(read_tool(repo))
        for kind in WORKERS:
            registry.add(Tool(
                ToolSchema(
                    f"invoke_{kind}_{i}",
                    f"Run the {kind} on repository {i}. Calls in one reply run in parallel.",
                    (ToolParam("instructions", "string", False, "guidance for the worker"),),
                ),
                _invoker(ctx, kind, repo),
            ))
        registry.add(Tool(
            ToolSchema(f"halt_{i}", f"Permanently stop repository {i}.", (ToolParam("reason", "string", True, ""),)),
            _halter(ctx, repo),
        ))
    return registry


def _invoker(ctx: RunContext, kind: str, repo: SolutionRepository):
    runner = WORKER_RUNNERS[kind]

    def handler(args):
        instructions = _str_arg(args, "instructions", required=False) or ""
        if repo.halted:
            raise ToolError(f"{repo.name} is halted")
        if not ctx.leases.acquire(repo.repo_id, kind):
            raise ToolError(f"{repo.name} is busy (leased by the {ctx.leases.holder(repo.repo_id)})")

        def work():
            started = time.time()
            try:
                transcript = runner(ctx, repo, instructions)
            except PreconditionError as exc:
                raise ToolError(str(exc)) from None
            finally:
                ctx.leases.release(repo.repo_id)
            return _worker_summary(kind, repo, transcript, time.time() - started)

        return Deferred(work)

    return handler


def _halter(ctx: RunContext, repo: SolutionRepository):
    def handler(args):
        reason = _str_arg(args, "reason")
        try:
            halt_repository(repo, reason)
        except WorkspaceError as exc:
            raise ToolError(str(exc)) from None
        return f"{repo.name} halted: {reason}"

    return handler


def run_manager(ctx: RunContext, budget_view=None) -> AgentTranscript:
    budget_view = budget_view or ctx.budget_view
    loaded = LoadedKnowledge()
    role = ctx.role("manager")
    registry = manager_tools(ctx, loaded)
    context = assemble_context(
        role,
        ctx.task,
        list(ctx.repos.values()),
        ctx.kb,
        loaded,
        budget=ctx.settings.context_budget,
        prompt_values={"n_repos": len(ctx.repos), "direction": ctx.task.direction},
    )

    def no_candidates():
        return "no_candidates" if all(r.halted for r in ctx.repos.values()) else None

    return ctx.run(role, context, registry, tag="manager", budget_view=budget_view, stop_check=no_candidates)


# -- aggregator ------------------------------------------------------------------------------


@dataclass
class AggregatorOutput:
    status: str  # "selected", "blended" or "failed"
    final_dir: Path
    source_repos: list[int] = field(default_factory=list)
    weights: dict[str, float] = field(default_factory=dict)
    blend_score: float | None = None
    candidates: list[int] = field(default_factory=list)
    transcript: AgentTranscript | None = None
    notes: list[str] = field(default_factory=list)
    final_text: str = ""

    @property
    def inference_path(self) -> Path:
        return self.final_dir / "inference.py"

    @property
    def strategy(self) -> str:
        if self.status == "blended":
            weights = ", ".join(f"{k}: {v:.4f}" for k, v in self.weights.items())
            return f"blend of {len(self.weights)} models with weights {{{weights}}}"
        if self.status == "selected":
            return "single best: " + ", ".join(f"repo-{i}" for i in self.source_repos)
        return "none (no usable candidate)"


def _repo_of_ref(ctx: RunContext, ref: str) -> tuple[SolutionRepository, Path]:
    """Resolve ``repo-<i>/<path>`` to a confined file."""
    head, _, rest = ref.partition("/")
    m = re.fullmatch(r"repo-(\d+)", head)
    if not m or int(m.group(1)) not in ctx.repos or not rest:
        raise ToolError(f"bad file reference {ref!r}; expected repo-<i>/<path>")
    repo = ctx.repos[int(m.group(1))]
    try:
        return repo, confine(repo.root, rest)
    except SecurityError as exc:
        raise ToolError(str(exc)) from None


def candidates(ctx: RunContext) -> list[SolutionRepository]:
    return [r for _, r in sorted(ctx.repos.items()) if not r.halted and best_metric(r) is not None]


def _rank_key(task: TaskSpec, repo: SolutionRepository):
    best = best_metric(repo)
    return (-best.value if best.higher_is_better else best.value, repo.repo_id)


def run_aggregator(ctx: RunContext, budget_view=None) -> AggregatorOutput:
    budget_view = budget_view or ctx.budget_view
    final_dir = ctx.run_dir / "final"
    final_dir.mkdir(parents=True, exist_ok=True)
    pool = candidates(ctx)
    out = AggregatorOutput("failed", final_dir, candidates=[r.repo_id for r in pool])
    if not pool:
        out.notes.append("no scored, non-halted repository to aggregate")
        return out

    loaded = LoadedKnowledge()
    sources: set[int] = set()
    blend_state: dict = {}
    logs = ctx.run_dir / "final_logs"
    counter = [0]

    def write_final(args):
        path = _str_arg(args, "path")
        try:
            target = confine(final_dir, path)
        except SecurityError as exc:
            raise ToolError(str(exc)) from None
        src_repo = args.get("source_repo")
        if src_repo is not None:
            if not isinstance(src_repo, int) or src_repo not in ctx.repos:
                raise ToolError(f"unknown source_repo {src_repo!r}")
            src_path = _str_arg(args, "source_path")
            repo = ctx.repos[src_repo]
            try:
                src = confine(repo.root, src_path)
            except SecurityError as exc:
                raise ToolError(str(exc)) from None
            if not src.exists():
                raise ToolError(f"{repo.name} has no {src_path!r}")
            target.parent.mkdir(parents=True, exist_ok=True)
            if src.is_dir():
                shutil.copytree(src, target, dirs_exist_ok=True)
            else:
                shutil.copy2(src, target)
            sources.add(src_repo)
            return f"copied {repo.name}/{src_path} to final/{path}"
        content = _str_arg(args, "content")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
        return f"wrote final/{path} ({len(content)} characters)"

    def execute_final(args):
        command = _str_arg(args, "command")
        counter[0] += 1
        o, e = logs / f"final-{counter[0]:03d}.out", logs / f"final-{counter[0]:03d}.err"
        env = dict(os.environ)
        env.update(ctx.exec_env())
        try:
            code, timed_out = run_shell(final_dir, command, budget_view.execute_timeout(args.get("timeout")), env, o, e)
        except ExecutionError as exc:
            raise ToolError(str(exc)) from None
        flag = " TIMED OUT" if timed_out else ""
        return f"exit={code}{flag}\n--- stdout ---\n{_tail_file(str(o))}\n--- stderr ---\n{_tail_file(str(e))}"

    def blend_tool(args):
        preds = args.get("predictions")
        labels = _str_arg(args, "labels")
        if not isinstance(preds, dict) or not preds:
            raise ToolError("predictions must map model ids to repo-<i>/<path> references")
        files, owners = {}, {}
        for model_id, ref in preds.items():
            repo, path = _repo_of_ref(ctx, ref)
            files[model_id], owners[model_id] = path, repo.repo_id
        _, labels_path = _repo_of_ref(ctx, labels)
        metric_name = args.get("metric") or ("spearman" if ctx.task.higher_is_better else "mae")
        metric = ensembling.METRICS.get(metric_name)
        if metric is None:
            raise ToolError(f"unknown metric {metric_name!r}; choose from {sorted(ensembling.METRICS)}")
        rounds = args.get("rounds", ensembling.DEFAULT_ROUNDS)
        try:
            oof = ensembling.load_oof(files, labels_path)
            result = ensembling.hill_climb_blend(oof, metric, int(rounds))
        except (ensembling.EnsembleError, OSError) as exc:
            raise ToolError(str(exc)) from None
        blend_state.update(result=result, owners=owners)
        return json.dumps(
            {
                "weights": result.weights,
                "counts": result.counts,
                "score": result.score,
                "metric": result.metric,
                "best_single": {"model": result.best_single[0], "score": result.best_single[1]},
            },
            indent=2,
        )

    registry = ToolRegistry([query_tool_for(ctx.kb, loaded)])
    for repo in ctx.repos.values():
        registry.add(read_tool(repo))
    registry.add(Tool(
        ToolSchema(
            "write_final",
            "Write final/<path>: either content, or a copy of source_path from source_repo.",
            (
                ToolParam("path", "string", True, "path under final/"),
                ToolParam("content", "string", False, "file content"),
                ToolParam("source_repo", "integer", False, "repository to copy from"),
                ToolParam("source_path", "string", False, "file or directory in that repository"),
            ),
        ),
        write_final,
    ))
    registry.add(Tool(
        ToolSchema(
            "execute_final",
            "Run a shell command inside final/.",
            (ToolParam("command", "string", True, ""), ToolParam("timeout", "number", False, "")),
        ),
        execute_final,
    ))
    registry.add(Tool(
        ToolSchema(
            "hill_climb_blend",
            "Fit rank-average blend weights by hill climbing on out-of-fold predictions.",
            (
                ToolParam("predictions", "object", True, "model id -> repo-<i>/<oof file>"),
                ToolParam("labels", "string", True, "repo-<i>/<labels file>"),
                ToolParam("metric", "string", False, "spearman or mae"),
                ToolParam("rounds", "integer", False, "selection rounds (default 14)"),
            ),
        ),
        blend_tool,
    ))
    role = ctx.role("aggregator")
    context = assemble_context(role, ctx.task, pool, ctx.kb, loaded, budget=ctx.settings.context_budget)
    transcript = ctx.run(role, context, registry, tag="aggregator", budget_view=budget_view)
    out.transcript = transcript
    out.final_text = transcript.final_text

    if not out.inference_path.is_file():
        best = min(pool, key=lambda r: _rank_key(ctx.task, r))
        if _fallback_copy(best, final_dir):
            sources = {best.repo_id}
            blend_state.clear()
            out.notes.append(f"aggregator left no inference.py; fell back to {best.name}")
        else:
            out.notes.append("no inference.py produced and no fallback available")
            return out

    result = blend_state.get("result")
    if result is not None and len(result.weights) > 1:
        out.status = "blended"
        out.weights = dict(result.weights)
        out.blend_score = result.score
        sources |= {blend_state["owners"][m] for m in result.weights}
    else:
        out.status = "selected"
    out.source_repos = sorted(sources)
    if not out.source_repos:
        best = min(pool, key=lambda r: _rank_key(ctx.task, r))
        out.notes.append(f"aggregator did not name a source repository; attributing to {best.name}")
        out.source_repos = [best.repo_id]
    return out


def _fallback_copy(repo: SolutionRepository, final_dir: Path) -> bool:
    """Copy the best repository and point final/inference.py at its code/inference.py."""
    if not (repo.root / "code" / "inference.py").is_file():
        return False
    dest = final_dir / "artifacts" / repo.name
    shutil.copytree(repo.root, dest, dirs_exist_ok=True, ignore=shutil.ignore_patterns("results"))
    shim = (
        "import runpy, sys\n"
        "from pathlib import Path\n\n"
        f"target = Path(__file__).parent / 'artifacts' / '{repo.name}' / 'code' / 'inference.py'\n"
        "sys.argv[0] = str(target)\n"
        "runpy.run_path(str(target), run_name='__main__')\n"
    )
    (final_dir / "inference.py").write_text(shim, encoding="utf-8")
    return True
