"""Solution repositories: confined read/write/execute over one workspace each."""

from __future__ import annotations

import json
import logging
import math
import os
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

STATUSES = ("empty", "planned", "coded", "running", "scored", "halted")
ALLOWED_TRANSITIONS = {
    ("empty", "planned"),
    ("planned", "coded"),
    ("coded", "running"),
    ("running", "scored"),
    ("running", "coded"),
    ("scored", "running"),
} | {(s, "halted") for s in STATUSES if s != "halted"}

READ_CAP = 64_000
KILLED_EXIT_CODE = -signal.SIGKILL
METRICS_FILE = "metrics.json"
SPLITS = ("validation", "test")


class WorkspaceError(Exception):
    pass


class SecurityError(WorkspaceError):
    pass


class RepoStateError(WorkspaceError):
    pass


class ArtifactNotFound(WorkspaceError, FileNotFoundError):
    pass


class ExecutionError(WorkspaceError):
    pass


@dataclass(frozen=True)
class MetricRecord:
    metric_name: str
    value: float
    higher_is_better: bool
    split: str = "validation"

    @classmethod
    def from_dict(cls, data: dict) -> "MetricRecord":
        value = float(data["value"])
        if not math.isfinite(value):
            raise ValueError("metric value is not finite")
        split = data.get("split", "validation")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        hib = data["higher_is_better"]
        if not isinstance(hib, bool):
            raise ValueError("higher_is_better must be a boolean")
        return cls(str(data["metric_name"]), value, hib, split)

    def better_than(self, other: "MetricRecord") -> bool:
        return self.value > other.value if self.higher_is_better else self.value < other.value


@dataclass(frozen=True)
class ExecutionResult:
    run_id: str
    command: str
    exit_code: int
    duration: float
    stdout_path: str
    stderr_path: str
    timed_out: bool = False
    parsed_metrics: MetricRecord | None = None
    warning: str | None = None
    started_at: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionResult":
        d = dict(d)
        if d.get("parsed_metrics"):
            d["parsed_metrics"] = MetricRecord(**d["parsed_metrics"])
        return cls(**d)


@dataclass(frozen=True)
class ReadResult:
    text: str
    truncated: bool


def confine(root: Path, relative_path: str) -> Path:
    """Resolve ``relative_path`` under ``root``; refuse anything that escapes it."""
    if not relative_path or os.path.isabs(relative_path):
        raise SecurityError(f"path must be relative to the repository: {relative_path!r}")
    root = root.resolve()
    target = (root / relative_path).resolve()
    if target != root and root not in target.parents:
        raise SecurityError(f"path escapes the repository: {relative_path!r}")
    return target


def truncate_middle(text: str, cap: int) -> tuple[str, bool]:
    if len(text) <= cap:
        return text, False
    head = cap * 3 // 4
    tail = cap - head
    elided = len(text) - head - tail
    marker = f"\n[... {elided} characters elided ...]\n"
    return text[:head] + marker + text[-tail:], True


def _atomic_write(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class SolutionRepository:
    repo_id: int
    root: Path
    status: str = "empty"
    results: list[ExecutionResult] = field(default_factory=list)
    halt_reason: str | None = None
    transitions: list[tuple[str, str]] = field(default_factory=list)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)
    _procs: set = field(default_factory=set, repr=False, compare=False)

    @property
    def name(self) -> str:
        return f"repo-{self.repo_id}"

    @property
    def halted(self) -> bool:
        return self.status == "halted"

    def at_least(self, status: str) -> bool:
        order = ("empty", "planned", "coded")
        if self.status in ("running", "scored"):
            return True
        if self.status == "halted":
            return False
        return order.index(self.status) >= order.index(status)

    def _set_status(self, new: str) -> None:
        if new == self.status:
            return
        if (self.status, new) not in ALLOWED_TRANSITIONS:
            raise RepoStateError(f"{self.name}: illegal transition {self.status} -> {new}")
        self.transitions.append((self.status, new))
        self.status = new
        self._save_state()

    def _save_state(self) -> None:
        state = {
            "repo_id": self.repo_id,
            "status": self.status,
            "halt_reason": self.halt_reason,
            "transitions": self.transitions,
        }
        _atomic_write(self.root / "results" / "state.json", json.dumps(state, indent=2))

    def _save_results(self) -> None:
        _atomic_write(
            self.root / "results" / "index.json",
            json.dumps([r.to_dict() for r in self.results], indent=2),
        )


def create_repository(run_root: str | os.PathLike, repo_id: int) -> SolutionRepository:
    root = Path(run_root) / f"repo-{repo_id}"
    if root.exists():
        raise WorkspaceError(f"repository {root} already exists")
    (root / "code").mkdir(parents=True)
    (root / "results").mkdir()
    (root / "plan.md").write_text("", encoding="utf-8")
    (root / "config.yaml").write_text("", encoding="utf-8")
    repo = SolutionRepository(repo_id, root)
    repo._save_state()
    repo._save_results()
    return repo


def open_repository(root: str | os.PathLike) -> SolutionRepository:
    """Reattach to a repository written by :func:`create_repository`."""
    root = Path(root)
    state = json.loads((root / "results" / "state.json").read_text(encoding="utf-8"))
    results = [
        ExecutionResult.from_dict(r)
        for r in json.loads((root / "results" / "index.json").read_text(encoding="utf-8"))
    ]
    return SolutionRepository(
        repo_id=state["repo_id"],
        root=root,
        status=state["status"],
        results=results,
        halt_reason=state.get("halt_reason"),
        transitions=[tuple(t) for t in state.get("transitions", [])],
    )


def read_artifact(repo: SolutionRepository, relative_path: str, cap: int = READ_CAP) -> ReadResult:
    path = confine(repo.root, relative_path)
    if not path.is_file():
        raise ArtifactNotFound(f"{repo.name}: no file {relative_path!r}")
    text = path.read_text(encoding="utf-8", errors="replace")
    return ReadResult(*truncate_middle(text, cap))


def write_artifact(repo: SolutionRepository, relative_path: str, content: str) -> None:
    path = confine(repo.root, relative_path)
    with repo._lock:
        if repo.halted:
            raise RepoStateError(f"{repo.name} is halted")
        _atomic_write(path, content)
        rel = path.relative_to(repo.root.resolve())
        if rel == Path("plan.md") and repo.status == "empty":
            repo._set_status("planned")
        elif rel.parts and rel.parts[0] == "code" and repo.status == "planned":
            repo._set_status("coded")


def _kill_tree(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass


def run_shell(
    cwd: Path,
    command: str,
    timeout_seconds: float,
    env: dict[str, str],
    out_path: Path,
    err_path: Path,
    registry: set | None = None,
) -> tuple[int, bool]:
    """Run a shell command in its own process group; kill the group on timeout."""
    timed_out = False
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "wb") as out, open(err_path, "wb") as err:
        try:
            proc = subprocess.Popen(
                command,
                shell=True,
                cwd=cwd,
                env=env,
                stdout=out,
                stderr=err,
                stdin=subprocess.DEVNULL,
                start_new_session=True,
            )
        except OSError as exc:
            raise ExecutionError(f"could not spawn {command!r}: {exc}") from exc
        if registry is not None:
            registry.add(proc)
        try:
            exit_code = proc.wait(timeout=max(timeout_seconds, 0.01))
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_tree(proc)
            proc.wait()
            exit_code = KILLED_EXIT_CODE
        finally:
            if registry is not None:
                registry.discard(proc)
    return exit_code, timed_out


def _parse_metrics(path: Path) -> tuple[MetricRecord | None, str | None]:
    if not path.is_file():
        return None, None
    try:
        return MetricRecord.from_dict(json.loads(path.read_text(encoding="utf-8"))), None
    except (ValueError, KeyError, TypeError) as exc:
        return None, f"unparseable {METRICS_FILE}: {exc}"


def execute(
    repo: SolutionRepository,
    command: str,
    timeout_seconds: float,
    env_overrides: dict[str, str] | None = None,
) -> ExecutionResult:
    """Run ``command`` in the repository root with captured logs and a hard timeout."""
    if not command.strip():
        raise ExecutionError("empty command")
    with repo._lock:
        if repo.halted:
            raise RepoStateError(f"{repo.name} is halted")
        if not repo.at_least("coded"):
            raise RepoStateError(f"{repo.name} has no code yet (status {repo.status})")
        run_id = f"run-{len(repo.results) + 1:04d}"
        out_path = repo.root / "results" / f"{run_id}.out"
        err_path = repo.root / "results" / f"{run_id}.err"
        metrics_path = repo.root / METRICS_FILE
        if metrics_path.exists():
            metrics_path.unlink()
        previous = repo.status
        repo._set_status("running")
        # placeholder keeps run ids unique while the lock is released
        repo.results.append(None)  # type: ignore[arg-type]
        slot = len(repo.results) - 1

    env = dict(os.environ)
    env.update(env_overrides or {})
    started = time.time()
    try:
        exit_code, timed_out = run_shell(
            repo.root, command, timeout_seconds, env, out_path, err_path, repo._procs
        )
    except ExecutionError:
        with repo._lock:
            repo.results.pop(slot)
            repo._set_status(previous)
        raise
    duration = time.time() - started

    metrics, warning = _parse_metrics(metrics_path)
    if warning:
        logger.warning("%s %s: %s", repo.name, run_id, warning)
    result = ExecutionResult(
        run_id=run_id,
        command=command,
        exit_code=exit_code,
        duration=duration,
        stdout_path=str(out_path),
        stderr_path=str(err_path),
        timed_out=timed_out,
        parsed_metrics=metrics,
        warning=warning,
        started_at=started,
    )
    with repo._lock:
        repo.results[slot] = result
        repo._save_results()
        if not repo.halted:
            if exit_code == 0 and metrics is not None:
                repo._set_status("scored")
            else:
                repo._set_status("scored" if previous == "scored" else "coded")
    return result


def best_metric(repo: SolutionRepository) -> MetricRecord | None:
    best = None
    for r in repo.results:
        m = r.parsed_metrics if r is not None else None
        if m is None or m.split != "validation":
            continue
        if best is None or m.better_than(best):
            best = m
    return best


def halt_repository(repo: SolutionRepository, reason: str) -> None:
    with repo._lock:
        if repo.halted:
            raise RepoStateError(f"{repo.name} is already halted")
        repo.halt_reason = reason
        repo._set_status("halted")
        procs = list(repo._procs)
    for proc in procs:
        _kill_tree(proc)


def summarize(repo: SolutionRepository, last_results: int = 3) -> str:
    """Plan headline plus the last few results, for manager-level context."""
    plan = (repo.root / "plan.md").read_text(encoding="utf-8") if (repo.root / "plan.md").exists() else ""
    headline = next((line.strip("# ").strip() for line in plan.splitlines() if line.strip()), "(no plan)")
    lines = [f"{repo.name}: status={repo.status}; plan: {headline}"]
    if repo.halt_reason:
        lines.append(f"  halted: {repo.halt_reason}")
    best = best_metric(repo)
    if best:
        lines.append(f"  best {best.metric_name}={best.value:g}")
    for r in [r for r in repo.results if r is not None][-last_results:]:
        metric = f" {r.parsed_metrics.metric_name}={r.parsed_metrics.value:g}" if r.parsed_metrics else ""
        flag = " TIMEOUT" if r.timed_out else ""
        lines.append(f"  {r.run_id}: exit={r.exit_code}{flag}{metric} ({r.duration:.1f}s) `{r.command}`")
    return "\n".join(lines)
