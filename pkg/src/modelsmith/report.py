"""Run reports: markdown summary, per-repository TSV, and a metric trajectory figure."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .task import TaskSpec  # noqa: E402
from .workspace import SolutionRepository, best_metric, summarize  # noqa: E402

logger = logging.getLogger(__name__)

TSV_COLUMNS = ("repo", "status", "runs", "failed_runs", "best_metric", "metric_name", "selected", "halt_reason")


def write_repo_summary(repos: Sequence[SolutionRepository], selected: Sequence[int], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TSV_COLUMNS)
        for repo in repos:
            results = [r for r in repo.results if r is not None]
            best = best_metric(repo)
            w.writerow([
                repo.name,
                repo.status,
                len(results),
                sum(r.exit_code != 0 for r in results),
                "" if best is None else repr(best.value),
                "" if best is None else best.metric_name,
                "yes" if repo.repo_id in selected else "no",
                repo.halt_reason or "",
            ])
    return path


def plot_metric_trajectory(repos: Sequence[SolutionRepository], task: TaskSpec, path: Path) -> Path | None:
    """Validation metric of every scored run against its start time, one line per repository."""
    series = {}
    origin = None
    for repo in repos:
        points = [
            (r.started_at, r.parsed_metrics.value)
            for r in repo.results
            if r is not None and r.parsed_metrics is not None and r.parsed_metrics.split == "validation"
        ]
        if points:
            series[repo.name] = points
            first = min(p[0] for p in points)
            origin = first if origin is None else min(origin, first)
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, points in series.items():
        xs = [p[0] - origin for p in points]
        ax.plot(xs, [p[1] for p in points], marker="o", label=name)
    ax.set_xlabel("seconds since first scored run")
    ax.set_ylabel(f"{task.metric_name} ({task.direction})")
    ax.set_title(f"Validation metric per run: {task.task_id}")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_report(
    *,
    task: TaskSpec,
    run_id: str,
    status: str,
    repos: Sequence[SolutionRepository],
    strategy: str,
    source_repos: Sequence[int],
    weights: dict[str, float] | None,
    blend_score: float | None,
    ledger: dict,
    notes: Sequence[str],
    aggregator_text: str,
    next_steps: Sequence[str],
) -> str:
    lines = [
        f"# Run report: {run_id}",
        "",
        f"Status: {status}",
        "",
        "## Task",
        f"- id: {task.task_id}",
        f"- metric: {task.metric_name} ({task.direction})",
        f"- data: {task.data_dir}",
        "",
        task.description.strip(),
        "",
        "## Chosen output",
        f"Strategy: {strategy}",
        "Source repositories: " + (", ".join(f"repo-{i}" for i in source_repos) or "none"),
    ]
    if weights:
        lines.append("Blend weights:")
        lines += [f"- {k}: {v:.6f}" for k, v in weights.items()]
        if blend_score is not None:
            lines.append(f"Out-of-fold blend score: {blend_score:.6f}")
    if aggregator_text.strip():
        lines += ["", "### Aggregator notes", aggregator_text.strip()]
    lines += ["", "## Repositories", "```"]
    lines += [summarize(r) for r in repos]
    lines += ["```", "", "## Ledger"]
    lines += [f"- {k}: {v}" for k, v in ledger.items()]
    if notes:
        lines += ["", "## Warnings"] + [f"- {n}" for n in notes]
    lines += ["", "## Next steps"] + [f"- {s}" for s in next_steps]
    return "\n".join(lines) + "\n"
