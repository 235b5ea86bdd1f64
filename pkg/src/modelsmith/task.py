"""Task descriptions."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    description: str
    data_dir: str
    metric_name: str
    higher_is_better: bool = True

    def validate(self) -> None:
        if not self.description.strip():
            raise TaskError("task description is empty")
        data = Path(self.data_dir)
        if not data.is_dir() or not os.access(data, os.R_OK):
            raise TaskError(f"data directory {data} is missing or unreadable")

    @property
    def direction(self) -> str:
        return "higher is better" if self.higher_is_better else "lower is better"

    def to_dict(self) -> dict:
        return asdict(self)


def load_task_file(path: str | os.PathLike, data_dir: str | None = None) -> TaskSpec:
    """Read a YAML or JSON task file; ``data_dir`` overrides the file's value."""
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        task = TaskSpec(
            task_id=str(raw["task_id"]),
            description=str(raw["description"]),
            data_dir=str(data_dir or raw["data_dir"]),
            metric_name=str(raw["metric_name"]),
            higher_is_better=bool(raw.get("higher_is_better", True)),
        )
    except (OSError, yaml.YAMLError, KeyError, TypeError) as exc:
        raise TaskError(f"{path}: {exc}") from exc
    task.validate()
    return task
