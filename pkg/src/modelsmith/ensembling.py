"""Rank-average blending with hill-climbing ensemble selection."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

DEFAULT_ROUNDS = 14


class EnsembleError(ValueError):
    pass


class MetricError(EnsembleError):
    pass


@dataclass(frozen=True)
class Metric:
    name: str
    fn: Callable[[np.ndarray, np.ndarray], float]
    higher_is_better: bool

    def __call__(self, predictions: np.ndarray, labels: np.ndarray) -> float:
        try:
            value = float(self.fn(predictions, labels))
        except Exception as exc:  # metric code is caller-supplied
            raise MetricError(f"metric {self.name} failed: {exc}") from exc
        if not math.isfinite(value):
            raise MetricError(
                f"metric {self.name} is undefined here (constant predictions or labels?)"
            )
        return value

    def better(self, a: float, b: float) -> bool:
        return a > b if self.higher_is_better else a < b


def _spearman(pred: np.ndarray, labels: np.ndarray) -> float:
    if np.ptp(pred) == 0 or np.ptp(labels) == 0:
        return float("nan")
    return spearmanr(pred, labels)[0]


def _mae(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - labels)))


RANK_CORRELATION = Metric("spearman", _spearman, True)
MEAN_ABSOLUTE_ERROR = Metric("mae", _mae, False)
METRICS = {m.name: m for m in (RANK_CORRELATION, MEAN_ABSOLUTE_ERROR)}


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    model_ids: tuple[str, ...]
    values: np.ndarray
    labels: np.ndarray | None = None
    row_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise EnsembleError("values must be a non-empty models x rows matrix")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        if len(self.model_ids) != values.shape[0] or len(set(self.model_ids)) != len(self.model_ids):
            raise EnsembleError("model_ids must be unique, one per row of values")
        if not np.all(np.isfinite(values)):
            raise EnsembleError("predictions contain non-finite values")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=float)
            if labels.shape != (values.shape[1],):
                raise EnsembleError("labels length does not match the number of rows")
            object.__setattr__(self, "labels", labels)

    @property
    def ranks(self) -> np.ndarray:
        return np.vstack([rank_transform(row) for row in self.values])


@dataclass(frozen=True)
class BlendResult:
    weights: dict[str, float]
    counts: dict[str, int]
    score: float
    best_single: tuple[str, float]
    rounds: int
    metric: str


def rank_transform(values: Sequence[float]) -> np.ndarray:
    """Average 1-based ranks divided by the row count."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise EnsembleError("rank_transform needs a non-empty 1-d sequence")
    if not np.all(np.isfinite(x)):
        raise EnsembleError("rank_transform input contains non-finite values")
    return rankdata(x, method="average") / x.size


def _bag_average(weights: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    # Snap away float noise so rows tied in exact arithmetic stay tied; real
    # differences between rank averages are far coarser than 1e-12.
    return np.round(weights @ ranks, 12)


def hill_climb_blend(
    oof: PredictionMatrix,
    metric: Metric = RANK_CORRELATION,
    rounds: int = DEFAULT_ROUNDS,
) -> BlendResult:
    """Greedy ensemble selection with replacement over rank-transformed rows.

    Each round adds the model whose inclusion gives the best metric for the
    bag average; ties go to the lowest model index.  Weights are bag counts
    divided by ``rounds``.  Forcing a pick every round can occasionally drift
    below the first pick's score; the bag then collapses onto that single model
    so the result never loses to the best individual model.
    """
    if oof.labels is None:
        raise EnsembleError("hill_climb_blend needs labels")
    if rounds < 1:
        raise EnsembleError("rounds must be >= 1")
    ranks = oof.ranks
    m = ranks.shape[0]
    counts = np.zeros(m, dtype=int)
    best_single = None
    for t in range(rounds):
        best_j, best_score, failure = -1, None, None
        for j in range(m):
            trial = counts.copy()
            trial[j] += 1
            try:
                score = metric(_bag_average(trial / (t + 1), ranks), oof.labels)
            except MetricError as exc:  # e.g. a bag whose ranks cancel out
                failure = exc
                continue
            if best_score is None or metric.better(score, best_score):
                best_j, best_score = j, score
        if best_score is None:
            raise failure
        counts[best_j] += 1
        if t == 0:
            best_single = (oof.model_ids[best_j], best_score)
    final = metric(_bag_average(counts / rounds, ranks), oof.labels)
    if metric.better(best_single[1], final):
        counts = np.zeros(m, dtype=int)
        counts[oof.model_ids.index(best_single[0])] = rounds
        final = metric(_bag_average(counts / rounds, ranks), oof.labels)
    return BlendResult(
        weights={mid: int(c) / rounds for mid, c in zip(oof.model_ids, counts) if c},
        counts={mid: int(c) for mid, c in zip(oof.model_ids, counts) if c},
        score=final,
        best_single=best_single,
        rounds=rounds,
        metric=metric.name,
    )


def check_weights(weights: Mapping[str, float], model_ids: Sequence[str]) -> None:
    unknown = set(weights) - set(model_ids)
    if unknown:
        raise EnsembleError(f"weights name unknown models: {sorted(unknown)}")
    if any(w < 0 for w in weights.values()):
        raise EnsembleError("weights must be non-negative")
    if abs(sum(weights.values()) - 1.0) > 1e-9:
        raise EnsembleError("weights must sum to 1")


def blend(matrix: PredictionMatrix, weights: Mapping[str, float]) -> np.ndarray:
    check_weights(weights, matrix.model_ids)
    ranks = matrix.ranks
    w = np.array([weights.get(mid, 0.0) for mid in matrix.model_ids])
    return _bag_average(w, ranks)


# -- prediction files ------------------------------------------------------------


def read_two_column(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    """Read a ``row_id,value`` text file; a non-numeric first row is a header."""
    rows: list[tuple[str, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.reader(fh):
            if not rec:
                continue
            if len(rec) != 2:
                raise EnsembleError(f"{path}: expected two columns, got {len(rec)}")
            rows.append((rec[0].strip(), rec[1].strip()))
    if rows:
        try:
            float(rows[0][1])
        except ValueError:
            rows = rows[1:]
    try:
        values = np.array([float(v) for _, v in rows])
    except ValueError as exc:
        raise EnsembleError(f"{path}: {exc}") from exc
    return [r for r, _ in rows], values


def load_oof(prediction_files: Mapping[str, str | os.PathLike], labels_file: str | os.PathLike) -> PredictionMatrix:
    row_ids, labels = read_two_column(labels_file)
    values = []
    for model_id, path in prediction_files.items():
        ids, preds = read_two_column(path)
        if ids != row_ids:
            raise EnsembleError(f"row ids of {model_id} ({path}) do not align with the labels file")
        values.append(preds)
    if not values:
        raise EnsembleError("no prediction files given")
    return PredictionMatrix(tuple(prediction_files), np.vstack(values), labels, tuple(row_ids))
