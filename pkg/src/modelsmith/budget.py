"""Wall-clock budgets with per-phase deadlines and an injectable clock."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

MIN_EXECUTE_TIMEOUT = 1.0


class BudgetError(ValueError):
    pass


def default_reserve(wall_clock_seconds: float) -> float:
    """max(5% of budget, 60s), but never more than half the budget."""
    return min(max(0.05 * wall_clock_seconds, 60.0), 0.5 * wall_clock_seconds)


@dataclass(frozen=True)
class RunBudget:
    wall_clock_seconds: float
    aggregator_reserve_seconds: float | None = None
    per_execute_timeout: float | None = None  # None: 1/8 of what remains

    def __post_init__(self):
        if self.aggregator_reserve_seconds is None:
            object.__setattr__(self, "aggregator_reserve_seconds", default_reserve(self.wall_clock_seconds))
        if self.wall_clock_seconds <= 0 or self.aggregator_reserve_seconds <= 0:
            raise BudgetError("budget and aggregator reserve must be positive")
        if self.aggregator_reserve_seconds >= self.wall_clock_seconds:
            raise BudgetError("aggregator reserve must be smaller than the wall-clock budget")
        if self.per_execute_timeout is not None and self.per_execute_timeout <= 0:
            raise BudgetError("per-execute timeout must be positive")


class PhaseView:
    """Monotone view of the time left before one phase deadline."""

    def __init__(self, tracker: "BudgetTracker", deadline: float, name: str):
        self._tracker = tracker
        self.deadline = deadline
        self.name = name
        self._lock = threading.Lock()
        self._last: float | None = None

    def remaining(self) -> float:
        left = max(0.0, self.deadline - self._tracker.clock())
        with self._lock:
            if self._last is not None and left > self._last:
                left = self._last
            self._last = left
        return left

    def exhausted(self) -> bool:
        return self.remaining() <= 0.0

    def execute_timeout(self, requested: float | None = None) -> float:
        """Timeout for one execute: the policy value, never past the deadline."""
        left = self.remaining()
        policy = self._tracker.budget.per_execute_timeout
        if policy is None:
            policy = max(self._tracker.total_remaining() / 8.0, MIN_EXECUTE_TIMEOUT)
        timeout = policy if requested is None else min(requested, policy)
        return max(min(timeout, left), 0.01)


class BudgetTracker:
    def __init__(self, budget: RunBudget, clock: Callable[[], float] = time.monotonic):
        self.budget = budget
        self.clock = clock
        self.start = clock()
        self.manager = PhaseView(
            self, self.start + budget.wall_clock_seconds - budget.aggregator_reserve_seconds, "manager"
        )
        self.aggregator = PhaseView(self, self.start + budget.wall_clock_seconds, "aggregator")

    def total_remaining(self) -> float:
        return self.aggregator.remaining()

    def remaining(self) -> float:
        return self.total_remaining()

    def exhausted(self, phase: str = "manager") -> bool:
        return self.phase(phase).exhausted()

    def phase(self, name: str) -> PhaseView:
        if name not in ("manager", "aggregator"):
            raise KeyError(name)
        return getattr(self, name)

    def elapsed(self) -> float:
        return self.clock() - self.start


def enforce_budget(budget: RunBudget, clock: Callable[[], float] = time.monotonic) -> BudgetTracker:
    return BudgetTracker(budget, clock)


class Unlimited:
    """Budget view that never runs out (for standalone agent invocations)."""

    name = "unlimited"

    def remaining(self) -> float:
        return float("inf")

    def exhausted(self) -> bool:
        return False

    def execute_timeout(self, requested: float | None = None) -> float:
        return requested if requested is not None else 3600.0
