"""Per-iteration convergence records shared by every solver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    cost: float  # raw system cost of the current iterate (alpha finalised)
    penalized: float  # penalised cost; nan for solvers without penalties
    best_cost: float  # cost of the best feasible iterate so far; nan if none yet
    max_c6: float  # max latency residual over tasks, seconds (positive = violated)
    c4: float  # compute-budget residual, cycles/s
    c5: float  # bandwidth-budget residual, Hz
    feasible: bool
    wall_ms: float  # cumulative solve time


@dataclass
class ConvergenceTrace:
    records: list = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must be strictly increasing")
        if rec.wall_ms < 0:
            raise ValueError("wall time must be nonnegative")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def as_rows(self) -> list:
        return [asdict(r) for r in self.records]

    @property
    def final_cost(self) -> float:
        """Cost of the best feasible iterate (the solver's answer)."""
        return self.records[-1].best_cost if self.records else math.nan

    def iterations_to_within(self, rel: float, series: str = "best_cost") -> int:
        """First 1-based iteration after which ``series`` stays within ``rel`` of its final value."""
        vals = self.column(series)
        if not vals or math.isnan(vals[-1]):
            return len(vals)
        final = vals[-1]
        band = rel * abs(final)
        k = len(vals)
        for i in range(len(vals) - 1, -1, -1):
            v = vals[i]
            if math.isnan(v) or abs(v - final) > band:
                break
            k = i
        return self.records[k].iteration if k < len(vals) else len(vals)

    def time_to_within(self, rel: float, series: str = "best_cost") -> float:
        it = self.iterations_to_within(rel, series)
        for r in self.records:
            if r.iteration == it:
                return r.wall_ms
        return self.records[-1].wall_ms if self.records else math.nan
