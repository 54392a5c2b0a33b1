import math

import pytest

from icsc_offload.trace import ConvergenceTrace, TraceRecord


def _trace(best, step_ms=10.0):
    tr = ConvergenceTrace()
    for k, b in enumerate(best, start=1):
        tr.append(TraceRecord(iteration=k, cost=b, penalized=math.nan, best_cost=b, max_c6=0.0,
                              c4=0.0, c5=0.0, feasible=True, wall_ms=k * step_ms))
    return tr


def test_iterations_to_within_uses_last_entry_into_band():
    tr = _trace([10.0, 5.2, 5.01, 6.0, 5.04, 5.0])
    assert tr.iterations_to_within(0.01) == 5
    assert tr.iterations_to_within(0.05) == 5
    assert tr.iterations_to_within(0.25) == 2
    assert tr.time_to_within(0.25) == 20.0
    assert tr.final_cost == 5.0


def test_leading_gaps_and_empty_trace():
    tr = _trace([math.nan, math.nan, 3.0, 3.0])
    assert tr.iterations_to_within(0.01) == 3
    empty = ConvergenceTrace()
    assert math.isnan(empty.final_cost) and math.isnan(empty.time_to_within(0.01))
    assert empty.iterations_to_within(0.01) == 0


def test_trace_rejects_bad_records():
    tr = _trace([1.0])
    with pytest.raises(ValueError):
        tr.append(tr[0])
    with pytest.raises(ValueError):
        tr.append(TraceRecord(2, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, True, -1.0))
    assert tr.column("cost") == [1.0] and tr.as_rows()[0]["iteration"] == 1
