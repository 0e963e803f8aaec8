"""Parallel runtime: work assignment, merge plan, transports and the worker protocol."""

from pymra.executor.engine import RunResult, WorkerPredictions, run_parallel
from pymra.executor.lanes import LanePool
from pymra.executor.plan import (
    WorkerAssignment,
    assign_dynamic,
    assign_static,
    estimate_memory,
    make_assignment,
    plan_merges,
    range_loads,
    working_set,
)
from pymra.executor.transport import ProcessTransport, ThreadTransport, TransportError, get_transport

__all__ = [
    "LanePool",
    "ProcessTransport",
    "RunResult",
    "ThreadTransport",
    "TransportError",
    "WorkerAssignment",
    "WorkerPredictions",
    "assign_dynamic",
    "assign_static",
    "estimate_memory",
    "get_transport",
    "make_assignment",
    "plan_merges",
    "range_loads",
    "run_parallel",
    "working_set",
]
