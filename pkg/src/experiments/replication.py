"""Replication fan-out.

A run is a list of independent replications, each identified by its index.
Workers pull indices from a thread pool; results are collected per index and
handed back sorted, so the aggregate never depends on scheduling. numpy's
eigensolvers and BLAS calls release the GIL, so threads scale.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Generic, TypeVar

import numpy as np

from src.config import MAX_FAILURE_FRACTION
from src.errors import NumericalError, ReplicationAbortError

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True, slots=True)
class ReplicationFailure:
    """A replication that raised instead of producing a result."""
    rep: int
    message: str

    def sort_key(self) -> int:
        return self.rep


@dataclass(slots=True)
class ReplicationBatch(Generic[T]):
    """Results of a run, keyed by replication index.

    Usage:
        batch = run_replications(task, reps=1000, threads=8)
        for rep, value in batch.ordered():
            ...
    """
    requested: int
    results: dict[int, T] = field(default_factory=dict)
    failures: list[ReplicationFailure] = field(default_factory=list)

    def ordered(self) -> list[tuple[int, T]]:
        return sorted(self.results.items())

    @property
    def completed(self) -> int:
        return len(self.results)


def default_threads() -> int:
    return os.cpu_count() or 1


def _attempt(task: Callable[[int], T], rep: int) -> tuple[int, T | None, str | None]:
    try:
        return rep, task(rep), None
    except (np.linalg.LinAlgError, NumericalError) as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"


def run_replications(
    task: Callable[[int], T],
    reps: int,
    threads: int | None = None,
    max_failure_fraction: float = MAX_FAILURE_FRACTION,
) -> ReplicationBatch[T]:
    """Run task(0) ... task(reps - 1) and collect the results.

    Eigensolver and numerical failures are recorded, not retried. More than
    `max_failure_fraction` of failed replications aborts the run.
    """
    workers = max(1, threads or default_threads())
    batch: ReplicationBatch[T] = ReplicationBatch(requested=reps)
    if workers == 1:
        outcomes = [_attempt(task, rep) for rep in range(reps)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda rep: _attempt(task, rep), range(reps)))

    for rep, value, error in outcomes:
        if error is None:
            batch.results[rep] = value
        else:
            logger.warning("replication %d failed: %s", rep, error)
            batch.failures.append(ReplicationFailure(rep, error))
    batch.failures.sort(key=lambda f: f.sort_key())

    if len(batch.failures) > max_failure_fraction * reps:
        raise ReplicationAbortError(
            f"{len(batch.failures)} of {reps} replications failed "
            f"(limit {max_failure_fraction:.0%})"
        )
    logger.debug("%d/%d replications completed on %d thread(s)", batch.completed, reps, workers)
    return batch
