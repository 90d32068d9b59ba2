"""Recover a missing subgroup by matching known subgroups out of the overall IPD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import MatchingError, ValidationError
from .survival_core import IpdRecord, IpdSet

METHODS = ("hungarian", "nearest_neighbor")
DISTANCES = ("absolute", "squared")


@dataclass(frozen=True)
class MatchSpec:
    method: str = "hungarian"
    distance: str = "absolute"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}")
        if self.distance not in DISTANCES:
            raise ValidationError(f"distance must be one of {DISTANCES}")


def solve_min_cost_matching(cost, method: str = "hungarian"):
    """Assign every row to a distinct column.

    Returns ``(cols, total)`` where ``cols[i]`` is the column given to row i.
    ``hungarian`` minimises the total cost; ``nearest_neighbor`` takes rows in
    order and gives each the cheapest free column, lowest index on ties.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValidationError("cost must be a matrix")
    m, n = cost.shape
    if m > n:
        raise MatchingError("known subgroup larger than pool")
    if not np.all(np.isfinite(cost)):
        raise ValidationError("costs must be finite")
    if m == 0:
        return np.zeros(0, dtype=int), 0.0
    if method == "hungarian":
        rows, cols = linear_sum_assignment(cost)
        out = np.empty(m, dtype=int)
        out[rows] = cols
    elif method == "nearest_neighbor":
        free = np.ones(n, dtype=bool)
        out = np.empty(m, dtype=int)
        for i in range(m):
            row = np.where(free, cost[i], np.inf)
            j = int(np.argmin(row))
            out[i] = j
            free[j] = False
    else:
        raise ValidationError(f"unknown method {method!r}")
    return out, float(cost[np.arange(m), out].sum())


def _distance(a, b, kind):
    d = np.abs(a[:, None] - b[None, :])
    return d if kind == "absolute" else d * d


def subtract(overall: IpdSet, known_subgroups, spec: MatchSpec = MatchSpec(), label: int | None = None) -> IpdSet:
    """Remove each known subgroup from ``overall`` and return what is left.

    Matching runs separately inside every (arm, event status) cell on
    follow-up time, one known subgroup after another.
    """
    known_subgroups = list(known_subgroups)
    if sum(len(k) for k in known_subgroups) > len(overall):
        raise MatchingError("known subgroups are larger than the overall population")
    times, events, arms = overall.times, overall.events, overall.arms
    alive = np.ones(len(overall), dtype=bool)
    for known in known_subgroups:
        for arm in (0, 1):
            for event in (False, True):
                rows = np.nonzero((known.arms == arm) & (known.events == event))[0]
                if len(rows) == 0:
                    continue
                cols = np.nonzero(alive & (arms == arm) & (events == event))[0]
                if len(rows) > len(cols):
                    status = "event" if event else "censored"
                    raise MatchingError(
                        f"cell (arm={arm}, {status}): {len(rows)} known records but only {len(cols)} left in the pool"
                    )
                cost = _distance(known.times[rows], times[cols], spec.distance)
                assign, _ = solve_min_cost_matching(cost, spec.method)
                alive[cols[assign]] = False
    kept = [r for r, a in zip(overall.records, alive) if a]
    if label is not None:
        kept = [IpdRecord(r.time, r.event, r.arm, label) for r in kept]
    return IpdSet(tuple(kept), provenance="subtracted")
