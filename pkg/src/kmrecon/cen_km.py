"""IPD reconstruction from a digitized KM curve with explicit censor marks.

Drops are processed in time order. Every censor mark in an interval is used
once, the event count is the first that brings the product-limit estimate to
or below the digitized level, and neighbouring event counts are tried with
extra (overlapped) censors drawn from the interval's marks. A number-at-risk
table, when given, is then matched by relocating censor records without
touching any event.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import ReconstructionError, ValidationError
from .survival_core import IpdSet, StepCurve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RiskTable:
    entries: tuple[tuple[float, int], ...]

    def __post_init__(self):
        times = [t for t, _ in self.entries]
        counts = [n for _, n in self.entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("risk table times must be strictly increasing")
        if any(n < 0 for n in counts) or any(b > a for a, b in zip(counts, counts[1:])):
            raise ValidationError("risk table counts must be non-negative and non-increasing")

    @classmethod
    def from_pairs(cls, pairs):
        return cls(tuple((float(t), int(n)) for t, n in pairs))


@dataclass(frozen=True)
class CenKmConfig:
    tol: float = 1e-7
    c_max: int = 20
    branch_radius: int = 1

    def __post_init__(self):
        if self.tol <= 0:
            raise ValidationError("tol must be positive")
        if self.c_max < 1:
            raise ValidationError("c_max must be at least 1")
        if self.branch_radius < 0:
            raise ValidationError("branch_radius must be non-negative")


@dataclass(frozen=True)
class IntervalRecord:
    time: float
    target: float
    achieved: float
    events: int
    censors: int
    overlaps: int
    at_risk: int
    flagged: bool = False

    @property
    def deviation(self) -> float:
        return abs(self.achieved - self.target)


@dataclass
class ReconstructionReport:
    ipd: IpdSet
    intervals: list[IntervalRecord]
    residuals: list[tuple[float, int, int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    tail_censors: int = 0

    def to_dict(self) -> dict:
        return {
            "n": len(self.ipd),
            "events": int(self.ipd.events.sum()),
            "intervals": [
                {
                    "time": r.time,
                    "target": r.target,
                    "achieved": r.achieved,
                    "events": r.events,
                    "censors": r.censors,
                    "overlaps": r.overlaps,
                    "at_risk": r.at_risk,
                    "flagged": r.flagged,
                }
                for r in self.intervals
            ],
            "tail_censors": self.tail_censors,
            "residuals": [{"time": t, "target": a, "achieved": b} for t, a, b in self.residuals],
            "warnings": list(self.warnings),
        }


def _overlap_times(pool, k):
    # earliest-unconsumed-first, wrapping around the pool
    return [pool[j % len(pool)] for j in range(k)]


def _best_branch(s_prev, target, n_at, pool, cfg: CenKmConfig):
    """Pick (deviation, events, overlaps, achieved) for one drop."""
    k_max = cfg.c_max if pool else 0
    # overlapped censors shrink the risk set, so branch around the event
    # count each k would need, not only the k = 0 one
    branches = set()
    for k in range(0, min(k_max, n_at - 1) + 1):
        n = n_at - k
        m = 1
        while m < n and s_prev * (1.0 - m / n) > target:
            m += 1
        branches.update(range(max(1, m - cfg.branch_radius), m + cfg.branch_radius + 1))
    best = None
    for e in sorted(branches):
        branch_best = None
        for k in range(0, k_max + 1):
            if e > n_at - k:
                break
            s = s_prev * (1.0 - e / (n_at - k))
            dev = abs(s - target)
            if branch_best is None or dev < branch_best[0] - 1e-15:
                branch_best = (dev, e, k, s)
            if dev < cfg.tol:
                break
        if branch_best is None:
            continue
        if best is None:
            best = branch_best
            continue
        # ties within rounding prefer fewer censors, then fewer events
        if branch_best[0] < best[0] - 1e-12:
            best = branch_best
        elif abs(branch_best[0] - best[0]) <= 1e-12 and (branch_best[2], branch_best[1]) < (best[2], best[1]):
            best = branch_best
    return best


def reconstruct(
    curve: StepCurve,
    n_initial: int,
    risk_table: RiskTable | None = None,
    cfg: CenKmConfig = CenKmConfig(),
    arm: int = 0,
) -> ReconstructionReport:
    if n_initial < 1:
        raise ValidationError("n_initial must be at least 1")
    marks = sorted(curve.censor_times)
    drops = list(curve.drops)
    events: list[float] = []
    censors: list[float] = []
    intervals: list[IntervalRecord] = []
    warnings: list[str] = []

    n_risk = n_initial
    s_prev = 1.0
    lo_idx = 0
    for t, target in drops:
        hi_idx = bisect.bisect_left(marks, t, lo_idx)
        pool = marks[lo_idx:hi_idx]
        lo_idx = hi_idx
        n_at = n_risk - len(pool)
        if n_at < 1:
            raise ReconstructionError(f"population underflow at t={t:g}")
        dev, e, k, s = _best_branch(s_prev, target, n_at, pool, cfg)
        flagged = dev >= cfg.tol
        if flagged:
            why = "no candidate censors" if not pool else "tolerance not met"
            warnings.append(f"t={t:g}: deviation {dev:.3g} ({why})")
        censors.extend(pool)
        censors.extend(_overlap_times(pool, k))
        events.extend([t] * e)
        n_risk = n_at - k - e
        s_prev = s
        intervals.append(IntervalRecord(t, target, s, e, len(pool), k, n_at - k, flagged))

    tail = marks[lo_idx:]
    if n_risk < len(tail):
        raise ReconstructionError(f"population underflow: {len(tail)} censor marks after the last drop but {n_risk} subjects left")
    if n_risk > 0:
        if tail:
            censors.extend(tail)
            censors.extend(_overlap_times(tail, n_risk - len(tail)))
        else:
            end = curve.t_end if curve.t_end is not None else (drops[-1][0] if drops else curve.points[-1][0])
            censors.extend([end] * n_risk)
            warnings.append(f"{n_risk} subjects left without tail censor marks; censored at {end:g}")

    report = ReconstructionReport(_to_ipd(events, censors, arm), intervals, warnings=warnings, tail_censors=n_risk)
    if risk_table is not None:
        report = align_risk_table(report.ipd, risk_table, marks, report)
    return report


def _to_ipd(events, censors, arm) -> IpdSet:
    times = list(events) + list(censors)
    flags = [True] * len(events) + [False] * len(censors)
    return IpdSet.from_arrays(times, flags, [arm] * len(times), provenance="reconstructed").sorted()


def align_risk_table(ipd: IpdSet, risk_table: RiskTable, candidate_pool, report: ReconstructionReport | None = None):
    """Relocate censor records so at-risk counts match ``risk_table``.

    A censor record only moves within the gap between consecutive event times
    that contains the boundary, so every risk set at an event time, and hence
    the KM curve, is unchanged. Records never move across a boundary that was
    already aligned. Boundaries that cannot be matched this way are recorded
    as residuals.
    """
    arm = int(ipd.arms[0]) if len(ipd) else 0
    events = sorted(float(t) for t, e in zip(ipd.times, ipd.events) if e)
    censors = Counter(float(t) for t, e in zip(ipd.times, ipd.events) if not e)
    marks = sorted(set(candidate_pool))
    if report is None:
        report = ReconstructionReport(ipd, [])
    residuals, warnings = [], list(report.warnings)
    floor = -math.inf

    def at_risk(tau):
        return len(events) - bisect.bisect_left(events, tau) + sum(n for c, n in censors.items() if c >= tau)

    for tau, target in risk_table.entries:
        delta = target - at_risk(tau)
        if delta != 0:
            i = bisect.bisect_left(events, tau)
            left = max(events[i - 1] if i > 0 else -math.inf, floor)
            right = events[i] if i < len(events) else math.inf
            if delta > 0:
                srcs = _sources(censors, left, tau, overlapped_first=True, latest_first=True)
                dests = [c for c in marks if tau <= c < right]
                if not dests and tau < right:
                    dests = [tau]
                    warnings.append(f"tau={tau:g}: no censor mark at or after the boundary; follow-up extended to {tau:g}")
            else:
                srcs = _sources(censors, tau, right, overlapped_first=True, latest_first=False)
                dests = [c for c in reversed(marks) if left <= c < tau]
            moves = min(abs(delta), len(srcs)) if dests else 0
            for j in range(moves):
                censors[srcs[j]] -= 1
                if censors[srcs[j]] == 0:
                    del censors[srcs[j]]
                censors[dests[j % len(dests)]] += 1
            got = at_risk(tau)
            if got != target:
                residuals.append((tau, target, got))
                msg = f"risk table at {tau:g}: target {target}, reconstructed {got}"
                warnings.append(msg)
                log.warning(msg)
        floor = tau

    flat = [c for c, n in sorted(censors.items()) for _ in range(n)]
    new = _to_ipd(events, flat, arm)
    return ReconstructionReport(new, report.intervals, residuals, warnings, report.tail_censors)


def _sources(censors: Counter, lo: float, hi: float, overlapped_first: bool, latest_first: bool):
    """Censor records in [lo, hi), one entry per record, in relocation order."""
    times = sorted((c for c in censors if lo <= c < hi), reverse=latest_first)
    out = []
    if overlapped_first:
        # surplus records at shared marks go first, leaving one record per mark
        for c in times:
            out.extend([c] * (censors[c] - 1))
        for c in times:
            out.append(c)
    else:
        for c in times:
            out.extend([c] * censors[c])
    return out
