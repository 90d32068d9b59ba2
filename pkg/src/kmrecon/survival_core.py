"""Survival statistics shared by every stage of the pipeline.

Product-limit estimation with Greenwood variances, log(-log) pointwise bands,
median survival with band-intersection confidence limits, the two-group Cox
model (Efron ties) and the grid RMSE used to compare curves.

Step functions are right-continuous throughout: ``S(t)`` is the level after
any drop at ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator

import numpy as np
from scipy.stats import norm

from .errors import MonotoneLikelihoodError, SurvivalError, ValidationError

CONTROL = 0
TREATMENT = 1

#: Two-sided 95% normal quantile used for every Wald and band interval.
Z95 = 1.959964

#: Number of evenly spaced evaluation points used by :func:`curve_rmse`.
RMSE_GRID_POINTS = 100


# ----------------------------------------------------------------------------
# Domain types
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class IpdRecord:
    time: float
    event: bool
    arm: int
    label: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.time) or self.time < 0:
            raise ValidationError(f"time must be finite and non-negative, got {self.time}")
        if self.arm not in (CONTROL, TREATMENT):
            raise ValidationError(f"arm must be 0 or 1, got {self.arm}")
        if self.label is not None and self.label < 0:
            raise ValidationError(f"label must be non-negative, got {self.label}")


def _clean_label(g) -> int | None:
    if g is None or (isinstance(g, float) and math.isnan(g)) or g < 0:
        return None
    return int(g)


@dataclass(frozen=True)
class IpdSet:
    """Ordered collection of :class:`IpdRecord` with array views."""

    records: tuple[IpdRecord, ...]
    provenance: str = ""

    def __post_init__(self):
        if not isinstance(self.records, tuple):
            object.__setattr__(self, "records", tuple(self.records))

    @classmethod
    def from_arrays(cls, times, events, arms, labels=None, provenance: str = "") -> "IpdSet":
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=bool)
        arms = np.asarray(arms, dtype=int)
        if not (len(times) == len(events) == len(arms)):
            raise ValidationError("times, events and arms must have equal length")
        if labels is None:
            labels = [None] * len(times)
        elif len(labels) != len(times):
            raise ValidationError("labels must match times in length")
        recs = tuple(
            IpdRecord(float(t), bool(e), int(a), _clean_label(g))
            for t, e, a, g in zip(times, events, arms, labels)
        )
        return cls(recs, provenance)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[IpdRecord]:
        return iter(self.records)

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records], dtype=float)

    @cached_property
    def events(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=bool)

    @cached_property
    def arms(self) -> np.ndarray:
        return np.array([r.arm for r in self.records], dtype=int)

    @cached_property
    def labels(self) -> np.ndarray:
        """Subgroup labels with ``-1`` standing in for a missing label."""
        return np.array([-1 if r.label is None else r.label for r in self.records], dtype=int)

    def select(self, mask) -> "IpdSet":
        mask = np.asarray(mask, dtype=bool)
        return IpdSet(tuple(r for r, keep in zip(self.records, mask) if keep), self.provenance)

    def arm(self, arm: int) -> "IpdSet":
        return self.select(self.arms == arm)

    def with_labels(self, labels, provenance: str | None = None) -> "IpdSet":
        labels = np.asarray(labels)
        recs = tuple(
            IpdRecord(r.time, r.event, r.arm, None if g < 0 else int(g))
            for r, g in zip(self.records, labels)
        )
        return IpdSet(recs, self.provenance if provenance is None else provenance)

    def sorted(self) -> "IpdSet":
        """Records ordered by (arm, time, event first, label)."""
        key = lambda r: (r.arm, r.time, not r.event, -1 if r.label is None else r.label)
        return IpdSet(tuple(sorted(self.records, key=key)), self.provenance)


@dataclass(frozen=True)
class StepCurve:
    """Right-continuous, non-increasing survival step function.

    ``points`` holds the starting level followed by one point per drop.
    ``variance``, ``at_risk`` and ``n_events`` align with ``points`` when the
    curve was estimated from data; digitised curves leave them empty.
    ``t_end`` is the end of follow-up (the last horizontal run) if known.
    """

    points: tuple[tuple[float, float], ...]
    censor_times: tuple[float, ...] = ()
    n_initial: int | None = None
    variance: tuple[float, ...] | None = None
    at_risk: tuple[int, ...] | None = None
    n_events: tuple[int, ...] | None = None
    t_end: float | None = None

    def __post_init__(self):
        pts = tuple((float(t), float(s)) for t, s in self.points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "censor_times", tuple(float(c) for c in self.censor_times))
        if not pts:
            raise ValidationError("a step curve needs at least one point")
        for (t0, s0), (t1, s1) in zip(pts, pts[1:]):
            if t1 <= t0:
                raise ValidationError("curve times must be strictly increasing")
            if s1 > s0 + 1e-9:
                raise ValidationError("survival must be non-increasing")
        for _, s in pts:
            if s < -1e-9 or s > 1.0 + 1e-9:
                raise ValidationError(f"survival value {s} outside [0, 1]")
        if self.n_initial is not None and self.n_initial < 1:
            raise ValidationError("n_initial must be positive")

    @property
    def times(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def survival(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def drops(self) -> tuple[tuple[float, float], ...]:
        """Points that lower the curve (the first point only if below 1)."""
        if self.points[0][1] < 1.0:
            return self.points
        return self.points[1:]

    def evaluate(self, t) -> np.ndarray | float:
        """Right-continuous evaluation; ``S(t) = 1`` before the first point."""
        times = self.times
        surv = self.survival
        idx = np.searchsorted(times, np.asarray(t, dtype=float), side="right") - 1
        out = np.where(idx >= 0, surv[np.clip(idx, 0, None)], 1.0)
        return float(out) if np.ndim(out) == 0 else out

    def to_json_dict(self) -> dict:
        d = {
            "points": [[t, s] for t, s in self.points],
            "censor_times": list(self.censor_times),
            "n_initial": self.n_initial,
        }
        if self.t_end is not None:
            d["t_end"] = self.t_end
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "StepCurve":
        return cls(
            points=tuple(tuple(p) for p in d["points"]),
            censor_times=tuple(sorted(d.get("censor_times", ()))),
            n_initial=d.get("n_initial"),
            t_end=d.get("t_end"),
        )


@dataclass(frozen=True)
class MedianEstimate:
    """Median survival; ``None`` in any field means "not reached"."""

    point: float | None
    ci_lower: float | None
    ci_upper: float | None

    def as_tuple(self):
        return (self.point, self.ci_lower, self.ci_upper)


@dataclass(frozen=True)
class HazardRatioEstimate:
    hr: float
    ci_lower: float
    ci_upper: float
    log_se: float
    log_hr: float = field(default=float("nan"))

    def as_tuple(self):
        return (self.hr, self.ci_lower, self.ci_upper)


# ----------------------------------------------------------------------------
# Kaplan-Meier
# ----------------------------------------------------------------------------


def _as_arrays(ipd) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(ipd, IpdSet):
        return ipd.times, ipd.events
    times, events = ipd
    return np.asarray(times, dtype=float), np.asarray(events, dtype=bool)


def km_table(times, events):
    """Distinct-time life table.

    Returns ``(t, n_at_risk, d, c)`` over every distinct observed time, with
    events counted before censorings at tied times.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    uniq, inverse = np.unique(times, return_inverse=True)
    d = np.bincount(inverse, weights=events, minlength=len(uniq)).astype(int)
    tot = np.bincount(inverse, minlength=len(uniq))
    n = len(times) - np.concatenate([[0], np.cumsum(tot)[:-1]])
    return uniq, n, d, tot - d


def km_estimate(ipd) -> StepCurve:
    """Product-limit estimate with Greenwood variance at every event time.

    ``ipd`` is an :class:`IpdSet` (or a ``(times, events)`` pair).
    """
    times, events = _as_arrays(ipd)
    if len(times) == 0:
        raise SurvivalError("no subjects")
    t, n, d, _ = km_table(times, events)
    has_event = d > 0
    t, n, d = t[has_event], n[has_event], d[has_event]
    surv = np.cumprod(1.0 - d / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n > d, d / (n * (n - d)), 0.0)
    var = surv**2 * np.cumsum(terms)
    var = np.where(surv > 0, var, 0.0)

    points = [(float(a), float(b)) for a, b in zip(t, surv)]
    variance = [float(v) for v in var]
    at_risk = [int(v) for v in n]
    n_events = [int(v) for v in d]
    if not points or points[0][0] > 0:
        points.insert(0, (0.0, 1.0))
        variance.insert(0, 0.0)
        at_risk.insert(0, len(times))
        n_events.insert(0, 0)
    return StepCurve(
        points=tuple(points),
        censor_times=tuple(np.sort(times[~events]).tolist()),
        n_initial=len(times),
        variance=tuple(variance),
        at_risk=tuple(at_risk),
        n_events=tuple(n_events),
        t_end=float(times.max()),
    )


def number_at_risk(times, t: float) -> int:
    return int(np.count_nonzero(np.asarray(times) >= t))


def _z_for(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    if level == 0.95:
        return Z95
    return float(norm.ppf(0.5 + level / 2.0))


def loglog_bounds(surv, var, z: float) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise log(-log) limits; degenerate points collapse onto ``surv``."""
    surv = np.asarray(surv, dtype=float)
    var = np.asarray(var, dtype=float)
    lower = surv.copy()
    upper = surv.copy()
    ok = (surv > 0) & (surv < 1) & (var > 0)
    s = surv[ok]
    se = np.sqrt(var[ok]) / (s * np.abs(np.log(s)))
    lower[ok] = np.exp(-np.exp(np.log(-np.log(s)) + z * se))
    upper[ok] = np.exp(-np.exp(np.log(-np.log(s)) - z * se))
    return np.clip(lower, 0.0, 1.0), np.clip(upper, 0.0, 1.0)


def confidence_band(curve: StepCurve, level: float = 0.95) -> tuple[StepCurve, StepCurve]:
    z = _z_for(level)
    if curve.variance is None:
        raise ValidationError("curve carries no variance estimates")
    lower, upper = loglog_bounds(curve.survival, curve.variance, z)
    times = curve.times
    # Running minimum keeps each band a valid non-increasing step function
    # without moving it across the estimate.
    lo = _band_curve(times, lower, curve)
    hi = _band_curve(times, upper, curve)
    return lo, hi


def _band_curve(times, values, src: StepCurve) -> StepCurve:
    vals = np.minimum.accumulate(values)
    return StepCurve(
        points=tuple(zip(times.tolist(), vals.tolist())),
        censor_times=src.censor_times,
        n_initial=src.n_initial,
        t_end=src.t_end,
    )


def _first_crossing(times, values, threshold=0.5) -> float | None:
    hit = np.nonzero(np.asarray(values) <= threshold)[0]
    return float(times[hit[0]]) if len(hit) else None


def median_survival(curve: StepCurve, level: float = 0.95) -> MedianEstimate:
    """Median with band-intersection limits; ``None`` marks "not reached"."""
    times = curve.times
    point = _first_crossing(times, curve.survival)
    if curve.variance is None:
        return MedianEstimate(point, None, None)
    lower, upper = loglog_bounds(curve.survival, curve.variance, _z_for(level))
    return MedianEstimate(point, _first_crossing(times, lower), _first_crossing(times, upper))


# ----------------------------------------------------------------------------
# Two-group Cox model
# ----------------------------------------------------------------------------


class _EfronTerms:
    """Risk-set bookkeeping for a single binary covariate with Efron ties."""

    def __init__(self, times, events, z):
        order = np.lexsort((~events, times))
        t = times[order]
        e = events[order]
        self.z = z[order].astype(float)
        self.n = len(t)
        uniq, first = np.unique(t, return_index=True)
        ev_t = np.unique(t[e])
        j = np.searchsorted(uniq, ev_t)
        self.first = first[j]  # start index of each event time's risk set
        # events at each distinct event time, as index ranges into sorted arrays
        ev_idx = np.nonzero(e)[0]
        grp = np.searchsorted(ev_t, t[ev_idx])
        self.d = np.bincount(grp, minlength=len(ev_t))
        self.dz = np.bincount(grp, weights=self.z[ev_idx], minlength=len(ev_t))
        self.sum_event_z = float(self.z[ev_idx].sum())
        # expanded Efron index: each event time repeated d_j times with l/d_j
        self.rep = np.repeat(np.arange(len(ev_t)), self.d)
        offs = np.concatenate([[0], np.cumsum(self.d)[:-1]])
        self.frac = (np.arange(self.rep.size) - offs[self.rep]) / self.d[self.rep]
        # risk-set counts by covariate value (for the divergence test)
        cz = np.concatenate([np.cumsum(self.z[::-1])[::-1], [0.0]])
        self.risk_n = self.n - self.first
        self.risk_z = cz[self.first]
        self.ev_treated = self.dz
        self.ev_n = self.d

    def evaluate(self, beta: float):
        """Return (loglik, score, information) at ``beta``."""
        shift = max(beta, 0.0)
        w = np.exp(beta * self.z - shift)
        wz = w * self.z
        s0 = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])[self.first]
        s1 = np.concatenate([np.cumsum(wz[::-1])[::-1], [0.0]])[self.first]
        # tied-event weights: untreated events weigh exp(-shift), treated exp(beta-shift)
        t1 = self.dz * math.exp(beta - shift)
        t0 = (self.d - self.dz) * math.exp(-shift) + t1
        a = self.frac
        den = s0[self.rep] - a * t0[self.rep]
        num = s1[self.rep] - a * t1[self.rep]
        ratio = num / den
        loglik = beta * self.sum_event_z - float(np.sum(np.log(den) + shift))
        score = self.sum_event_z - float(ratio.sum())
        info = float(np.sum(ratio - ratio**2))
        return loglik, score, info

    def limit_scores(self) -> tuple[float, float]:
        """Score as beta -> +inf and beta -> -inf."""
        rep = self.rep
        any_treated = (self.risk_z[rep] > 0).astype(float)
        all_treated = (self.risk_z[rep] == self.risk_n[rep]).astype(float)
        # Efron-adjusted risk sets shrink only the tied events' weights, which
        # stay positive for l < d, so the limits follow the raw composition.
        return self.sum_event_z - any_treated.sum(), self.sum_event_z - all_treated.sum()


def fit_cox_beta(times, events, z, tol: float = 1e-12, max_iter: int = 200):
    """Maximise the two-group Efron partial likelihood.

    Returns ``(beta, information)``. Newton steps are safeguarded by a
    bracketing interval and fall back to bisection when a step leaves it.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    z = np.asarray(z, dtype=int)
    if not events.any():
        raise SurvivalError("no events: hazard ratio undefined")
    if z.min() == z.max():
        raise SurvivalError("both arms are required for a hazard ratio")
    terms = _EfronTerms(times, events, z)
    up, down = terms.limit_scores()
    if up >= -1e-12 or down <= 1e-12:
        raise MonotoneLikelihoodError("HR diverges")

    lo, hi = -math.inf, math.inf
    beta = 0.0
    for _ in range(max_iter):
        _, score, info = terms.evaluate(beta)
        if score > 0:
            lo = beta
        else:
            hi = beta
        if info > 0:
            cand = beta + score / info
        else:
            cand = math.nan
        if not (lo < cand < hi) or not math.isfinite(cand):
            if math.isinf(lo):
                cand = hi - max(1.0, abs(hi))
            elif math.isinf(hi):
                cand = lo + max(1.0, abs(lo))
            else:
                cand = 0.5 * (lo + hi)
        if abs(cand - beta) < tol or (hi - lo) < tol:
            beta = cand
            break
        beta = cand
        if abs(beta) > 700:
            raise MonotoneLikelihoodError("HR diverges")
    _, _, info = terms.evaluate(beta)
    return beta, info


def cox_two_group(ipd: IpdSet) -> HazardRatioEstimate:
    """Treatment-vs-control hazard ratio with a Wald 95% interval."""
    beta, info = fit_cox_beta(ipd.times, ipd.events, ipd.arms)
    if info <= 0:
        raise MonotoneLikelihoodError("HR diverges")
    se = 1.0 / math.sqrt(info)
    return HazardRatioEstimate(
        hr=math.exp(beta),
        ci_lower=math.exp(beta - Z95 * se),
        ci_upper=math.exp(beta + Z95 * se),
        log_se=se,
        log_hr=beta,
    )


def cox_partial_loglik(ipd: IpdSet, beta: float) -> float:
    terms = _EfronTerms(ipd.times, ipd.events, ipd.arms)
    return terms.evaluate(beta)[0]


# ----------------------------------------------------------------------------
# Curve comparison and reporting helpers
# ----------------------------------------------------------------------------


def curve_rmse(a: StepCurve, b: StepCurve, t_max: float) -> float:
    if not t_max > 0:
        raise ValidationError("t_max must be positive")
    grid = np.linspace(0.0, t_max, RMSE_GRID_POINTS)
    diff = np.asarray(a.evaluate(grid)) - np.asarray(b.evaluate(grid))
    return float(np.sqrt(np.mean(diff**2)))


def round_half_up(x: float, decimals: int) -> float:
    """Round to publication precision, halves away from zero for x >= 0."""
    scale = 10.0**decimals
    return math.floor(x * scale + 0.5) / scale


def publication_round_median(m: MedianEstimate) -> MedianEstimate:
    r = lambda v: None if v is None else round_half_up(v, 1)
    return MedianEstimate(r(m.point), r(m.ci_lower), r(m.ci_upper))


def publication_round_hr(h: HazardRatioEstimate) -> tuple[float, float, float]:
    return tuple(round_half_up(v, 2) for v in h.as_tuple())


def iter_arm_slices(ipd: IpdSet) -> Iterable[tuple[int, IpdSet]]:
    for a in (CONTROL, TREATMENT):
        sub = ipd.arm(a)
        if len(sub):
            yield a, sub


def curves_equal(a: StepCurve, b: StepCurve, tol: float = 1e-9) -> bool:
    if len(a.points) != len(b.points):
        return False
    return all(abs(p[0] - q[0]) <= tol and abs(p[1] - q[1]) <= tol for p, q in zip(a.points, b.points))
