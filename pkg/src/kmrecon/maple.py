"""Subgroup labeling recovery by simulated annealing.

Given overall IPD, published per-subgroup counts (hard constraints) and
published summary statistics (targets), search for labelings g that meet the
counts exactly and reproduce the statistics. Moves swap the labels of two
patients in the same (arm, event status) cell, so every labeling visited keeps
the counts. The loss is the largest relative deviation between rounded
recomputed statistics and their targets.

Subgroup codes follow the simulator: 0 is biomarker-low, 1 is biomarker-high.
Patients whose label is known in advance (for example an "unknown" stratum)
are passed through a ``fixed`` mask and never move.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import maple_kernels as K
from .errors import InfeasibleConstraintsError, KmreconError, SurvivalError, ValidationError
from .survival_core import (
    IpdSet,
    StepCurve,
    confidence_band,
    cox_two_group,
    km_estimate,
    median_survival,
    round_half_up,
)

log = logging.getLogger(__name__)

KINDS = ("hr", "hr_lo", "hr_hi", "med", "med_lo", "med_hi")
SENTINEL = K.SENTINEL


# ----------------------------------------------------------------------------
# Constraints
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class HardConstraints:
    """Published counts a labeling must reproduce exactly.

    ``arm_sizes[k]`` is (control, treatment) for subgroup k. ``events`` and
    ``arm_events`` are optional; ``None`` means unpublished.
    """

    sizes: tuple[int, ...]
    arm_sizes: tuple[tuple[int, int], ...]
    events: tuple[int, ...] | None = None
    arm_events: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        k = len(self.sizes)
        if k < 1 or len(self.arm_sizes) != k:
            raise ValidationError("one size and one arm split per subgroup are required")
        for n, (a0, a1) in zip(self.sizes, self.arm_sizes):
            if min(n, a0, a1) < 0 or a0 + a1 != n:
                raise ValidationError("per-arm sizes must be non-negative and sum to the subgroup size")
        if self.events is not None:
            if len(self.events) != k or any(not 0 <= e <= n for e, n in zip(self.events, self.sizes)):
                raise ValidationError("event counts must lie within subgroup sizes")
        if self.arm_events is not None:
            if len(self.arm_events) != k:
                raise ValidationError("one per-arm event pair per subgroup is required")
            for (e0, e1), (a0, a1) in zip(self.arm_events, self.arm_sizes):
                if not (0 <= e0 <= a0 and 0 <= e1 <= a1):
                    raise ValidationError("per-arm events must lie within per-arm sizes")
            if self.events is not None and any(sum(ae) != e for ae, e in zip(self.arm_events, self.events)):
                raise ValidationError("per-arm events disagree with subgroup events")

    @property
    def n_subgroups(self) -> int:
        return len(self.sizes)

    @property
    def n_total(self) -> int:
        return sum(self.sizes)

    @classmethod
    def from_labels(cls, ipd: IpdSet, labels=None, with_events: bool = True, per_arm_events: bool = True):
        """Constraints as published for the labeling ``labels`` (default: ipd labels)."""
        g = np.asarray(ipd.labels if labels is None else labels, dtype=int)
        vec = constraint_vector(g, ipd, n_subgroups=int(g.max()) + 1)
        kk = range(int(g.max()) + 1)
        return cls(
            sizes=tuple(vec[("n", k)] for k in kk),
            arm_sizes=tuple((vec[("n", k, 0)], vec[("n", k, 1)]) for k in kk),
            events=tuple(vec[("events", k)] for k in kk) if with_events else None,
            arm_events=tuple((vec[("events", k, 0)], vec[("events", k, 1)]) for k in kk) if per_arm_events else None,
        )

    def as_vector(self) -> dict:
        out = {}
        for k, n in enumerate(self.sizes):
            out[("n", k)] = n
        for k, pair in enumerate(self.arm_sizes):
            for a in (0, 1):
                out[("n", k, a)] = pair[a]
        if self.events is not None:
            for k, e in enumerate(self.events):
                out[("events", k)] = e
        if self.arm_events is not None:
            for k, pair in enumerate(self.arm_events):
                for a in (0, 1):
                    out[("events", k, a)] = pair[a]
        return out

    def satisfied_by(self, g, ipd: IpdSet) -> bool:
        vec = constraint_vector(g, ipd, n_subgroups=self.n_subgroups)
        return all(vec[key] == v for key, v in self.as_vector().items())


def constraint_vector(g, ipd: IpdSet, n_subgroups: int | None = None) -> dict:
    """Counts under labeling ``g`` in a fixed order.

    Keys are ``("n", k)``, then ``("n", k, arm)``, then ``("events", k)``,
    then ``("events", k, arm)``.
    """
    g = np.asarray(g, dtype=int)
    if g.shape != (len(ipd),):
        raise ValidationError("labeling length must match the IPD")
    if g.size and g.min() < 0:
        raise ValidationError("labels must be complete")
    kk = n_subgroups if n_subgroups is not None else (int(g.max()) + 1 if g.size else 0)
    arms, events = ipd.arms, ipd.events
    out = {}
    for k in range(kk):
        out[("n", k)] = int(np.count_nonzero(g == k))
    for k in range(kk):
        for a in (0, 1):
            out[("n", k, a)] = int(np.count_nonzero((g == k) & (arms == a)))
    for k in range(kk):
        out[("events", k)] = int(np.count_nonzero((g == k) & events))
    for k in range(kk):
        for a in (0, 1):
            out[("events", k, a)] = int(np.count_nonzero((g == k) & (arms == a) & events))
    return out


def _cell_tables(ipd: IpdSet, constraints: HardConstraints, fixed_labels, limit: int):
    """Feasible per-(subgroup, arm) event tables for the free patients.

    Returns a list of integer arrays x[k, a] (events of subgroup k in arm a)
    together with the free subgroup sizes per arm.
    """
    kk = constraints.n_subgroups
    arms, events = ipd.arms, ipd.events
    free = fixed_labels < 0
    size = np.array(constraints.arm_sizes, dtype=int)
    ev_k = None if constraints.events is None else np.array(constraints.events, dtype=int)
    ev_ka = None if constraints.arm_events is None else np.array(constraints.arm_events, dtype=int)
    # remove patients whose label is fixed
    for i in np.nonzero(~free)[0]:
        k, a = int(fixed_labels[i]), int(arms[i])
        if k >= kk:
            raise InfeasibleConstraintsError(f"fixed label {k} outside the constrained subgroups")
        size[k, a] -= 1
        if ev_k is not None and events[i]:
            ev_k[k] -= 1
        if ev_ka is not None and events[i]:
            ev_ka[k, a] -= 1
    for k in range(kk):
        for a in (0, 1):
            if size[k, a] < 0:
                raise InfeasibleConstraintsError(f"cell (subgroup={k}, arm={a}): fixed patients exceed the published size")
    pool_n = [int(np.count_nonzero(free & (arms == a))) for a in (0, 1)]
    pool_e = [int(np.count_nonzero(free & (arms == a) & events)) for a in (0, 1)]
    for a in (0, 1):
        if size[:, a].sum() != pool_n[a]:
            raise InfeasibleConstraintsError(
                f"cell (arm={a}): published sizes sum to {size[:, a].sum()} but the IPD has {pool_n[a]} patients"
            )
    if ev_ka is not None:
        x = ev_ka.copy()
        _check_table(x, size, pool_n, pool_e)
        return [x], size

    # enumerate the undetermined per-arm event splits
    tables = []
    x = np.zeros((kk, 2), dtype=int)

    def rec(k):
        if len(tables) >= limit:
            return
        if k == kk - 1:
            for a in (0, 1):
                x[k, a] = pool_e[a] - x[:k, a].sum()
            if ev_k is not None and x[k].sum() != ev_k[k]:
                return
            if _table_ok(x, size, pool_n, pool_e):
                tables.append(x.copy())
            return
        for e0 in range(0, size[k, 0] + 1):
            if ev_k is not None:
                e1s = [ev_k[k] - e0]
            else:
                e1s = range(0, size[k, 1] + 1)
            for e1 in e1s:
                if not (0 <= e1 <= size[k, 1]):
                    continue
                x[k] = (e0, e1)
                rec(k + 1)

    rec(0)
    if not tables:
        raise InfeasibleConstraintsError("no per-arm event split satisfies the published counts")
    return tables, size


def _table_ok(x, size, pool_n, pool_e) -> bool:
    if (x < 0).any() or (x > size).any():
        return False
    for a in (0, 1):
        if x[:, a].sum() != pool_e[a] or (size[:, a] - x[:, a]).sum() != pool_n[a] - pool_e[a]:
            return False
    return True


def _check_table(x, size, pool_n, pool_e):
    for k in range(x.shape[0]):
        for a in (0, 1):
            if not 0 <= x[k, a] <= size[k, a]:
                raise InfeasibleConstraintsError(f"cell (subgroup={k}, arm={a}): events outside [0, {size[k, a]}]")
    for a in (0, 1):
        if x[:, a].sum() != pool_e[a]:
            raise InfeasibleConstraintsError(
                f"cell (arm={a}, event): published events sum to {x[:, a].sum()} but the IPD has {pool_e[a]}"
            )
        cens = (size[:, a] - x[:, a]).sum()
        if cens != pool_n[a] - pool_e[a]:
            raise InfeasibleConstraintsError(
                f"cell (arm={a}, censored): published counts imply {cens} but the IPD has {pool_n[a] - pool_e[a]}"
            )


def _fixed_labels(ipd: IpdSet, fixed) -> np.ndarray:
    if fixed is None:
        return np.full(len(ipd), -1, dtype=int)
    fixed = np.asarray(fixed)
    if fixed.dtype == bool:
        labels = ipd.labels
        return np.where(fixed, labels, -1).astype(int)
    return fixed.astype(int)


def random_feasible_labeling(ipd: IpdSet, constraints: HardConstraints, rng, fixed=None, table_limit: int = 100_000):
    """Draw a labeling meeting ``constraints`` exactly.

    Patients are shuffled within each (arm, event status) cell and dealt out
    to subgroups by the required counts. When per-arm event counts are not
    published, one feasible split is first chosen uniformly among the
    enumerated candidates (at most ``table_limit``).

    ``fixed`` is either an integer array with -1 for free patients or a
    boolean mask selecting patients that keep their ``ipd.labels``.
    """
    rng = np.random.default_rng(rng)
    fixed_labels = _fixed_labels(ipd, fixed)
    tables, size = _cell_tables(ipd, constraints, fixed_labels, table_limit)
    x = tables[int(rng.integers(len(tables)))] if len(tables) > 1 else tables[0]
    g = fixed_labels.copy()
    free = fixed_labels < 0
    for a in (0, 1):
        for ev in (True, False):
            idx = np.nonzero(free & (ipd.arms == a) & (ipd.events == ev))[0]
            counts = x[:, a] if ev else size[:, a] - x[:, a]
            idx = rng.permutation(idx)
            g[idx] = np.repeat(np.arange(len(counts)), counts)
    return g


# ----------------------------------------------------------------------------
# Targets and loss
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetComponent:
    id: str
    kind: str
    subgroup: int
    arm: int | None
    value: float
    decimals: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}")
        if self.kind.startswith("med") and self.arm not in (0, 1):
            raise ValidationError("median targets need an arm")
        if not math.isfinite(self.value) or self.value == 0:
            raise ValidationError(f"target {self.id}: value must be finite and nonzero")
        if self.kind.startswith("hr") and self.value <= 0:
            raise ValidationError(f"target {self.id}: hazard ratios must be positive")
        if self.decimals < 0:
            raise ValidationError("decimals must be non-negative")


@dataclass(frozen=True)
class SummaryTargets:
    components: tuple[TargetComponent, ...]

    def __post_init__(self):
        ids = [c.id for c in self.components]
        if len(set(ids)) != len(ids):
            raise ValidationError("target ids must be unique")
        fam: dict = {}
        for c in self.components:
            fam.setdefault((c.kind[:3].rstrip("_"), c.subgroup, c.arm), {})[c.kind.split("_")[-1]] = c.value
        for key, vals in fam.items():
            lo, hi = vals.get("lo"), vals.get("hi")
            pt = vals.get("hr", vals.get("med"))
            chain = [v for v in (lo, pt, hi) if v is not None]
            if any(b < a for a, b in zip(chain, chain[1:])):
                raise ValidationError(f"targets for {key} must satisfy lo <= point <= hi")

    def __len__(self):
        return len(self.components)

    @property
    def values(self) -> np.ndarray:
        return np.array([c.value for c in self.components], dtype=float)

    @classmethod
    def from_ipd(cls, ipd: IpdSet, labels=None, subgroups=None, hr_decimals: int = 2, med_decimals: int = 1):
        """Targets a publication would report for the given labeling.

        Statistics that are undefined (median not reached, HR diverging) are
        left out, mirroring how missing entries are absent from a paper.
        """
        g = np.asarray(ipd.labels if labels is None else labels, dtype=int)
        if subgroups is None:
            subgroups = sorted(set(int(v) for v in g if v >= 0))
        comps = []
        for k in subgroups:
            sub = ipd.select(g == k)
            try:
                h = cox_two_group(sub)
                for kind, v in zip(("hr", "hr_lo", "hr_hi"), h.as_tuple()):
                    comps.append(TargetComponent(f"{kind}[{k}]", kind, k, None, round_half_up(v, hr_decimals), hr_decimals))
            except SurvivalError:
                pass
            for a in (0, 1):
                arm = sub.arm(a)
                if not len(arm):
                    continue
                m = median_survival(km_estimate(arm))
                for kind, v in zip(("med", "med_lo", "med_hi"), m.as_tuple()):
                    if v is not None:
                        comps.append(TargetComponent(f"{kind}[{k},{a}]", kind, k, a, round_half_up(v, med_decimals), med_decimals))
        return cls(tuple(comps))

    def to_json_dict(self) -> dict:
        return {
            "components": [
                {"id": c.id, "kind": c.kind, "subgroup": c.subgroup, "arm": c.arm, "value": c.value, "decimals": c.decimals}
                for c in self.components
            ]
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SummaryTargets":
        return cls(
            tuple(
                TargetComponent(c["id"], c["kind"], int(c["subgroup"]), c.get("arm"), float(c["value"]), int(c["decimals"]))
                for c in d["components"]
            )
        )


_STAT_KEYS = (("estimate", ""), ("lower", "_lo"), ("upper", "_hi"))


def publication_dict(targets: SummaryTargets, constraints: HardConstraints) -> dict:
    """Targets and counts laid out per subgroup, the way a paper tabulates them."""
    by_id = {c.id: c for c in targets.components}
    out = []
    for k in range(constraints.n_subgroups):
        entry = {
            "subgroup": k,
            "n": constraints.sizes[k],
            "n_arm": list(constraints.arm_sizes[k]),
            "events": None if constraints.events is None else constraints.events[k],
            "events_arm": None if constraints.arm_events is None else list(constraints.arm_events[k]),
        }
        hr = {name: by_id[f"hr{suf}[{k}]"].value for name, suf in _STAT_KEYS if f"hr{suf}[{k}]" in by_id}
        if hr:
            hr["decimals"] = next(by_id[f"hr{suf}[{k}]"].decimals for _, suf in _STAT_KEYS if f"hr{suf}[{k}]" in by_id)
        entry["hr"] = hr or None
        meds = {}
        for a in (0, 1):
            m = {name: by_id[f"med{suf}[{k},{a}]"].value for name, suf in _STAT_KEYS if f"med{suf}[{k},{a}]" in by_id}
            if m:
                m["decimals"] = next(by_id[f"med{suf}[{k},{a}]"].decimals for _, suf in _STAT_KEYS if f"med{suf}[{k},{a}]" in by_id)
            meds[str(a)] = m or None
        entry["median"] = meds
        out.append(entry)
    return {"subgroups": out}


def parse_publication_dict(d: dict) -> tuple[SummaryTargets, HardConstraints]:
    """Inverse of :func:`publication_dict`; missing statistics are simply absent."""
    try:
        groups = sorted(d["subgroups"], key=lambda e: int(e["subgroup"]))
        if [int(e["subgroup"]) for e in groups] != list(range(len(groups))):
            raise ValidationError("subgroups must be numbered 0..K-1")
        events = [e.get("events") for e in groups]
        arm_events = [e.get("events_arm") for e in groups]
        cons = HardConstraints(
            sizes=tuple(int(e["n"]) for e in groups),
            arm_sizes=tuple((int(e["n_arm"][0]), int(e["n_arm"][1])) for e in groups),
            events=None if any(v is None for v in events) else tuple(int(v) for v in events),
            arm_events=None if any(v is None for v in arm_events) else tuple((int(v[0]), int(v[1])) for v in arm_events),
        )
        comps = []
        for k, e in enumerate(groups):
            hr = e.get("hr") or {}
            for name, suf in _STAT_KEYS:
                if hr.get(name) is not None:
                    comps.append(TargetComponent(f"hr{suf}[{k}]", f"hr{suf}", k, None, float(hr[name]), int(hr.get("decimals", 2))))
            for a in (0, 1):
                m = (e.get("median") or {}).get(str(a)) or {}
                for name, suf in _STAT_KEYS:
                    if m.get(name) is not None:
                        comps.append(
                            TargetComponent(f"med{suf}[{k},{a}]", f"med{suf}", k, a, float(m[name]), int(m.get("decimals", 1)))
                        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed targets file: {exc!r}") from None
    return SummaryTargets(tuple(comps)), cons


def recompute_targets(g, ipd: IpdSet, targets: SummaryTargets) -> np.ndarray:
    """Rounded statistics under labeling ``g``; NaN where undefined."""
    g = np.asarray(g, dtype=int)
    out = np.full(len(targets), np.nan)
    hr_cache: dict = {}
    med_cache: dict = {}
    for j, c in enumerate(targets.components):
        sub = ipd.select(g == c.subgroup)
        if c.kind.startswith("hr"):
            if c.subgroup not in hr_cache:
                try:
                    hr_cache[c.subgroup] = cox_two_group(sub).as_tuple()
                except SurvivalError:
                    hr_cache[c.subgroup] = (None, None, None)
            v = hr_cache[c.subgroup][("hr", "hr_lo", "hr_hi").index(c.kind)]
        else:
            key = (c.subgroup, c.arm)
            if key not in med_cache:
                arm = sub.arm(c.arm)
                med_cache[key] = median_survival(km_estimate(arm)).as_tuple() if len(arm) else (None, None, None)
            v = med_cache[key][("med", "med_lo", "med_hi").index(c.kind)]
        if v is not None:
            out[j] = round_half_up(v, c.decimals)
    return out


@dataclass(frozen=True)
class LossReport:
    loss: float
    r: tuple[float, ...]
    argmax: int | None


def linf_loss(recomputed, target_values) -> LossReport:
    """Largest relative deviation; undefined statistics score ``SENTINEL``."""
    a = np.asarray(recomputed, dtype=float)
    b = np.asarray(target_values, dtype=float)
    if a.shape != b.shape:
        raise ValidationError("recomputed and target vectors differ in length")
    if np.any(b == 0):
        raise ValidationError("target values must be nonzero")
    if a.size == 0:
        return LossReport(0.0, (), None)
    r = np.where(np.isnan(a), SENTINEL, np.abs(a - b) / np.abs(b))
    j = int(np.argmax(r))
    return LossReport(float(r[j]), tuple(float(v) for v in r), j)


class TargetEvaluator:
    """Compiled recomputation of ``targets`` for labelings of ``ipd``.

    Agrees with :func:`recompute_targets` to the published rounding; ensemble
    members are re-checked through the reference path regardless.
    """

    def __init__(self, ipd: IpdSet, targets: SummaryTargets):
        self.order = np.lexsort((~ipd.events, ipd.times))
        self.t = ipd.times[self.order].astype(float)
        self.ev = ipd.events[self.order].astype(np.bool_)
        self.z = ipd.arms[self.order].astype(np.int64)
        comps = targets.components
        self.kinds = np.array([K.KIND_CODES[c.kind] for c in comps], dtype=np.int64)
        self.subgroups = np.array([c.subgroup for c in comps], dtype=np.int64)
        self.arms = np.array([c.arm if c.arm is not None else 0 for c in comps], dtype=np.int64)
        self.decimals = np.array([c.decimals for c in comps], dtype=np.int64)
        self.target_values = targets.values
        self.n_sub = int(self.subgroups.max()) + 1 if len(comps) else 1
        self._out = np.empty(len(comps))

    def values(self, g) -> np.ndarray:
        gs = np.ascontiguousarray(np.asarray(g, dtype=np.int64)[self.order])
        out = np.empty(len(self.kinds))
        K.recompute(gs, self.t, self.ev, self.z, self.kinds, self.subgroups, self.arms, self.decimals, self.n_sub, out)
        return out

    def loss(self, g) -> float:
        gs = np.ascontiguousarray(np.asarray(g, dtype=np.int64)[self.order])
        K.recompute(gs, self.t, self.ev, self.z, self.kinds, self.subgroups, self.arms, self.decimals, self.n_sub, self._out)
        return float(K.linf(self._out, self.target_values))


class ReferenceEvaluator:
    """Slow evaluator built directly on :mod:`kmrecon.survival_core`."""

    def __init__(self, ipd: IpdSet, targets: SummaryTargets):
        self.ipd, self.targets = ipd, targets

    def values(self, g) -> np.ndarray:
        return recompute_targets(g, self.ipd, self.targets)

    def loss(self, g) -> float:
        return linf_loss(self.values(g), self.targets.values).loss


# ----------------------------------------------------------------------------
# Moves and annealing
# ----------------------------------------------------------------------------


class FrozenLabelingError(KmreconError):
    def __init__(self):
        super().__init__("frozen labeling")


class SwapSampler:
    """Uniform draws of label-exchanging pairs inside (arm, event) cells.

    Each unordered pair (i, j) with equal arm and event status, different
    labels, and neither patient fixed is drawn with the same probability.
    Cell label counts never change under swaps, so the pair weights are
    computed once.
    """

    def __init__(self, g, ipd: IpdSet, fixed=None):
        self.g = np.array(g, dtype=np.int64)
        fixed_labels = _fixed_labels(ipd, fixed)
        free = fixed_labels < 0
        cell = ipd.arms.astype(int) * 2 + ipd.events.astype(int)
        self.cell = cell.tolist()
        n_lab = int(self.g.max()) + 1 if self.g.size else 0
        self.members: dict = {}
        self.pos = np.zeros(len(self.g), dtype=np.int64)
        for c in range(4):
            for k in range(n_lab):
                idx = np.nonzero(free & (cell == c) & (self.g == k))[0]
                if len(idx):
                    self.members[(c, k)] = idx.copy()
                    self.pos[idx] = np.arange(len(idx))
        triples, weights = [], []
        for c in range(4):
            for k, l in itertools.combinations(range(n_lab), 2):
                w = len(self.members.get((c, k), ())) * len(self.members.get((c, l), ()))
                if w:
                    triples.append((c, k, l))
                    weights.append(w)
        self.triples = triples
        self.cum = np.cumsum(weights, dtype=float)
        self.n_pairs = int(sum(weights))

    def draw(self, rng) -> tuple[int, int]:
        if not self.triples:
            raise FrozenLabelingError()
        u = rng.random() * self.cum[-1]
        c, k, l = self.triples[int(np.searchsorted(self.cum, u, side="right"))]
        a, b = self.members[(c, k)], self.members[(c, l)]
        i = int(a[min(int(rng.random() * len(a)), len(a) - 1)])
        j = int(b[min(int(rng.random() * len(b)), len(b) - 1)])
        return i, j

    def swap(self, i: int, j: int):
        g = self.g
        pi, pj = self.pos[i], self.pos[j]
        self.members[(self.cell[i], int(g[i]))][pi] = j
        self.members[(self.cell[j], int(g[j]))][pj] = i
        self.pos[i], self.pos[j] = pj, pi
        g[i], g[j] = g[j], g[i]


def balanced_swap(g, ipd: IpdSet, rng, fixed=None) -> np.ndarray:
    """Return a copy of ``g`` with one uniformly drawn eligible pair exchanged."""
    rng = np.random.default_rng(rng)
    sampler = SwapSampler(g, ipd, fixed)
    i, j = sampler.draw(rng)
    sampler.swap(i, j)
    return sampler.g.copy()


@dataclass(frozen=True)
class SaConfig:
    t0: float = 1.0
    cooling: float = 0.999
    max_iter: int = 200_000
    min_iter: int = 20_000
    stagnation_stop_iter: int = 10_000
    seeds: int = 1000

    def __post_init__(self):
        if not self.t0 > 0:
            raise ValidationError("t0 must be positive")
        if not 0 < self.cooling < 1:
            raise ValidationError("cooling must lie in (0, 1)")
        if self.max_iter < 1 or self.min_iter < 0 or self.stagnation_stop_iter < 1 or self.seeds < 1:
            raise ValidationError("iteration budgets and seed count must be positive")


def acceptance_probability(delta: float, temperature: float) -> float:
    """Metropolis rule: 1 for non-increasing loss, exp(-delta/T) otherwise."""
    if delta <= 0:
        return 1.0
    return math.exp(-delta / temperature)


@dataclass
class AnnealResult:
    labels: np.ndarray
    loss: float
    iterations: int
    accepted: int
    seed: int | None = None


def anneal(
    ipd: IpdSet,
    targets: SummaryTargets,
    constraints: HardConstraints,
    cfg: SaConfig = SaConfig(),
    rng=None,
    fixed=None,
    g0=None,
    evaluator=None,
) -> AnnealResult:
    """Simulated annealing over balanced same-cell swaps.

    Keeps the best labeling seen, resets the stagnation counter on every
    improvement, cools geometrically each iteration and stops when the best
    loss is zero or, after ``min_iter`` iterations, when it has not improved
    for ``stagnation_stop_iter`` iterations.
    """
    rng = np.random.default_rng(rng)
    ev = evaluator if evaluator is not None else TargetEvaluator(ipd, targets)
    g = random_feasible_labeling(ipd, constraints, rng, fixed) if g0 is None else np.array(g0, dtype=np.int64)
    sampler = SwapSampler(g, ipd, fixed)
    g = sampler.g
    temp = cfg.t0
    cur = ev.loss(g)
    best, best_loss = g.copy(), cur
    stale = 0
    accepted = 0
    t = 0
    for t in range(cfg.max_iter):
        if sampler.n_pairs:
            i, j = sampler.draw(rng)
            sampler.swap(i, j)
            new = ev.loss(g)
            delta = new - cur
            if delta <= 0 or rng.random() <= math.exp(-delta / temp):
                cur = new
                accepted += 1
            else:
                sampler.swap(i, j)
        if cur < best_loss:
            best, best_loss = g.copy(), cur
            stale = 0
        else:
            stale += 1
        temp *= cfg.cooling
        if best_loss == 0 or (t + 1 >= cfg.min_iter and stale >= cfg.stagnation_stop_iter):
            break
    return AnnealResult(best, float(best_loss), t + 1, accepted)


def run_seeds(
    ipd: IpdSet,
    targets: SummaryTargets,
    constraints: HardConstraints,
    cfg: SaConfig = SaConfig(),
    master_seed: int = 0,
    n_runs: int | None = None,
    fixed=None,
    workers: int = 1,
    first: int = 0,
) -> list[AnnealResult]:
    """Independent annealing runs, run r seeded by child r of ``master_seed``.

    ``first`` skips the leading runs, so a sweep can be extended later
    without repeating work: runs [0, a) and then [a, b) reproduce [0, b).
    """
    n_runs = cfg.seeds if n_runs is None else n_runs
    children = np.random.SeedSequence(master_seed).spawn(first + n_runs)[first:]
    jobs = [(ipd, targets, constraints, cfg, s, fixed, first + r) for r, s in enumerate(children)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))
    ev = TargetEvaluator(ipd, targets)
    return [_run_one(job, ev) for job in jobs]


def _run_one(job, evaluator=None) -> AnnealResult:
    ipd, targets, constraints, cfg, seq, fixed, r = job
    res = anneal(ipd, targets, constraints, cfg, np.random.default_rng(seq), fixed=fixed, evaluator=evaluator)
    res.seed = r
    return res


# ----------------------------------------------------------------------------
# Ensembles
# ----------------------------------------------------------------------------


@dataclass
class LabelingEnsemble:
    members: list[np.ndarray]
    loss: float
    statistics: list[np.ndarray] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    def with_statistics(self, ipd: IpdSet, targets: SummaryTargets) -> "LabelingEnsemble":
        stats = [recompute_targets(g, ipd, targets) for g in self.members]
        return LabelingEnsemble(list(self.members), self.loss, stats, list(self.warnings))

    def frequency_table(self, targets: SummaryTargets) -> dict:
        """Percentage of members giving each value of each statistic."""
        if len(self.statistics) != len(self.members):
            raise ValidationError("statistics have not been computed")
        out = {}
        for j, c in enumerate(targets.components):
            vals = [s[j] for s in self.statistics]
            keys = sorted(set("NA" if math.isnan(v) else f"{v:.{c.decimals}f}" for v in vals))
            counts = {k: 0 for k in keys}
            for v in vals:
                counts["NA" if math.isnan(v) else f"{v:.{c.decimals}f}"] += 1
            out[c.id] = {k: 100.0 * n / len(vals) for k, n in counts.items()}
        return out

    def to_json_dict(self, targets: SummaryTargets | None = None) -> dict:
        d = {
            "loss": self.loss,
            "n_members": len(self.members),
            "members": [[int(v) for v in g] for g in self.members],
            "warnings": list(self.warnings),
        }
        if self.statistics:
            d["statistics"] = [[None if math.isnan(v) else float(v) for v in s] for s in self.statistics]
        if targets is not None:
            d["targets"] = targets.to_json_dict()
            if self.statistics:
                d["frequency"] = self.frequency_table(targets)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "LabelingEnsemble":
        members = [np.asarray(g, dtype=np.int64) for g in d["members"]]
        stats = [np.array([np.nan if v is None else v for v in s], dtype=float) for s in d.get("statistics", [])]
        return cls(members, float(d["loss"]), stats, list(d.get("warnings", [])))


def build_ensemble(results) -> LabelingEnsemble:
    """Collect every distinct labeling that attains the smallest loss."""
    results = list(results)
    if not results:
        raise ValidationError("at least one run is required")
    pairs = [(np.asarray(r.labels), r.loss) if isinstance(r, AnnealResult) else (np.asarray(r[0]), float(r[1])) for r in results]
    best = min(loss for _, loss in pairs)
    seen, members = set(), []
    for g, loss in pairs:
        if loss != best:
            continue
        key = np.asarray(g, dtype=np.int64).tobytes()
        if key not in seen:
            seen.add(key)
            members.append(np.asarray(g, dtype=np.int64))
    return LabelingEnsemble(members, float(best))


def verify_ensemble(ens: LabelingEnsemble, ipd: IpdSet, targets: SummaryTargets, constraints: HardConstraints) -> list[str]:
    """Re-check members through the reference statistics; returns problems found."""
    problems = []
    for m, g in enumerate(ens.members):
        if not constraints.satisfied_by(g, ipd):
            problems.append(f"member {m}: count constraints violated")
        loss = linf_loss(recompute_targets(g, ipd, targets), targets.values).loss
        if loss != ens.loss:
            problems.append(f"member {m}: reference loss {loss:.6g} differs from ensemble loss {ens.loss:.6g}")
    return problems


def within_band(curve: StepCurve, lower: StepCurve, upper: StepCurve, grid, tol: float = 1e-12) -> bool:
    s = np.asarray(curve.evaluate(grid), dtype=float)
    return bool(np.all(s >= np.asarray(lower.evaluate(grid)) - tol) and np.all(s <= np.asarray(upper.evaluate(grid)) + tol))


def filter_ensemble(ens: LabelingEnsemble, ipd: IpdSet, references: dict, tol: float = 1e-12, grids: dict | None = None):
    """Keep members whose subgroup KM curves stay inside the reference bands.

    ``references`` maps (subgroup, arm) to a (lower, upper) pair of step
    curves. Each band is checked at the drop times of its reference curve,
    taken from ``grids`` when given and otherwise from the band's time points.
    """
    keep, stats = [], []
    for m, g in enumerate(ens.members):
        ok = True
        for (k, a), (lower, upper) in references.items():
            sub = ipd.select((np.asarray(g) == k) & (ipd.arms == a))
            if not len(sub):
                ok = False
                break
            grid = grids[(k, a)] if grids and (k, a) in grids else _band_grid(lower, upper)
            if not within_band(km_estimate(sub), lower, upper, grid, tol):
                ok = False
                break
        if ok:
            keep.append(g)
            if ens.statistics:
                stats.append(ens.statistics[m])
    warnings = list(ens.warnings)
    if not keep and ens.members:
        msg = "no ensemble member lies within the reference bands"
        warnings.append(msg)
        log.warning(msg)
    return LabelingEnsemble(keep, ens.loss, stats, warnings)


def _band_grid(lower: StepCurve, upper: StepCurve) -> np.ndarray:
    # bands from confidence_band keep the time points of the curve they came from
    return np.union1d(lower.times, upper.times)


def envelope(ens: LabelingEnsemble, ipd: IpdSet, subgroup: int, arm: int, grid) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise min and max of the members' KM curves on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    if not ens.members:
        raise ValidationError("empty ensemble has no envelope")
    vals = []
    for g in ens.members:
        sub = ipd.select((np.asarray(g) == subgroup) & (ipd.arms == arm))
        vals.append(np.asarray(km_estimate(sub).evaluate(grid), dtype=float))
    v = np.vstack(vals)
    return v.min(axis=0), v.max(axis=0)


def reference_bands(curves: dict, level: float = 0.95) -> dict:
    """(lower, upper) confidence bands for each reconstructed reference curve."""
    return {key: confidence_band(c, level) for key, c in curves.items()}
