import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from kmrecon import maple, simgen
from kmrecon.errors import InfeasibleConstraintsError, ValidationError
from kmrecon.survival_core import IpdSet, km_estimate


@pytest.fixture(scope="module")
def trial():
    ipd = simgen.generate(simgen.SimConfig(seed=0))
    return ipd, maple.SummaryTargets.from_ipd(ipd), maple.HardConstraints.from_labels(ipd)


def small_ipd():
    return IpdSet.from_arrays([1, 2, 3, 4], [1, 1, 0, 1], [0, 1, 0, 1], [0, 0, 1, 1])


# -- constraint_vector --------------------------------------------------------


def test_constraint_vector_counts():
    vec = maple.constraint_vector([0, 0, 1, 1], small_ipd())
    assert vec[("n", 0)] == 2 and vec[("n", 1)] == 2
    assert [vec[("n", k, a)] for k in (0, 1) for a in (0, 1)] == [1, 1, 1, 1]
    keys = list(vec)
    assert keys[:2] == [("n", 0), ("n", 1)]
    assert keys[2:6] == [("n", 0, 0), ("n", 0, 1), ("n", 1, 0), ("n", 1, 1)]


def test_constraint_vector_single_subgroup():
    vec = maple.constraint_vector([0, 0, 0, 0], small_ipd(), n_subgroups=2)
    assert vec[("n", 0)] == 4
    assert all(v == 0 for k, v in vec.items() if k[1] == 1)


def test_constraint_vector_truth_design(trial):
    ipd, _, _ = trial
    vec = maple.constraint_vector(ipd.labels, ipd)
    assert vec[("n", 0)] == 200 and vec[("n", 1)] == 200


def test_constraints_validation():
    with pytest.raises(ValidationError):
        maple.HardConstraints((2, 2), ((1, 1), (1, 2)))
    with pytest.raises(ValidationError):
        maple.HardConstraints((2,), ((1, 1),), events=(3,))


# -- targets and loss ---------------------------------------------------------


def test_recompute_empty_targets(trial):
    ipd, _, _ = trial
    assert maple.recompute_targets(ipd.labels, ipd, maple.SummaryTargets(())).shape == (0,)


def test_symmetric_arms_give_unit_hr():
    t = [1, 2, 3, 4, 5, 6]
    e = [1, 0, 1, 1, 0, 1]
    ipd = IpdSet.from_arrays(t + t, e + e, [0] * 6 + [1] * 6, [0] * 12)
    tg = maple.SummaryTargets((maple.TargetComponent("hr", "hr", 0, None, 1.0, 2),))
    assert maple.recompute_targets(np.zeros(12, int), ipd, tg)[0] == 1.0


def test_truth_labeling_has_zero_loss(trial):
    ipd, tg, _ = trial
    rec = maple.recompute_targets(ipd.labels, ipd, tg)
    assert np.array_equal(rec, tg.values)
    assert maple.linf_loss(rec, tg.values).loss == 0.0
    assert maple.TargetEvaluator(ipd, tg).loss(ipd.labels) == 0.0


def test_linf_loss_examples():
    assert maple.linf_loss([0.9], [1.0]).loss == pytest.approx(0.1)
    rep = maple.linf_loss([0.9, 7.0], [1.0, 7.5])
    assert rep.loss == pytest.approx(0.1)
    assert rep.argmax == 0
    assert rep.r[1] == pytest.approx(0.5 / 7.5)
    assert maple.linf_loss([2.0, 3.0], [2.0, 3.0]).loss == 0.0


def test_undefined_statistic_scores_sentinel():
    assert maple.linf_loss([np.nan, 1.0], [5.0, 1.0]).loss == maple.SENTINEL


def test_target_validation():
    with pytest.raises(ValidationError):
        maple.TargetComponent("x", "hr", 0, None, 0.0, 2)
    with pytest.raises(ValidationError):
        maple.TargetComponent("x", "med", 0, None, 5.0, 1)
    lo = maple.TargetComponent("a", "hr_lo", 0, None, 0.9, 2)
    pt = maple.TargetComponent("b", "hr", 0, None, 0.8, 2)
    with pytest.raises(ValidationError):
        maple.SummaryTargets((lo, pt))


def test_targets_json_round_trip(trial):
    _, tg, _ = trial
    assert maple.SummaryTargets.from_json_dict(tg.to_json_dict()) == tg


def _tied_problem(seed, n=40):
    rng = np.random.default_rng(seed)
    times = rng.integers(1, 12, n).astype(float)
    events = rng.random(n) < 0.7
    arms = rng.integers(0, 2, n)
    labels = rng.integers(0, 2, n)
    return IpdSet.from_arrays(times, events, arms, labels)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_compiled_evaluator_matches_reference(seed):
    ipd = _tied_problem(seed)
    tg = maple.SummaryTargets.from_ipd(ipd)
    fast = maple.TargetEvaluator(ipd, tg)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        g = rng.integers(0, 2, len(ipd))
        ref = maple.recompute_targets(g, ipd, tg)
        assert np.array_equal(fast.values(g), ref, equal_nan=True)


def test_compiled_evaluator_matches_reference_on_trial(trial):
    ipd, tg, cons = trial
    fast = maple.TargetEvaluator(ipd, tg)
    rng = np.random.default_rng(3)
    for _ in range(50):
        g = maple.random_feasible_labeling(ipd, cons, rng)
        assert np.array_equal(fast.values(g), maple.recompute_targets(g, ipd, tg), equal_nan=True)


# -- feasible initialisation --------------------------------------------------


def test_forced_single_subgroup():
    ipd = small_ipd()
    cons = maple.HardConstraints((4, 0), ((2, 2), (0, 0)))
    g = maple.random_feasible_labeling(ipd, cons, 0)
    assert g.tolist() == [0, 0, 0, 0]


def test_two_patient_labeling_is_fair():
    ipd = IpdSet.from_arrays([1.0, 2.0], [1, 1], [0, 0])
    cons = maple.HardConstraints((1, 1), ((1, 0), (1, 0)))
    first = [int(maple.random_feasible_labeling(ipd, cons, s)[0]) for s in range(1000)]
    counts = np.bincount(first, minlength=2)
    assert stats.chisquare(counts).pvalue > 0.001


def test_feasible_labelings_meet_constraints(trial):
    ipd, _, cons = trial
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = maple.random_feasible_labeling(ipd, cons, rng)
        assert cons.satisfied_by(g, ipd)


def test_unpublished_arm_events_are_enumerated(trial):
    ipd, _, cons = trial
    loose = maple.HardConstraints(cons.sizes, cons.arm_sizes, events=cons.events)
    rng = np.random.default_rng(1)
    splits = set()
    for _ in range(30):
        g = maple.random_feasible_labeling(ipd, loose, rng)
        assert loose.satisfied_by(g, ipd)
        vec = maple.constraint_vector(g, ipd)
        splits.add(vec[("events", 0, 0)])
    assert len(splits) > 1


def test_infeasible_constraints_name_cell():
    ipd = small_ipd()
    with pytest.raises(InfeasibleConstraintsError, match="arm=0"):
        maple.random_feasible_labeling(ipd, maple.HardConstraints((3, 1), ((3, 0), (0, 1))), 0)
    with pytest.raises(InfeasibleConstraintsError, match="cell"):
        cons = maple.HardConstraints((2, 2), ((1, 1), (1, 1)), arm_events=((1, 1), (1, 1)))
        maple.random_feasible_labeling(ipd, cons, 0)


def test_fixed_patients_keep_their_label():
    ipd = IpdSet.from_arrays(np.arange(1, 9), [1] * 8, [0, 1] * 4, [0, 0, 0, 1, 1, 1, 2, 2])
    fixed = np.array([False] * 6 + [True] * 2)
    cons = maple.HardConstraints.from_labels(ipd)
    for s in range(10):
        g = maple.random_feasible_labeling(ipd, cons, s, fixed=fixed)
        assert g[6] == 2 and g[7] == 2
        assert cons.satisfied_by(g, ipd)
        g2 = maple.balanced_swap(g, ipd, s, fixed=fixed)
        assert g2[6] == 2 and g2[7] == 2


# -- swaps --------------------------------------------------------------------


def test_two_patient_swap_is_transposition():
    ipd = IpdSet.from_arrays([1.0, 2.0], [1, 1], [0, 0])
    assert maple.balanced_swap([0, 1], ipd, 0).tolist() == [1, 0]


def test_frozen_labeling():
    ipd = small_ipd()
    with pytest.raises(maple.FrozenLabelingError, match="frozen labeling"):
        maple.balanced_swap([0, 1, 0, 1], ipd, 0)


def test_swap_pairs_are_uniform():
    # cell of 3 events, labels 0,0,1 -> pairs (0,2), (1,2); second cell 2 censored 0,1 -> (3,4)
    ipd = IpdSet.from_arrays([1, 2, 3, 4, 5], [1, 1, 1, 0, 0], [0] * 5)
    g = [0, 0, 1, 0, 1]
    sampler = maple.SwapSampler(g, ipd)
    assert sampler.n_pairs == 3
    rng = np.random.default_rng(0)
    seen = {}
    for _ in range(3000):
        pair = tuple(sorted(sampler.draw(rng)))
        seen[pair] = seen.get(pair, 0) + 1
    assert set(seen) == {(0, 2), (1, 2), (3, 4)}
    assert stats.chisquare(list(seen.values())).pvalue > 0.001


def test_swaps_conserve_counts_long_run(trial):
    ipd, _, cons = trial
    rng = np.random.default_rng(0)
    g0 = maple.random_feasible_labeling(ipd, cons, rng)
    sampler = maple.SwapSampler(g0, ipd)
    cell = ipd.arms * 2 + ipd.events.astype(int)
    want = np.bincount(cell * 2 + g0, minlength=8)
    for step in range(100_000):
        i, j = sampler.draw(rng)
        assert cell[i] == cell[j] and sampler.g[i] != sampler.g[j]
        sampler.swap(i, j)
        if step % 97 == 0:
            assert np.array_equal(np.bincount(cell * 2 + sampler.g, minlength=8), want)
    assert cons.satisfied_by(sampler.g, ipd)


# -- annealing ----------------------------------------------------------------


def test_acceptance_probability():
    assert maple.acceptance_probability(0.0, 2.0) == 1.0
    assert maple.acceptance_probability(-1.0, 2.0) == 1.0
    assert maple.acceptance_probability(0.3, 0.3) == pytest.approx(math.exp(-1), abs=1e-15)
    assert maple.acceptance_probability(0.3, 0.3) == pytest.approx(0.367879, abs=1e-6)


def test_sa_config_validation():
    with pytest.raises(ValidationError):
        maple.SaConfig(t0=0)
    with pytest.raises(ValidationError):
        maple.SaConfig(cooling=1.0)


class _ConstantLoss:
    def __init__(self, value):
        self.value = value
        self.calls = 0

    def loss(self, g):
        self.calls += 1
        return self.value


def test_stagnation_stop(trial):
    ipd, tg, cons = trial
    cfg = maple.SaConfig(min_iter=300, stagnation_stop_iter=100, max_iter=10_000)
    res = maple.anneal(ipd, tg, cons, cfg, 0, evaluator=_ConstantLoss(0.5))
    assert res.iterations == 300 and res.loss == 0.5
    cfg = maple.SaConfig(min_iter=50, stagnation_stop_iter=100, max_iter=10_000)
    assert maple.anneal(ipd, tg, cons, cfg, 0, evaluator=_ConstantLoss(0.5)).iterations == 100


def test_budget_exhaustion(trial):
    ipd, tg, cons = trial
    cfg = maple.SaConfig(min_iter=10, stagnation_stop_iter=10_000, max_iter=40)
    assert maple.anneal(ipd, tg, cons, cfg, 0, evaluator=_ConstantLoss(0.5)).iterations == 40


def test_zero_loss_stops_immediately(trial):
    ipd, tg, cons = trial
    res = maple.anneal(ipd, tg, cons, maple.SaConfig(), 0, g0=ipd.labels)
    assert res.iterations == 1 and res.loss == 0.0
    assert np.array_equal(res.labels, ipd.labels)


def test_anneal_is_deterministic(trial):
    ipd, tg, cons = trial
    cfg = maple.SaConfig(min_iter=500, stagnation_stop_iter=200, max_iter=2000)
    a = maple.anneal(ipd, tg, cons, cfg, 11)
    b = maple.anneal(ipd, tg, cons, cfg, 11)
    assert np.array_equal(a.labels, b.labels) and a.loss == b.loss and a.iterations == b.iterations
    assert cons.satisfied_by(a.labels, ipd)


def test_run_seeds_extends_a_sweep(trial):
    ipd, tg, cons = trial
    cfg = maple.SaConfig(min_iter=200, stagnation_stop_iter=100, max_iter=300)
    whole = maple.run_seeds(ipd, tg, cons, cfg, 3, n_runs=5)
    tail = maple.run_seeds(ipd, tg, cons, cfg, 3, n_runs=3, first=2)
    assert [r.seed for r in tail] == [2, 3, 4]
    assert all(np.array_equal(x.labels, y.labels) for x, y in zip(whole[2:], tail))


def test_anneal_reaches_zero_loss(trial):
    ipd, tg, cons = trial
    res = maple.anneal(ipd, tg, cons, maple.SaConfig(), 5)
    assert res.loss == 0.0
    assert cons.satisfied_by(res.labels, ipd)
    assert maple.linf_loss(maple.recompute_targets(res.labels, ipd, tg), tg.values).loss == 0.0


# -- ensembles ----------------------------------------------------------------


def test_build_ensemble_minimum_and_dedup():
    ens = maple.build_ensemble([([0, 1, 1], 0.0), ([1, 0, 1], 0.0), ([1, 1, 0], 0.1), ([0, 1, 1], 0.0)])
    assert len(ens) == 2 and ens.loss == 0.0
    single = maple.build_ensemble([([0, 1], 0.2)] * 3)
    assert len(single) == 1 and single.loss == 0.2


def _band(curve):
    return curve, curve


def test_filter_vacuous_and_degenerate(trial):
    ipd, _, _ = trial
    rng = np.random.default_rng(0)
    cons = maple.HardConstraints.from_labels(ipd)
    members = [ipd.labels] + [maple.random_feasible_labeling(ipd, cons, rng) for _ in range(4)]
    ens = maple.build_ensemble([(g, 0.0) for g in members])
    grid = np.linspace(0, 24, 50)
    from kmrecon.survival_core import StepCurve

    zero, one = StepCurve(((0.0, 0.0),)), StepCurve(((0.0, 1.0),))
    refs = {(k, a): (zero, one) for k in (0, 1) for a in (0, 1)}
    assert len(maple.filter_ensemble(ens, ipd, refs, grids={key: grid for key in refs})) == len(ens)

    own = km_estimate(ipd.select((ipd.labels == 1) & (ipd.arms == 0)))
    kept = maple.filter_ensemble(ens, ipd, {(1, 0): _band(own)})
    assert len(kept) >= 1 and np.array_equal(kept.members[0], ipd.labels)
    for g in kept.members:
        sub = km_estimate(ipd.select((g == 1) & (ipd.arms == 0)))
        assert np.allclose(sub.evaluate(own.times), own.survival)


def test_filter_empty_warns(trial):
    ipd, _, _ = trial
    from kmrecon.survival_core import StepCurve

    never = StepCurve(((0.0, 0.5),))
    ens = maple.build_ensemble([(ipd.labels, 0.0)])
    out = maple.filter_ensemble(ens, ipd, {(0, 0): (never, never)})
    assert len(out) == 0 and out.warnings


def test_filtered_is_subset(trial):
    ipd, _, cons = trial
    rng = np.random.default_rng(2)
    ens = maple.build_ensemble([(maple.random_feasible_labeling(ipd, cons, rng), 0.0) for _ in range(6)])
    refs = maple.reference_bands({(1, a): km_estimate(ipd.select((ipd.labels == 1) & (ipd.arms == a))) for a in (0, 1)})
    out = maple.filter_ensemble(ens, ipd, refs)
    keys = {g.tobytes() for g in ens.members}
    assert all(g.tobytes() in keys for g in out.members)


def test_ensemble_json_round_trip(trial):
    ipd, tg, _ = trial
    ens = maple.build_ensemble([(ipd.labels, 0.0)]).with_statistics(ipd, tg)
    d = ens.to_json_dict(tg)
    assert d["frequency"]["hr[1]"] == {f"{tg.values[9]:.2f}": 100.0}
    back = maple.LabelingEnsemble.from_json_dict(d)
    assert np.array_equal(back.members[0], ipd.labels) and np.array_equal(back.statistics[0], tg.values)
