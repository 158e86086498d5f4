import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from helpers import HOUR, make_job, make_site
from tardis.pricing import rate_at
from tardis.scheduler import (
    RunningJob,
    ScoreWeights,
    SiteState,
    cost_factor,
    dispatch_backfill,
    dispatch_fcfs,
    dispatch_random,
    dispatch_sjf,
    dispatch_tardis,
    optimal_dispatch_bruteforce,
    power_efficiency,
    priority_ratio,
    reserve,
    score,
    utilization_factor,
    wait_factor,
)

DISPATCHERS = {
    "tardis": lambda q, s, now, p: dispatch_tardis(q, s, now, p),
    "fcfs": dispatch_fcfs,
    "sjf": dispatch_sjf,
    "backfill": dispatch_backfill,
    "random": lambda q, s, now, p: dispatch_random(q, s, now, p, seed=3, step=1),
}


def oracle(jobs):
    return {j.id: j.true_power for j in jobs}


def busy_state(site, *jobs, start=0.0):
    return SiteState(site, tuple(RunningJob(j, start, j.true_power) for j in jobs))


# -- factors -----------------------------------------------------------------

def test_cost_factor_examples():
    assert cost_factor(0, 2, 0.12) == 1.0
    assert cost_factor(10, 2, 0.12) == pytest.approx(1 / 3.4)
    assert cost_factor(10, 2, 0.12) == pytest.approx(0.29412, abs=1e-5)
    assert cost_factor(10, 2, 0.36) == pytest.approx(0.12195, abs=1e-5)
    assert cost_factor(10, 2, -0.5) == 1.0


def test_other_factor_examples():
    assert power_efficiency(0, 2, 32) == 1.0
    assert power_efficiency(64, 2, 32) == 0.5
    assert power_efficiency(64, 4, 32) > power_efficiency(64, 2, 32)
    site = make_site(nodes=100)
    assert utilization_factor(SiteState(site)) == 1.0
    assert utilization_factor(busy_state(site, make_job(nodes=100))) == 0.0
    assert utilization_factor(busy_state(site, make_job(nodes=30))) == pytest.approx(0.7)
    assert wait_factor(5.0, 5.0, 24 * HOUR) == 0.0
    assert wait_factor(24 * HOUR, 0.0, 24 * HOUR) == 1.0
    assert wait_factor(6 * HOUR, 0.0, 24 * HOUR) == 0.25
    assert priority_ratio(5, 10) == 0.5


def test_score_examples():
    site = make_site(nodes=100, off=0.12)
    state = busy_state(site, make_job("r", nodes=30))
    job = make_job("j", submit=0.0, nodes=2, cores_per_node=5, runtime=2 * HOUR, power=10.0)
    now = 6 * HOUR
    w = ScoreWeights(0.4, 0.2, 0.2, 0.2, 0.0)
    expected = 0.4 * (1 / 3.4) + 0.2 * 0.5 + 0.2 * 0.7 + 0.2 * 0.25
    assert score(job, site, now, 10.0, state, w) == pytest.approx(expected)
    assert score(job, site, now, 10.0, state, w) == pytest.approx(0.4076, abs=1e-3)
    assert score(job, site, now, 10.0, state, ScoreWeights(0, 0, 0, 0, 0)) == 0.0
    assert score(job, site, now, 10.0, state, ScoreWeights(1, 0, 0, 0, 0)) == pytest.approx(1 / 3.4)


@given(st.floats(0.01, 1e3), st.floats(0.01, 100), st.floats(0.01, 5))
def test_cost_factor_strictly_decreasing(p, d, r):
    c = cost_factor(p, d, r)
    assert 0 < c <= 1
    assert cost_factor(p * 1.5, d, r) < c
    assert cost_factor(p, d * 1.5, r) < c
    assert cost_factor(p, d, r * 1.5) < c


@given(st.floats(0, 100), st.integers(1, 32), st.integers(0, 16), st.floats(0, 1e6),
       st.integers(0, 20), st.lists(st.floats(0, 1), min_size=5, max_size=5))
def test_score_bounds(p, nodes, used, waited, prio, w):
    site = make_site(nodes=32, off=0.3)
    state = busy_state(site, make_job("r", nodes=min(used, 32))) if used else SiteState(site)
    job = make_job("j", nodes=nodes, power=p, priority=prio)
    weights = ScoreWeights(*w, p_max=10)
    s = score(job, site, waited, p, state, weights)
    assert -1e-12 <= s <= weights.total + 1e-12


# -- TARDIS ------------------------------------------------------------------

def test_tardis_single_job_assigned_now():
    site = make_site(nodes=4, budget=10)
    job = make_job("a", nodes=2, power=3)
    out = dispatch_tardis([job], [SiteState(site)], 0.0, oracle([job]))
    assert [(a.job_id, a.site, a.start_time) for a in out] == [("a", "S", 0.0)]


def test_tardis_over_budget_stays_queued():
    site = make_site(nodes=4, budget=2)
    job = make_job("a", power=3)
    assert dispatch_tardis([job], [SiteState(site)], 0.0, oracle([job])) == []


def test_tardis_two_jobs_one_slot_matches_enumeration():
    site = make_site(nodes=8, budget=6, off=0.2)
    hi = make_job("hi", nodes=2, power=5, runtime=2 * HOUR)
    lo = make_job("lo", nodes=2, power=2, runtime=2 * HOUR, submit=1.0)
    w = ScoreWeights()
    now = 10.0
    state = SiteState(site)
    scores = {j.id: score(j, site, now, j.true_power, state, w) for j in (hi, lo)}
    out = dispatch_tardis([hi, lo], [state], now, oracle([hi, lo]), w)
    # the first commit is the higher-scoring job; the other no longer fits
    assert [a.job_id for a in out] == [max(scores, key=scores.get)]


def test_tardis_missing_prediction_errors():
    job = make_job("a")
    with pytest.raises(ValueError):
        dispatch_tardis([job], [SiteState(make_site())], 0.0, {})


def test_tardis_prefers_cheaper_site():
    a = make_site("A", nodes=4, off=0.30)
    b = make_site("B", nodes=4, off=0.10)
    job = make_job("j", power=5)
    out = dispatch_tardis([job], [SiteState(a), SiteState(b)], 0.0, oracle([job]),
                          ScoreWeights(0.4, 0.2, 0.0, 0.2, 0.0))
    assert out[0].site == "B"


def test_tardis_defers_into_off_peak():
    # peak now (hour 0), off-peak from hour 1 at one third of the rate
    site = make_site(nodes=4, off=0.12, peak=0.36, window=(0, 1))
    job = make_job("j", power=5, runtime=HOUR)
    assert dispatch_tardis([job], [SiteState(site)], 0.0, oracle([job])) == []
    assert dispatch_tardis([job], [SiteState(site)], 0.0, oracle([job]), defer=False)
    assert dispatch_tardis([job], [SiteState(site)], HOUR, oracle([job]))


def test_tardis_deferral_bounded_by_t_max():
    site = make_site(nodes=4, off=0.12, peak=0.36, window=(0, 12))
    job = make_job("j", power=5)
    w = ScoreWeights(t_max=6 * HOUR)
    # next off-peak start is 12 h away, beyond the wait allowance
    assert dispatch_tardis([job], [SiteState(site)], 0.0, oracle([job]), w)


_queue = st.lists(
    st.tuples(st.integers(1, 6), st.floats(0.1, 8), st.floats(600, 6 * HOUR), st.integers(0, 10)),
    min_size=1, max_size=8)


def _instance(specs, n_sites, budget, used):
    jobs = [make_job(f"q{i}", submit=i * 60.0, nodes=n, power=p, runtime=r, priority=pr)
            for i, (n, p, r, pr) in enumerate(specs)]
    sites = [make_site(f"S{k}", nodes=8, budget=budget, offset=-60 * 3 * k, off=0.1, peak=0.3,
                       window=(6, 22)) for k in range(n_sites)]
    states = []
    for k, s in enumerate(sites):
        running = [make_job(f"r{k}", nodes=used, power=min(1.0, budget / 2))] if used else []
        states.append(busy_state(s, *running))
    return jobs, states


@settings(max_examples=80, deadline=None)
@given(_queue, st.integers(1, 3), st.floats(2, 30), st.integers(0, 4),
       st.floats(0, 48 * HOUR), st.sampled_from([0.5, 2.0, 10.0]))
def test_tardis_argmax_invariant_to_weight_scale(specs, n_sites, budget, used, now, factor):
    jobs, states = _instance(specs, n_sites, budget, used)
    now = now + len(jobs) * 60.0
    w = ScoreWeights(p_max=10)
    a = dispatch_tardis(jobs, states, now, oracle(jobs), w)
    b = dispatch_tardis(jobs, states, now, oracle(jobs), w.scaled(factor))
    assert a == b


@settings(max_examples=120, deadline=None)
@given(_queue, st.integers(1, 3), st.floats(2, 30), st.integers(0, 4), st.floats(0, 48 * HOUR),
       st.sampled_from(sorted(DISPATCHERS)))
def test_every_dispatcher_output_is_feasible(specs, n_sites, budget, used, now, policy):
    jobs, states = _instance(specs, n_sites, budget, used)
    now = now + len(jobs) * 60.0
    out = DISPATCHERS[policy](jobs, states, now, oracle(jobs))
    ids = [a.job_id for a in out]
    assert len(ids) == len(set(ids))
    by_id = {j.id: j for j in jobs}
    for st_ in states:
        mine = [by_id[a.job_id] for a in out if a.site == st_.site.name]
        assert sum(j.nodes_requested for j in mine) <= st_.free_nodes
        assert st_.current_power_kw + sum(j.true_power for j in mine) <= st_.site.power_budget_kw + 1e-9
    assert all(a.start_time == now for a in out)


# -- baselines -----------------------------------------------------------------

def test_fcfs_examples():
    site = make_site(nodes=4)
    assert dispatch_fcfs([], [SiteState(site)], 0.0, {}) == []
    big = make_job("big", submit=0, nodes=8)
    small = make_job("small", submit=1, nodes=1)
    assert dispatch_fcfs([small, big], [SiteState(site)], 0.0, oracle([big, small])) == []
    a, b = make_job("a", submit=0, nodes=1), make_job("b", submit=1, nodes=2)
    assert [x.job_id for x in dispatch_fcfs([b, a], [SiteState(site)], 0.0, oracle([a, b]))] == ["a", "b"]


def test_fcfs_first_feasible_site_in_order():
    s1, s2 = make_site("one", nodes=1), make_site("two", nodes=8)
    job = make_job("j", nodes=4)
    assert dispatch_fcfs([job], [SiteState(s1), SiteState(s2)], 0.0, oracle([job]))[0].site == "two"


def test_sjf_examples():
    site = make_site(nodes=1)
    long_, short = make_job("long", submit=0, runtime=3600), make_job("short", submit=5, runtime=60)
    assert dispatch_sjf([long_, short], [SiteState(site)], 0.0, oracle([long_, short]))[0].job_id == "short"
    a, b = make_job("a", submit=0, runtime=60), make_job("b", submit=5, runtime=60)
    assert dispatch_sjf([b, a], [SiteState(site)], 0.0, oracle([a, b]))[0].job_id == "a"
    head = make_job("head", runtime=10, nodes=4)
    other = make_job("other", runtime=20, nodes=1)
    assert dispatch_sjf([head, other], [SiteState(site)], 0.0, oracle([head, other])) == []


def test_backfill_canonical_and_protection():
    site = make_site(nodes=4)
    running = make_job("run", nodes=2, runtime=2 * HOUR)
    state = busy_state(site, running)
    head = make_job("head", submit=0, nodes=4, runtime=HOUR)
    short = make_job("short", submit=1, nodes=2, runtime=HOUR)
    long_ = make_job("long", submit=2, nodes=2, runtime=3 * HOUR)
    p = oracle([head, short, long_])
    assert [a.job_id for a in dispatch_backfill([head, short], [state], 0.0, p)] == ["short"]
    assert dispatch_backfill([head, long_], [state], 0.0, p) == []


def test_backfill_without_running_jobs_equals_fcfs():
    site = make_site(nodes=4, budget=10)
    jobs = [make_job(f"j{i}", submit=i, nodes=1, power=2) for i in range(4)]
    assert dispatch_backfill(jobs, [SiteState(site)], 0.0, oracle(jobs)) == \
        dispatch_fcfs(jobs, [SiteState(site)], 0.0, oracle(jobs))


def test_backfill_respects_power_reservation():
    site = make_site(nodes=10, budget=10)
    state = busy_state(site, make_job("run", nodes=1, power=6, runtime=HOUR))
    head = make_job("head", submit=0, nodes=1, power=8, runtime=HOUR)
    hog = make_job("hog", submit=1, nodes=1, power=3, runtime=5 * HOUR)
    assert dispatch_backfill([head, hog], [state], 0.0, oracle([head, hog])) == []


@settings(max_examples=80, deadline=None)
@given(_queue, st.floats(4, 30), st.integers(1, 6))
def test_backfill_never_delays_head_reservation(specs, budget, used):
    jobs, states = _instance(specs, 1, budget, used)
    now = len(jobs) * 60.0
    p = oracle(jobs)
    fcfs = dispatch_fcfs(jobs, states, now, p)
    started = {a.job_id for a in fcfs}
    waiting = [j for j in jobs if j.id not in started]
    if not waiting:
        return
    head = waiting[0]

    def with_started(ids):
        extra = tuple(RunningJob(j, now, j.true_power) for j in jobs if j.id in ids)
        return [SiteState(states[0].site, states[0].running + extra)]

    before = reserve(head, head.true_power, with_started(started), now)
    out = dispatch_backfill(jobs, states, now, p)
    after = reserve(head, head.true_power, with_started({a.job_id for a in out}), now)
    if before is not None:
        assert after is not None and after.start <= before.start + 1e-9


def test_random_single_site_is_fcfs_with_skipping():
    site = make_site(nodes=2)
    big, small = make_job("big", submit=0, nodes=4), make_job("small", submit=1, nodes=1)
    out = dispatch_random([big, small], [SiteState(site)], 0.0, oracle([big, small]), seed=1, step=0)
    assert [a.job_id for a in out] == ["small"]


def test_random_deterministic_per_seed_and_step():
    sites = [SiteState(make_site(n, nodes=100)) for n in "ABC"]
    jobs = [make_job(f"j{i}", submit=i) for i in range(30)]
    a = dispatch_random(jobs, sites, 0.0, oracle(jobs), seed=9, step=4)
    assert a == dispatch_random(jobs, sites, 0.0, oracle(jobs), seed=9, step=4)
    assert a != dispatch_random(jobs, sites, 0.0, oracle(jobs), seed=9, step=5)


def test_random_site_choice_is_uniform_chi2():
    sites = [SiteState(make_site(n, nodes=10_000)) for n in "ABC"]
    jobs = [make_job(f"j{i}", submit=i) for i in range(20)]
    counts = {"A": 0, "B": 0, "C": 0}
    for step in range(300):
        for a in dispatch_random(jobs, sites, 0.0, oracle(jobs), seed=5, step=step):
            counts[a.site] += 1
    obs = np.array(list(counts.values()))
    assert obs.sum() == 6000
    assert stats.chisquare(obs).pvalue > 0.01


# -- exact solver ---------------------------------------------------------------

def enumerate_optimum(jobs, sites, slot, horizon):
    """Plain product enumeration over (site, start slot) per job; every job must run."""
    choices = []
    for j in jobs:
        dur = math.ceil(j.actual_runtime / slot)
        first = math.ceil(j.submit_time / slot)
        choices.append([(k, s) for k in range(len(sites)) for s in range(first, horizon - dur + 1)])
    best = math.inf
    for combo in itertools.product(*choices):
        nodes = np.zeros((len(sites), horizon))
        power = np.zeros((len(sites), horizon))
        cost = 0.0
        for j, (k, s) in zip(jobs, combo):
            dur = math.ceil(j.actual_runtime / slot)
            for t in range(s, s + dur):
                nodes[k, t] += j.nodes_requested
                power[k, t] += j.true_power
                cost += rate_at(sites[k], t * slot) * j.true_power * slot / 3600
        ok = all((nodes[k] <= sites[k].node_count).all() and
                 (power[k] <= sites[k].power_budget_kw + 1e-9).all() for k in range(len(sites)))
        if ok:
            best = min(best, cost)
    return best


def test_bruteforce_flat_single_job():
    site = make_site(nodes=4, off=0.2)
    job = make_job("j", power=3, runtime=2 * HOUR)
    res = optimal_dispatch_bruteforce([job], [site], HOUR, 4)
    assert res.cost == pytest.approx(3 * 2 * 0.2)


def test_bruteforce_picks_cheap_slot():
    site = make_site(nodes=4, off=0.12, peak=0.36, window=(0, 1))
    job = make_job("j", power=5, runtime=HOUR)
    res = optimal_dispatch_bruteforce([job], [site], HOUR, 2)
    assert res.cost == pytest.approx(5 * 0.12)
    assert res.assignments[0].start_time == HOUR


def test_bruteforce_three_jobs_staggered_matches_enumeration():
    a = make_site("A", nodes=4, budget=5, off=0.1, peak=0.3, window=(0, 2))
    b = make_site("B", nodes=4, budget=5, off=0.1, peak=0.3, window=(2, 4))
    jobs = [make_job(f"j{i}", power=4, runtime=HOUR) for i in range(3)]
    res = optimal_dispatch_bruteforce(jobs, [a, b], HOUR, 4)
    assert res.cost == pytest.approx(enumerate_optimum(jobs, [a, b], HOUR, 4))
    assert res.cost == pytest.approx(3 * 4 * 0.1)


@pytest.mark.parametrize("seed", range(15))
def test_bruteforce_matches_plain_enumeration(seed):
    rng = np.random.default_rng(seed)
    n_sites = int(rng.integers(1, 3))
    sites = [make_site(f"S{k}", nodes=int(rng.integers(2, 5)), budget=float(rng.uniform(3, 8)),
                       off=0.1 * (k + 1), peak=0.3 * (k + 1), window=(int(rng.integers(0, 3)), 4))
             for k in range(n_sites)]
    jobs = [make_job(f"j{i}", submit=float(rng.integers(0, 2)) * HOUR, nodes=int(rng.integers(1, 3)),
                     power=float(rng.uniform(0.5, 3)), runtime=float(rng.integers(1, 3)) * HOUR)
            for i in range(int(rng.integers(1, 4)))]
    res = optimal_dispatch_bruteforce(jobs, sites, HOUR, 5)
    ref = enumerate_optimum(jobs, sites, HOUR, 5)
    if math.isinf(ref):
        assert res is None
    else:
        assert res.cost == pytest.approx(ref)


def test_bruteforce_caps():
    with pytest.raises(ValueError):
        optimal_dispatch_bruteforce([make_job(f"j{i}") for i in range(9)], [make_site()], HOUR, 4)
    with pytest.raises(ValueError):
        optimal_dispatch_bruteforce([make_job()], [make_site()], HOUR, 9)
