"""Job scoring and dispatch policies.

Every dispatcher takes the waiting queue, the current per-site state, the
current time and a mapping of predicted power per job id, and returns the
assignments that start *now*. Inputs are never mutated; the caller applies
the returned assignments.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .pricing import Site, is_peak, next_rate_changes, rate_at
from .trace import Job

POWER_TOL = 1e-9
HOUR = 3600.0


@dataclass(frozen=True)
class ScoreWeights:
    w_c: float = 0.4
    w_p: float = 0.2
    w_u: float = 0.2
    w_w: float = 0.2
    w_r: float = 0.0
    t_max: float = 24 * HOUR
    p_max: float = 1.0

    def __post_init__(self) -> None:
        if min(self.w_c, self.w_p, self.w_u, self.w_w, self.w_r) < 0:
            raise ValueError("weights must be nonnegative")
        if not self.t_max > 0 or not self.p_max > 0:
            raise ValueError("t_max and p_max must be positive")

    @property
    def total(self) -> float:
        return self.w_c + self.w_p + self.w_u + self.w_w + self.w_r

    def scaled(self, factor: float) -> "ScoreWeights":
        return ScoreWeights(self.w_c * factor, self.w_p * factor, self.w_u * factor,
                            self.w_w * factor, self.w_r * factor, self.t_max, self.p_max)


@dataclass(frozen=True)
class Assignment:
    job_id: str
    site: str
    start_time: float


@dataclass(frozen=True)
class RunningJob:
    job: Job
    start_time: float
    p_hat: float

    @property
    def estimated_end(self) -> float:
        return self.start_time + self.job.runtime_estimate

    @property
    def end(self) -> float:
        return self.start_time + self.job.actual_runtime


@dataclass(frozen=True)
class SiteState:
    """Snapshot of one site; ``current_power_kw`` sums predicted power of running jobs."""

    site: Site
    running: tuple[RunningJob, ...] = ()
    free_nodes: int = field(default=-1)
    current_power_kw: float = field(default=math.nan)

    def __post_init__(self) -> None:
        if self.free_nodes < 0:
            used = sum(r.job.nodes_requested for r in self.running)
            object.__setattr__(self, "free_nodes", self.site.node_count - used)
        if math.isnan(self.current_power_kw):
            object.__setattr__(self, "current_power_kw", math.fsum(r.p_hat for r in self.running))
        if self.free_nodes < 0:
            raise ValueError(f"site {self.site.name}: running jobs exceed node capacity")

    @property
    def nodes_used(self) -> int:
        return self.site.node_count - self.free_nodes


def effective_budget(site: Site, now: float, peak_hours_only: bool = False) -> float:
    if peak_hours_only and not is_peak(site, now):
        return math.inf
    return site.power_budget_kw


# ---------------------------------------------------------------------------
# Scoring factors
# ---------------------------------------------------------------------------

def cost_factor(p_hat, d_hours, rate):
    """1 / (1 + p*d*rate); the product is floored at 0 so the factor stays in (0, 1]."""
    return 1.0 / (1.0 + np.maximum(np.multiply(np.multiply(p_hat, d_hours), rate), 0.0))


def power_efficiency(p_hat, nodes, cores_per_node):
    return 1.0 / (1.0 + np.divide(p_hat, np.multiply(nodes, cores_per_node)))


def utilization_factor(state: SiteState) -> float:
    return 1.0 - state.nodes_used / state.site.node_count


def wait_factor(now, submit, t_max):
    return np.minimum(np.subtract(now, submit) / t_max, 1.0)


def priority_ratio(priority, p_max):
    return np.minimum(np.divide(priority, p_max), 1.0)


def score(job: Job, site: Site, now: float, p_hat: float, state: SiteState,
          weights: ScoreWeights) -> float:
    """Weighted multi-objective score of starting ``job`` at ``site`` now."""
    c = cost_factor(p_hat, job.runtime_estimate / HOUR, rate_at(site, now))
    p = power_efficiency(p_hat, job.nodes_requested, job.cores_per_node)
    u = utilization_factor(state)
    w = wait_factor(now, job.submit_time, weights.t_max)
    r = priority_ratio(job.priority, weights.p_max)
    return float(weights.w_c * c + weights.w_p * p + weights.w_u * u
                 + weights.w_w * w + weights.w_r * r)


def _predictions(queue: Sequence[Job], p_hat: Mapping[str, float]) -> np.ndarray:
    try:
        return np.array([p_hat[j.id] for j in queue], dtype=float)
    except KeyError as exc:
        raise ValueError(f"predictor has no power estimate for job {exc.args[0]!r}") from None


class _Capacity:
    """Mutable working copy of per-site free nodes and committed power."""

    def __init__(self, states: Sequence[SiteState], now: float, peak_hours_only: bool):
        self.sites = [s.site for s in states]
        self.free = np.array([s.free_nodes for s in states], dtype=int)
        self.power = np.array([s.current_power_kw for s in states], dtype=float)
        self.budget = np.array([effective_budget(s.site, now, peak_hours_only) for s in states])
        self.nodes = np.array([s.site.node_count for s in states], dtype=int)

    def fits(self, k: int, nodes: int, p: float) -> bool:
        return self.free[k] >= nodes and self.power[k] + p <= self.budget[k] + POWER_TOL

    def first_fit(self, nodes: int, p: float) -> int | None:
        for k in range(len(self.sites)):
            if self.fits(k, nodes, p):
                return k
        return None

    def take(self, k: int, nodes: int, p: float) -> None:
        self.free[k] -= nodes
        self.power[k] += p


# ---------------------------------------------------------------------------
# Power-aware greedy dispatch
# ---------------------------------------------------------------------------

def _deferral_candidates(queue: Sequence[Job], p: np.ndarray, d: np.ndarray,
                         sites: Sequence[Site], now: float, weights: ScoreWeights):
    """Later start options for each job: (cost factor there, allowed mask, weighted wait).

    Options are the rate changes of every site up to the job's wait allowance
    (submit + t_max); nothing later is ever considered, which bounds deferral.
    """
    out = []
    if weights.w_c == 0 or not len(queue):
        return out
    submit = np.array([j.submit_time for j in queue])
    horizon = float(submit.min()) + weights.t_max
    for site in sites:
        for t in next_rate_changes(site, now, horizon):
            allowed = t <= submit + weights.t_max
            if allowed.any():
                out.append((cost_factor(p, d, rate_at(site, t)), allowed,
                            weights.w_w * (t - now) / weights.t_max))
    return out


def _deferred(candidates, best_now: np.ndarray, w_c: float) -> np.ndarray:
    """Jobs whose relative cost-factor gain from waiting beats the weighted wait."""
    defer = np.zeros(best_now.shape, dtype=bool)
    for cf, allowed, wait_cost in candidates:
        gain = w_c * (1.0 - best_now / cf)
        defer |= allowed & (gain > wait_cost + 1e-12)
    return defer


def dispatch_tardis(queue: Sequence[Job], states: Sequence[SiteState], now: float,
                    p_hat: Mapping[str, float], weights: ScoreWeights = ScoreWeights(),
                    peak_hours_only: bool = False, defer: bool = True) -> list[Assignment]:
    """Greedy score-maximising spatial-temporal dispatch.

    All feasible (job, site) pairs are scored; the best pair is committed,
    the chosen site's capacity and utilisation term are updated, and the loop
    repeats until nothing feasible remains. A job is held back when some
    site's upcoming rate (within its wait allowance) improves its best current
    cost factor by a relative margin, weighted by ``w_c``, larger than the
    weighted wait it would accrue until then. Ties break by queue order, then
    site order.
    """
    if not queue or not states:
        return []
    queue = sorted(queue, key=lambda j: (j.submit_time, j.id))
    p = _predictions(queue, p_hat)
    cap = _Capacity(states, now, peak_hours_only)
    nodes = np.array([j.nodes_requested for j in queue])
    d = np.array([j.runtime_estimate for j in queue]) / HOUR
    cores = np.array([j.cores_per_node for j in queue])
    rates = np.array([rate_at(s, now) for s in cap.sites])

    base = (weights.w_p * power_efficiency(p, nodes, cores)
            + weights.w_w * wait_factor(now, [j.submit_time for j in queue], weights.t_max)
            + weights.w_r * priority_ratio([j.priority for j in queue], weights.p_max))
    util = weights.w_u * (cap.free / cap.nodes)
    cf_now = cost_factor(p[:, None], d[:, None], rates[None, :])
    scores = weights.w_c * cf_now + base[:, None] + util[None, :]
    candidates = _deferral_candidates(queue, p, d, cap.sites, now, weights) if defer else []

    active = np.ones(len(queue), dtype=bool)
    out: list[Assignment] = []
    while True:
        feas = (active[:, None]
                & (nodes[:, None] <= cap.free[None, :])
                & (cap.power[None, :] + p[:, None] <= cap.budget[None, :] + POWER_TOL))
        if not feas.any():
            break
        best_now = np.where(feas, cf_now, 0.0).max(axis=1)
        eligible = feas & ~_deferred(candidates, best_now, weights.w_c)[:, None]
        if not eligible.any():
            break
        masked = np.where(eligible, scores, -np.inf)
        j, k = np.unravel_index(int(np.argmax(masked)), masked.shape)
        out.append(Assignment(queue[j].id, cap.sites[k].name, now))
        active[j] = False
        cap.take(k, int(nodes[j]), float(p[j]))
        scores[:, k] += weights.w_u * (cap.free[k] / cap.nodes[k]) - util[k]
        util[k] = weights.w_u * (cap.free[k] / cap.nodes[k])
    return out


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _head_of_line(order: Sequence[Job], states, now, p_hat, peak_hours_only) -> list[Assignment]:
    cap = _Capacity(states, now, peak_hours_only)
    p = _predictions(order, p_hat)
    out = []
    for job, pj in zip(order, p):
        k = cap.first_fit(job.nodes_requested, pj)
        if k is None:
            break
        cap.take(k, job.nodes_requested, pj)
        out.append(Assignment(job.id, cap.sites[k].name, now))
    return out


def dispatch_fcfs(queue: Sequence[Job], states: Sequence[SiteState], now: float,
                  p_hat: Mapping[str, float], peak_hours_only: bool = False) -> list[Assignment]:
    """Strict first-come-first-served: stop at the first job that does not fit."""
    order = sorted(queue, key=lambda j: (j.submit_time, j.id))
    return _head_of_line(order, states, now, p_hat, peak_hours_only)


def dispatch_sjf(queue: Sequence[Job], states: Sequence[SiteState], now: float,
                 p_hat: Mapping[str, float], peak_hours_only: bool = False) -> list[Assignment]:
    """Shortest estimated runtime first, with head-of-line blocking."""
    order = sorted(queue, key=lambda j: (j.runtime_estimate, j.submit_time, j.id))
    return _head_of_line(order, states, now, p_hat, peak_hours_only)


@dataclass(frozen=True)
class Reservation:
    site_index: int
    start: float
    extra_nodes: int
    extra_power: float


def reserve(job: Job, p_job: float, states: Sequence[SiteState], now: float) -> Reservation | None:
    """Earliest start for ``job`` from running jobs' estimated end times.

    Both nodes and the site power budget must be free at the reserved
    instant. Returns None when no site can ever host the job.
    """
    best = None
    for k, st in enumerate(states):
        site = st.site
        if job.nodes_requested > site.node_count or p_job > site.power_budget_kw + POWER_TOL:
            continue
        free, power = st.free_nodes, st.current_power_kw
        budget = site.power_budget_kw + POWER_TOL
        t = now
        ends = sorted(st.running, key=lambda r: max(r.estimated_end, now))
        for t_end, group in itertools.groupby(ends, key=lambda r: max(r.estimated_end, now)):
            if free >= job.nodes_requested and power + p_job <= budget:
                break
            for r in group:
                free += r.job.nodes_requested
                power -= r.p_hat
            t = t_end
        if free >= job.nodes_requested and power + p_job <= site.power_budget_kw + POWER_TOL:
            res = Reservation(k, t, free - job.nodes_requested,
                              site.power_budget_kw - power - p_job)
            if best is None or res.start < best.start:
                best = res
    return best


def dispatch_backfill(queue: Sequence[Job], states: Sequence[SiteState], now: float,
                      p_hat: Mapping[str, float], peak_hours_only: bool = False) -> list[Assignment]:
    """EASY backfilling with a single reservation for the blocked head job.

    A later job may start early if it fits now and either finishes (by its
    estimate) before the head's reserved start or leaves the nodes and power
    reserved for the head untouched.
    """
    order = sorted(queue, key=lambda j: (j.submit_time, j.id))
    p = _predictions(order, p_hat)
    cap = _Capacity(states, now, peak_hours_only)
    out: list[Assignment] = []
    i = 0
    while i < len(order):
        k = cap.first_fit(order[i].nodes_requested, p[i])
        if k is None:
            break
        cap.take(k, order[i].nodes_requested, p[i])
        out.append(Assignment(order[i].id, cap.sites[k].name, now))
        i += 1
    if i >= len(order):
        return out

    head = order[i]
    started = {a.job_id: a for a in out}
    jobs_by_id = {j.id: (j, pj) for j, pj in zip(order, p)}
    projected = []
    for k, st in enumerate(states):
        extra = tuple(RunningJob(jobs_by_id[a.job_id][0], now, jobs_by_id[a.job_id][1])
                      for a in out if a.site == st.site.name)
        projected.append(SiteState(st.site, st.running + extra))
    res = reserve(head, p[i], projected, now)
    extra_nodes = res.extra_nodes if res else 0
    extra_power = res.extra_power if res else 0.0

    for job, pj in zip(order[i + 1:], p[i + 1:]):
        if job.id in started:
            continue
        for k in range(len(cap.sites)):
            if not cap.fits(k, job.nodes_requested, pj):
                continue
            if res is not None and k == res.site_index:
                ends_in_time = now + job.runtime_estimate <= res.start
                spare = job.nodes_requested <= extra_nodes and pj <= extra_power + POWER_TOL
                if not (ends_in_time or spare):
                    continue
                if not ends_in_time:
                    extra_nodes -= job.nodes_requested
                    extra_power -= pj
            cap.take(k, job.nodes_requested, pj)
            out.append(Assignment(job.id, cap.sites[k].name, now))
            break
    return out


def dispatch_random(queue: Sequence[Job], states: Sequence[SiteState], now: float,
                    p_hat: Mapping[str, float], seed: int = 0, step: int = 0,
                    peak_hours_only: bool = False) -> list[Assignment]:
    """Each queued job draws a site uniformly; it starts only if it fits there."""
    order = sorted(queue, key=lambda j: (j.submit_time, j.id))
    p = _predictions(order, p_hat)
    cap = _Capacity(states, now, peak_hours_only)
    rng = np.random.default_rng([seed, step])
    picks = rng.integers(0, len(cap.sites), size=len(order))
    out = []
    for job, pj, k in zip(order, p, picks):
        if cap.fits(int(k), job.nodes_requested, pj):
            cap.take(int(k), job.nodes_requested, pj)
            out.append(Assignment(job.id, cap.sites[int(k)].name, now))
    return out


POLICIES = ("tardis", "fcfs", "sjf", "backfill", "random")


# ---------------------------------------------------------------------------
# Exact reference solver
# ---------------------------------------------------------------------------

MAX_BRUTEFORCE_JOBS = 8
MAX_BRUTEFORCE_SITES = 2
MAX_BRUTEFORCE_SLOTS = 8


@dataclass(frozen=True)
class ExactSchedule:
    cost: float
    assignments: tuple[Assignment | None, ...]

    @property
    def started(self) -> int:
        return sum(a is not None for a in self.assignments)


def optimal_dispatch_bruteforce(jobs: Sequence[Job], sites: Sequence[Site], slot_seconds: float,
                                horizon_slots: int, start_time: float = 0.0,
                                require_all: bool = True) -> ExactSchedule | None:
    """Minimum-cost non-preemptive schedule by exhaustive search.

    Each job takes one (site, start slot) pair, or no slot at all when
    ``require_all`` is False. Jobs occupy ceil(actual_runtime / slot) slots
    and must finish within the horizon; node and power limits hold in every
    slot. Cost is sum(rate(slot start) * power * slot hours). Returns None if
    no schedule satisfies the constraints. Branch-and-bound prunes with the
    per-job cheapest placement, which keeps the search exact.
    """
    if (len(jobs) > MAX_BRUTEFORCE_JOBS or len(sites) > MAX_BRUTEFORCE_SITES
            or horizon_slots > MAX_BRUTEFORCE_SLOTS):
        raise ValueError(f"instance exceeds brute-force caps ({MAX_BRUTEFORCE_JOBS} jobs, "
                         f"{MAX_BRUTEFORCE_SITES} sites, {MAX_BRUTEFORCE_SLOTS} slots)")
    slot_h = slot_seconds / HOUR
    rates = np.array([[rate_at(s, start_time + t * slot_seconds) for t in range(horizon_slots)]
                      for s in sites])
    options: list[list[tuple[int, int, float]]] = []
    for job in jobs:
        dur = math.ceil(job.actual_runtime / slot_seconds - 1e-9)
        first = max(0, math.ceil((job.submit_time - start_time) / slot_seconds - 1e-9))
        opts = []
        for k, site in enumerate(sites):
            if job.nodes_requested > site.node_count or job.true_power > site.power_budget_kw + POWER_TOL:
                continue
            for s in range(first, horizon_slots - dur + 1):
                c = float(job.true_power * slot_h * rates[k, s:s + dur].sum())
                opts.append((k, s, dur, c))
        if not require_all:
            opts.append((-1, 0, 0, 0.0))
        if not opts:
            return None
        opts.sort(key=lambda o: o[3])
        options.append(opts)

    n = len(jobs)
    floor_rest = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        floor_rest[i] = floor_rest[i + 1] + options[i][0][3]
    free = np.array([[s.node_count] * horizon_slots for s in sites], dtype=int)
    power = np.zeros((len(sites), horizon_slots))
    budget = np.array([s.power_budget_kw for s in sites])
    best_cost = math.inf
    best_pick: list = []
    pick: list = [None] * n

    def search(i: int, cost: float) -> None:
        nonlocal best_cost, best_pick
        if cost + floor_rest[i] >= best_cost - 1e-12:
            return
        if i == n:
            best_cost, best_pick = cost, list(pick)
            return
        job = jobs[i]
        for k, s, dur, c in options[i]:
            if k < 0:
                pick[i] = None
                search(i + 1, cost)
                continue
            span = slice(s, s + dur)
            if (free[k, span] < job.nodes_requested).any():
                continue
            if (power[k, span] + job.true_power > budget[k] + POWER_TOL).any():
                continue
            free[k, span] -= job.nodes_requested
            power[k, span] += job.true_power
            pick[i] = (k, s)
            search(i + 1, cost + c)
            free[k, span] += job.nodes_requested
            power[k, span] -= job.true_power
        pick[i] = None

    search(0, 0.0)
    if math.isinf(best_cost):
        return None
    assignments = tuple(
        None if pk is None else Assignment(job.id, sites[pk[0]].name, start_time + pk[1] * slot_seconds)
        for job, pk in zip(jobs, best_pick))
    return ExactSchedule(best_cost, assignments)
