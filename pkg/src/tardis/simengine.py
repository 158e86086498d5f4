"""Discrete-time multi-site simulation with time-of-use cost accounting."""

from __future__ import annotations

import csv
import heapq
import io
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .powermodel.training import MeanPredictor, OraclePredictor, Predictor
from .pricing import Site, is_peak, rate_at, site_to_dict
from .scheduler import (
    POLICIES,
    POWER_TOL,
    Assignment,
    RunningJob,
    ScoreWeights,
    SiteState,
    dispatch_backfill,
    dispatch_fcfs,
    dispatch_random,
    dispatch_sjf,
    dispatch_tardis,
    effective_budget,
)
from .trace import JobTable, PowerCategory, categorize_power

DAY = 86400.0
BUDGET_FRACTIONS = (0.25, 0.50, 0.75, 1.00)
# jobs state-only dispatchers need no re-evaluation while nothing changes
_EVENT_DRIVEN = {"fcfs", "sjf", "backfill"}


@dataclass(frozen=True)
class SimConfig:
    """One simulation run.

    ``horizon_steps=None`` runs until every job has finished, capped at
    ``max_drain_days`` past the last submission. ``budget_fraction`` is
    informational here; :func:`with_budget_fraction` turns it into per-site
    kW budgets.
    """

    sites: tuple[Site, ...]
    policy: str = "tardis"
    weights: ScoreWeights = ScoreWeights()
    predictor: str = "oracle"
    dt: float = 60.0
    horizon_steps: int | None = None
    budget_fraction: float | None = None
    seed: int = 0
    peak_hours_only: bool = False
    defer: bool = True
    max_drain_days: float = 60.0
    name: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "sites", tuple(self.sites))
        if not self.sites:
            raise ValueError("at least one site required")
        if len({s.name for s in self.sites}) != len(self.sites):
            raise ValueError("site names must be unique")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon_steps is not None and self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if self.budget_fraction is not None and not 0 < self.budget_fraction <= 1:
            raise ValueError("budget_fraction must lie in (0, 1]")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.budget_fraction is None:
            return self.policy
        return f"{self.policy}_b{int(round(self.budget_fraction * 100)):03d}"


@dataclass(frozen=True)
class StartRecord:
    job_id: str
    site: str
    start_time: float
    wait: float
    peak: bool
    local_hour: int


@dataclass
class SimulationResult:
    label: str
    policy: str
    sites: list[str]
    dt: float
    steps: int
    total_cost: float
    site_cost: dict[str, float]
    peak_cost: float
    daily_cost: list[float]
    energy_kwh: float
    jobs_submitted: int
    jobs_started: int
    jobs_completed: int
    jobs_incomplete: int
    rejected: list[str]
    mean_wait: float
    p95_wait: float
    cost_per_job: float | None
    hourly_starts: dict[str, list[int]]
    avg_utilization: dict[str, float]
    max_utilization: dict[str, float]
    budget_violations: int
    starts: list[StartRecord]
    category_shares: dict[str, dict[str, float]] = field(default_factory=dict)
    step_table: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def peak_cost_share(self) -> float:
        return self.peak_cost / self.total_cost if self.total_cost else 0.0

    @property
    def peak_start_share(self) -> float:
        return sum(s.peak for s in self.starts) / len(self.starts) if self.starts else 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "policy": self.policy,
            "sites": self.sites,
            "dt_s": self.dt,
            "steps": self.steps,
            "total_cost": self.total_cost,
            "site_cost": self.site_cost,
            "peak_cost": self.peak_cost,
            "peak_cost_share": self.peak_cost_share,
            "peak_start_share": self.peak_start_share,
            "daily_cost": self.daily_cost,
            "energy_kwh": self.energy_kwh,
            "jobs_submitted": self.jobs_submitted,
            "jobs_started": self.jobs_started,
            "jobs_completed": self.jobs_completed,
            "jobs_incomplete": self.jobs_incomplete,
            "rejected": self.rejected,
            "mean_wait_s": self.mean_wait,
            "p95_wait_s": self.p95_wait,
            "cost_per_job": self.cost_per_job,
            "hourly_starts": self.hourly_starts,
            "avg_utilization": self.avg_utilization,
            "max_utilization": self.max_utilization,
            "budget_violations": self.budget_violations,
            "category_shares": self.category_shares,
        }

    def steps_csv(self) -> str:
        cols = ("step", "site", "running", "nodes_used", "power_kw", "rate", "cost",
                "queue_len", "violation")
        t = self.step_table
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        if not t:
            return buf.getvalue()
        for i in range(len(t["step"])):
            w.writerow([int(t["step"][i]), self.sites[int(t["site"][i])], int(t["running"][i]),
                        int(t["nodes_used"][i]), repr(float(t["power_kw"][i])),
                        repr(float(t["rate"][i])), repr(float(t["cost"][i])),
                        int(t["queue_len"][i]), int(t["violation"][i])])
        return buf.getvalue()

    def daily_csv(self) -> str:
        lines = ["day,cost"]
        lines += [f"{d},{c!r}" for d, c in enumerate(self.daily_cost)]
        return "\n".join(lines) + "\n"


def peak_offpeak_distribution(starts: Sequence[StartRecord],
                              categories: Mapping[str, PowerCategory]) -> dict[str, dict[str, float]]:
    """Share of each power category among starts in peak and off-peak windows.

    A window with no starts reports zero for every category.
    """
    out = {}
    for window, flag in (("peak", True), ("off_peak", False)):
        counts = {c.value: 0 for c in PowerCategory}
        for s in starts:
            if s.peak == flag:
                counts[categories[s.job_id].value] += 1
        total = sum(counts.values())
        out[window] = {c: (n / total if total else 0.0) for c, n in counts.items()}
    return out


def _make_predictor(kind: str, trace: JobTable) -> Predictor:
    if kind == "oracle":
        return OraclePredictor()
    if kind == "mean":
        return MeanPredictor(float(np.mean(trace.powers())) if len(trace) else 0.0)
    raise ValueError(f"predictor {kind!r} must be supplied as an object")


def run(trace: JobTable, cfg: SimConfig, predictor: Predictor | None = None,
        p_hat: Mapping[str, float] | None = None,
        categories: Mapping[str, PowerCategory] | None = None) -> SimulationResult:
    """Simulate ``trace`` under ``cfg``.

    Each step: finish jobs whose actual runtime has elapsed, admit arrivals,
    dispatch, then meter every site's true power at the step's rate. Cost for a
    step is ``power * dt/3600 * rate`` summed over sites; the total is the sum of
    step costs in step order.
    """
    if p_hat is None:
        predictor = predictor or _make_predictor(cfg.predictor, trace)
        p_hat = predictor(trace)
    sites = list(cfg.sites)
    site_idx = {s.name: k for k, s in enumerate(sites)}
    n_sites = len(sites)
    dt = cfg.dt
    weights = cfg.weights
    rng_seed = cfg.seed

    jobs = list(trace)
    rejected: list[str] = []
    admissible = []
    for job in jobs:
        # Schedulable only if one site satisfies both limits.
        fits = any(job.nodes_requested <= s.node_count
                   and (cfg.peak_hours_only or p_hat[job.id] <= s.power_budget_kw + POWER_TOL)
                   for s in sites)
        if fits:
            admissible.append(job)
        else:
            rejected.append(job.id)

    if cfg.horizon_steps is not None:
        max_steps = cfg.horizon_steps
    else:
        last = jobs[-1].submit_time if jobs else 0.0
        max_steps = int(math.ceil((last + cfg.max_drain_days * DAY) / dt))

    running: list[list[RunningJob]] = [[] for _ in sites]
    site_nodes = [0] * n_sites
    site_pred = [0.0] * n_sites
    site_true = [0.0] * n_sites
    ends: list[tuple[float, int, str, int]] = []
    queue: list = []
    arrival = 0
    completed = 0
    starts: list[StartRecord] = []
    dirty = True

    cols = {k: [] for k in ("step", "site", "running", "nodes_used", "power_kw", "rate",
                            "cost", "queue_len", "violation")}
    step_costs: list[float] = []
    site_cost = [0.0] * n_sites
    peak_cost = 0.0
    daily: dict[int, float] = {}
    energy = 0.0
    util_sum = [0.0] * n_sites
    util_max = [0.0] * n_sites
    violations = 0
    hourly = {s.name: [0] * 24 for s in sites}
    seq = 0

    def recompute(k: int) -> None:
        site_nodes[k] = sum(r.job.nodes_requested for r in running[k])
        site_pred[k] = math.fsum(r.p_hat for r in running[k])
        site_true[k] = math.fsum(r.job.true_power for r in running[k])

    def complete(now: float) -> bool:
        nonlocal completed
        changed = set()
        while ends and ends[0][0] <= now:
            _, _, jid, k = heapq.heappop(ends)
            running[k] = [r for r in running[k] if r.job.id != jid]
            changed.add(k)
            completed += 1
        for k in changed:
            recompute(k)
        return bool(changed)

    step = 0
    while step < max_steps:
        now = step * dt
        if complete(now):
            dirty = True
        while arrival < len(admissible) and admissible[arrival].submit_time <= now:
            queue.append(admissible[arrival])
            arrival += 1
            dirty = True
        if cfg.horizon_steps is None and arrival == len(admissible) and not queue and not ends:
            break

        if queue and (dirty or cfg.policy not in _EVENT_DRIVEN or cfg.peak_hours_only):
            states = [SiteState(sites[k], tuple(running[k]), sites[k].node_count - site_nodes[k],
                                site_pred[k]) for k in range(n_sites)]
            if cfg.policy == "tardis":
                chosen = dispatch_tardis(queue, states, now, p_hat, weights,
                                         cfg.peak_hours_only, cfg.defer)
            elif cfg.policy == "fcfs":
                chosen = dispatch_fcfs(queue, states, now, p_hat, cfg.peak_hours_only)
            elif cfg.policy == "sjf":
                chosen = dispatch_sjf(queue, states, now, p_hat, cfg.peak_hours_only)
            elif cfg.policy == "backfill":
                chosen = dispatch_backfill(queue, states, now, p_hat, cfg.peak_hours_only)
            else:
                chosen = dispatch_random(queue, states, now, p_hat, rng_seed, step,
                                         cfg.peak_hours_only)
            dirty = False
            if chosen:
                _apply(chosen, queue, running, sites, site_idx, p_hat, now, starts, hourly, ends, seq)
                seq += len(chosen)
                for k in {site_idx[a.site] for a in chosen}:
                    recompute(k)
                    if site_nodes[k] > sites[k].node_count:
                        raise AssertionError(f"node capacity exceeded at {sites[k].name}")
                    if site_pred[k] > effective_budget(sites[k], now, cfg.peak_hours_only) + 1e-6:
                        raise AssertionError(f"dispatch exceeded power budget at {sites[k].name}")

        step_cost = 0.0
        day = int(now // DAY)
        for k, site in enumerate(sites):
            rate = rate_at(site, now)
            power = site_true[k]
            cost = power * (dt / 3600.0) * rate
            step_cost += cost
            site_cost[k] += cost
            energy += power * dt / 3600.0
            if is_peak(site, now):
                peak_cost += cost
            util = site_nodes[k] / site.node_count
            util_sum[k] += util
            util_max[k] = max(util_max[k], util)
            over = power > effective_budget(site, now, cfg.peak_hours_only) + 1e-6
            violations += over
            cols["step"].append(step)
            cols["site"].append(k)
            cols["running"].append(len(running[k]))
            cols["nodes_used"].append(site_nodes[k])
            cols["power_kw"].append(power)
            cols["rate"].append(rate)
            cols["cost"].append(cost)
            cols["queue_len"].append(len(queue))
            cols["violation"].append(int(over))
        step_costs.append(step_cost)
        daily[day] = daily.get(day, 0.0) + step_cost
        step += 1

    complete(step * dt)
    total = 0.0
    for c in step_costs:
        total += c
    waits = np.array([s.wait for s in starts]) if starts else np.zeros(0)
    n_days = (max(daily) + 1) if daily else 0
    cats = categories
    if cats is None and len(trace):
        cats = categorize_power(trace)
    result = SimulationResult(
        label=cfg.label,
        policy=cfg.policy,
        sites=[s.name for s in sites],
        dt=dt,
        steps=step,
        total_cost=total,
        site_cost={s.name: site_cost[k] for k, s in enumerate(sites)},
        peak_cost=peak_cost,
        daily_cost=[daily.get(d, 0.0) for d in range(n_days)],
        energy_kwh=energy,
        jobs_submitted=len(jobs),
        jobs_started=len(starts),
        jobs_completed=completed,
        jobs_incomplete=len(jobs) - len(rejected) - completed,
        rejected=rejected,
        mean_wait=float(waits.mean()) if waits.size else 0.0,
        p95_wait=float(np.percentile(waits, 95)) if waits.size else 0.0,
        cost_per_job=(total / completed) if completed else None,
        hourly_starts=hourly,
        avg_utilization={s.name: (util_sum[k] / step if step else 0.0) for k, s in enumerate(sites)},
        max_utilization={s.name: util_max[k] for k, s in enumerate(sites)},
        budget_violations=violations,
        starts=starts,
        step_table={k: np.asarray(v) for k, v in cols.items()},
    )
    if cats is not None:
        result.category_shares = peak_offpeak_distribution(starts, cats)
    return result


def _apply(chosen: Sequence[Assignment], queue: list, running, sites, site_idx, p_hat, now,
           starts, hourly, ends, seq) -> None:
    picked = {a.job_id: a for a in chosen}
    if len(picked) != len(chosen):
        raise AssertionError("job assigned twice in one step")
    remaining = []
    for job in queue:
        a = picked.get(job.id)
        if a is None:
            remaining.append(job)
            continue
        k = site_idx[a.site]
        site = sites[k]
        rj = RunningJob(job, now, float(p_hat[job.id]))
        running[k].append(rj)
        heapq.heappush(ends, (rj.end, seq, job.id, k))
        seq += 1
        hour = int(site.local_hour(now)) % 24
        hourly[site.name][hour] += 1
        starts.append(StartRecord(job.id, site.name, now, now - job.submit_time,
                                  bool(is_peak(site, now)), hour))
    if len(queue) - len(remaining) != len(chosen):
        raise AssertionError("dispatcher assigned a job that is not queued")
    queue[:] = remaining


# ---------------------------------------------------------------------------
# Budgets and comparisons
# ---------------------------------------------------------------------------

def peak_power(trace: JobTable, sites: Sequence[Site], dt: float = 60.0) -> float:
    """Peak total metered power under unconstrained-power FCFS with exact power knowledge."""
    free_sites = tuple(s.with_budget(math.inf) for s in sites)
    res = run(trace, SimConfig(free_sites, policy="fcfs", predictor="oracle", dt=dt))
    if not res.step_table or not len(res.step_table["step"]):
        return 0.0
    steps = res.step_table["step"]
    total = np.zeros(int(steps.max()) + 1)
    np.add.at(total, steps, res.step_table["power_kw"])
    return float(total.max())


def compute_budget(trace: JobTable, sites: Sequence[Site], fraction: float,
                   dt: float = 60.0, peak_kw: float | None = None) -> list[float]:
    """Per-site budgets: ``fraction`` of the trace's peak power, split by node share."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if peak_kw is None:
        peak_kw = peak_power(trace, sites, dt)
    total_nodes = sum(s.node_count for s in sites)
    return [fraction * peak_kw * s.node_count / total_nodes for s in sites]


def with_budget_fraction(cfg: SimConfig, trace: JobTable, peak_kw: float | None = None) -> SimConfig:
    if cfg.budget_fraction is None:
        return cfg
    budgets = compute_budget(trace, cfg.sites, cfg.budget_fraction, cfg.dt, peak_kw)
    return replace(cfg, sites=tuple(s.with_budget(b) for s, b in zip(cfg.sites, budgets)))


@dataclass
class ComparisonReport:
    results: dict[str, SimulationResult]
    baseline: str | None = None

    def reduction(self, policy: str, baseline: str) -> float:
        """Percent cost reduction of ``policy`` relative to ``baseline``."""
        base = self.results[baseline].total_cost
        if base == 0:
            return 0.0
        return 100.0 * (1.0 - self.results[policy].total_cost / base)

    def wait_delta(self, policy: str, baseline: str) -> float:
        return self.results[policy].mean_wait - self.results[baseline].mean_wait

    def to_dict(self) -> dict:
        labels = list(self.results)
        return {
            "runs": {k: v.to_dict() for k, v in self.results.items()},
            "cost_reduction_pct": {a: {b: self.reduction(a, b) for b in labels} for a in labels},
            "wait_delta_s": {a: {b: self.wait_delta(a, b) for b in labels} for a in labels},
        }


def compare(trace: JobTable, cfgs: Sequence[SimConfig], predictor: Predictor | None = None,
            peak_kw: float | None = None) -> ComparisonReport:
    """Run each configuration on the same trace; budgets derive from one peak measurement.

    ``peak_kw`` overrides the measured peak for every configuration.
    """
    peaks: dict[tuple, float] = {}
    p_cache: dict[str, Mapping[str, float]] = {}
    categories = categorize_power(trace) if len(trace) else None
    results: dict[str, SimulationResult] = {}
    for cfg in cfgs:
        if cfg.budget_fraction is not None:
            key = (tuple(s.node_count for s in cfg.sites), cfg.dt)
            if key not in peaks:
                peaks[key] = peak_kw if peak_kw is not None else peak_power(trace, cfg.sites, cfg.dt)
            cfg = with_budget_fraction(cfg, trace, peaks[key])
        kind = cfg.predictor
        if kind not in p_cache:
            pred = predictor if (predictor is not None and predictor.kind == kind) \
                else _make_predictor(kind, trace)
            p_cache[kind] = pred(trace)
        if cfg.label in results:
            raise ValueError(f"duplicate run label {cfg.label!r}")
        results[cfg.label] = run(trace, cfg, p_hat=p_cache[kind], categories=categories)
    return ComparisonReport(results)


def sites_summary(sites: Sequence[Site]) -> list[dict]:
    return [site_to_dict(s) for s in sites]
