"""Job traces in CSV and synthetic workload generation."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np

TRACE_COLUMNS = (
    "id",
    "submit_time",
    "nodes_requested",
    "cores_per_task",
    "cores_per_node",
    "shared_flag",
    "priority",
    "memory_mib",
    "runtime_estimate_s",
    "job_type",
    "power_kw",
    "actual_runtime_s",
)

# csv column -> Job attribute
_COLUMN_FIELD = {
    "id": "id",
    "submit_time": "submit_time",
    "nodes_requested": "nodes_requested",
    "cores_per_task": "cores_per_task",
    "cores_per_node": "cores_per_node",
    "shared_flag": "shared_flag",
    "priority": "priority",
    "memory_mib": "memory_requested",
    "runtime_estimate_s": "runtime_estimate",
    "job_type": "job_type",
    "power_kw": "true_power",
    "actual_runtime_s": "actual_runtime",
}
_INT_COLUMNS = {"nodes_requested", "cores_per_task", "cores_per_node", "shared_flag", "priority"}


class TraceError(ValueError):
    """Raised for malformed or inconsistent trace data."""


@dataclass(frozen=True)
class Job:
    id: str
    submit_time: float
    nodes_requested: int
    cores_per_task: int
    cores_per_node: int
    shared_flag: int
    priority: int
    memory_requested: float
    runtime_estimate: float
    job_type: str
    true_power: float
    actual_runtime: float

    def __post_init__(self) -> None:
        if self.nodes_requested < 1:
            raise TraceError(f"job {self.id}: nodes_requested must be >= 1")
        if self.cores_per_node < 1:
            raise TraceError(f"job {self.id}: cores_per_node must be >= 1")
        if self.cores_per_task < 0 or self.priority < 0 or self.memory_requested < 0:
            raise TraceError(f"job {self.id}: negative resource field")
        if self.shared_flag not in (0, 1):
            raise TraceError(f"job {self.id}: shared_flag must be 0 or 1")
        if not self.runtime_estimate > 0 or not self.actual_runtime > 0:
            raise TraceError(f"job {self.id}: runtimes must be positive")
        if self.submit_time < 0:
            raise TraceError(f"job {self.id}: submit_time must be >= 0")
        if not self.true_power >= 0:
            raise TraceError(f"job {self.id}: true_power must be >= 0")


@dataclass(frozen=True)
class JobTable:
    """Immutable job collection ordered by (submit_time, id)."""

    jobs: tuple[Job, ...] = ()
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.jobs, key=lambda j: (j.submit_time, j.id)))
        object.__setattr__(self, "jobs", ordered)
        for i, job in enumerate(ordered):
            if job.id in self._index:
                raise TraceError(f"duplicate id {job.id!r}")
            self._index[job.id] = i

    def __len__(self) -> int:
        return len(self.jobs)

    def __iter__(self) -> Iterator[Job]:
        return iter(self.jobs)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return JobTable(self.jobs[i])
        return self.jobs[i]

    def by_id(self, job_id: str) -> Job:
        return self.jobs[self._index[job_id]]

    @property
    def ids(self) -> list[str]:
        return [j.id for j in self.jobs]

    def powers(self) -> np.ndarray:
        return np.array([j.true_power for j in self.jobs], dtype=float)


def _parse_number(raw: str, column: str, row: int, integer: bool):
    try:
        value = float(raw)
    except ValueError:
        raise TraceError(f"row {row}, column {column!r}: not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise TraceError(f"row {row}, column {column!r}: non-finite value")
    if value < 0:
        raise TraceError(f"row {row}, column {column!r}: negative value {raw!r}")
    if integer:
        if value != int(value):
            raise TraceError(f"row {row}, column {column!r}: expected integer, got {raw!r}")
        return int(value)
    return value


def parse_trace(source: TextIO | str) -> JobTable:
    """Parse a trace CSV stream into a JobTable.

    A ``power_w`` column may replace ``power_kw``; it is converted to kilowatts.
    Row numbers in error messages count the header as row 1.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise TraceError("missing header row") from None

    power_scale = 1.0
    if "power_kw" not in header and "power_w" in header:
        header = ["power_kw" if h == "power_w" else h for h in header]
        power_scale = 1e-3
    missing = [c for c in TRACE_COLUMNS if c not in header]
    if missing:
        raise TraceError(f"missing columns: {', '.join(missing)}")
    pos = {c: header.index(c) for c in TRACE_COLUMNS}

    jobs: list[Job] = []
    seen: set[str] = set()
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            raise TraceError(f"row {rownum}: expected {len(header)} columns, got {len(row)}")
        values = {}
        for col in TRACE_COLUMNS:
            raw = row[pos[col]].strip()
            if col in ("id", "job_type"):
                if col == "id" and not raw:
                    raise TraceError(f"row {rownum}, column 'id': empty")
                values[_COLUMN_FIELD[col]] = raw
            else:
                values[_COLUMN_FIELD[col]] = _parse_number(raw, col, rownum, col in _INT_COLUMNS)
        values["true_power"] *= power_scale
        if values["id"] in seen:
            raise TraceError(f"row {rownum}: duplicate id {values['id']!r}")
        seen.add(values["id"])
        try:
            jobs.append(Job(**values))
        except TraceError as exc:
            raise TraceError(f"row {rownum}: {exc}") from None
    return JobTable(tuple(jobs))


def load_trace(path) -> JobTable:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_trace(fh)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_trace(jobs: JobTable | Iterable[Job]) -> str:
    """Render jobs as trace CSV; floats use repr so parsing round-trips exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for job in jobs:
        writer.writerow([_fmt(getattr(job, _COLUMN_FIELD[c])) for c in TRACE_COLUMNS])
    return buf.getvalue()


def save_trace(jobs: JobTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(serialize_trace(jobs))


# ---------------------------------------------------------------------------
# Synthetic workloads
# ---------------------------------------------------------------------------

# submissions per local hour, relative; office-hours heavy
DIURNAL_PROFILE = (
    0.35, 0.3, 0.25, 0.25, 0.3, 0.4, 0.6, 0.9, 1.3, 1.6, 1.7, 1.7,
    1.5, 1.6, 1.7, 1.6, 1.4, 1.2, 1.0, 0.8, 0.7, 0.6, 0.5, 0.4,
)

SCENARIO_LOAD = {"high": 1.0, "average": 0.75, "low": 0.5}


@dataclass(frozen=True)
class JobTypeSpec:
    """One synthetic job class; power per node is ``kw_per_node`` times noise."""

    name: str
    weight: float
    kw_per_node: float
    runtime_median_s: float
    runtime_sigma: float = 0.8


DEFAULT_JOB_TYPES = (
    JobTypeSpec("cpu", 0.45, 0.35, 2 * 3600),
    JobTypeSpec("memory", 0.20, 0.45, 3 * 3600),
    JobTypeSpec("gpu", 0.25, 1.2, 4 * 3600),
    JobTypeSpec("io", 0.10, 0.2, 1 * 3600),
)


@dataclass(frozen=True)
class WorkloadSpec:
    """Parameters of a synthetic workload.

    Arrivals are a diurnally modulated process over ``duration_days``; the
    per-hour intensity follows ``diurnal_profile`` in the local time of
    ``utc_offset_minutes``. Power is ``kw_per_node(type) * nodes * LogNormal(0, power_sigma)``.
    """

    job_count: int
    duration_days: float = 30.0
    scenario: str = "high"
    diurnal_profile: tuple[float, ...] = DIURNAL_PROFILE
    utc_offset_minutes: int = -300
    node_choices: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    node_weights: tuple[float, ...] = (0.30, 0.22, 0.18, 0.12, 0.09, 0.06, 0.03)
    cores_per_node_choices: tuple[int, ...] = (32, 48, 64)
    job_types: tuple[JobTypeSpec, ...] = DEFAULT_JOB_TYPES
    power_sigma: float = 0.25
    max_priority: int = 10
    shared_probability: float = 0.1
    memory_mib_per_node: float = 64_000.0
    runtime_min_s: float = 300.0
    runtime_max_s: float = 24 * 3600.0
    array_mean: float = 1.0
    weekend_factor: float = 1.0

    def __post_init__(self) -> None:
        if self.job_count < 0:
            raise ValueError("job_count must be >= 0")
        if self.duration_days <= 0:
            raise ValueError("duration_days must be > 0")
        if self.scenario not in SCENARIO_LOAD:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if len(self.diurnal_profile) != 24 or min(self.diurnal_profile) < 0:
            raise ValueError("diurnal_profile needs 24 nonnegative entries")
        if len(self.node_choices) != len(self.node_weights) or min(self.node_choices) < 1:
            raise ValueError("node_choices/node_weights mismatch")
        if not self.job_types:
            raise ValueError("at least one job type required")
        if self.power_sigma < 0:
            raise ValueError("power_sigma must be >= 0")
        if self.array_mean < 1:
            raise ValueError("array_mean must be >= 1")
        if self.weekend_factor < 0:
            raise ValueError("weekend_factor must be >= 0")

    @classmethod
    def for_scenario(cls, scenario: str, duration_days: float = 30.0,
                     jobs_per_day: float = 200.0, **kwargs) -> "WorkloadSpec":
        """Workload whose job count scales with the scenario's load level."""
        count = int(round(jobs_per_day * duration_days * SCENARIO_LOAD[scenario]))
        return cls(job_count=count, duration_days=duration_days, scenario=scenario, **kwargs)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "job_types":
                v = [dict(vars(t)) for t in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "WorkloadSpec":
        data = dict(data)
        if "job_types" in data:
            data["job_types"] = tuple(JobTypeSpec(**t) for t in data["job_types"])
        for key in ("diurnal_profile", "node_choices", "node_weights", "cores_per_node_choices"):
            if key in data:
                data[key] = tuple(data[key])
        if "job_count" not in data:
            scenario = data.pop("scenario", "high")
            return cls.for_scenario(scenario, **data)
        return cls(**data)


def _arrival_times(spec: WorkloadSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    n_hours = int(math.ceil(spec.duration_days * 24))
    utc_hours = np.arange(n_hours)
    local = utc_hours + spec.utc_offset_minutes / 60.0
    weights = np.asarray(spec.diurnal_profile, dtype=float)[(local % 24).astype(int)]
    # day 0 is a Monday in local time
    weekday = np.floor(local / 24).astype(int) % 7
    weights = np.where(weekday >= 5, weights * spec.weekend_factor, weights)
    tail = spec.duration_days * 24 - (n_hours - 1)
    weights[-1] *= tail
    weights = weights / weights.sum()
    hour_idx = rng.choice(n_hours, size=count, p=weights)
    offset = rng.random(count)
    offset[hour_idx == n_hours - 1] *= tail
    return np.floor((hour_idx + offset) * 3600.0)


def _array_sizes(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    """Sizes of job-array submissions summing to exactly ``job_count``."""
    if spec.array_mean == 1.0:
        return np.ones(spec.job_count, dtype=int)
    sizes = []
    total = 0
    while total < spec.job_count:
        size = int(rng.geometric(1.0 / spec.array_mean))
        size = min(size, spec.job_count - total)
        sizes.append(size)
        total += size
    return np.asarray(sizes, dtype=int)


def sample_power(spec: WorkloadSpec, type_idx: np.ndarray, nodes: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    kw = np.array([t.kw_per_node for t in spec.job_types])[type_idx]
    noise = rng.lognormal(0.0, spec.power_sigma, size=len(nodes))
    return kw * nodes * noise


def generate_synthetic_workload(spec: WorkloadSpec, seed: int) -> JobTable:
    """Draw a reproducible synthetic JobTable; identical for identical (spec, seed).

    Jobs come in array submissions (geometric size, mean ``array_mean``) that
    share submit time, type, node count and runtime class; power noise is drawn
    per job.
    """
    n = spec.job_count
    if n == 0:
        return JobTable(())
    rng = np.random.default_rng(seed)
    sizes = _array_sizes(spec, rng)
    n_events = len(sizes)
    event = np.repeat(np.arange(n_events), sizes)

    submit = _arrival_times(spec, n_events, rng)[event]
    node_p = np.asarray(spec.node_weights, float)
    nodes = np.asarray(spec.node_choices)[
        rng.choice(len(node_p), size=n_events, p=node_p / node_p.sum())][event]
    type_p = np.array([t.weight for t in spec.job_types], float)
    type_idx = rng.choice(len(type_p), size=n_events, p=type_p / type_p.sum())[event]
    power = sample_power(spec, type_idx, nodes, rng)

    medians = np.array([t.runtime_median_s for t in spec.job_types])[type_idx]
    sigmas = np.array([t.runtime_sigma for t in spec.job_types])[type_idx]
    runtime = medians * np.exp(sigmas * rng.standard_normal(n_events)[event])
    runtime = np.round(np.clip(runtime, spec.runtime_min_s, spec.runtime_max_s))

    cores_per_node = np.asarray(spec.cores_per_node_choices)[
        rng.integers(0, len(spec.cores_per_node_choices), size=n_events)][event]
    tasks_per_node = rng.choice([1, 2, 4, 8], size=n_events)[event]
    cores_per_task = np.maximum(cores_per_node // tasks_per_node, 1)
    shared = (rng.random(n_events) < spec.shared_probability).astype(int)[event]
    priority = rng.integers(0, spec.max_priority + 1, size=n_events)[event]
    memory = np.round(nodes * spec.memory_mib_per_node * rng.uniform(0.25, 1.0, size=n))

    width = len(str(n - 1))
    jobs = []
    for i in range(n):
        jobs.append(Job(
            id=f"j{i:0{width}d}",
            submit_time=float(submit[i]),
            nodes_requested=int(nodes[i]),
            cores_per_task=int(cores_per_task[i]),
            cores_per_node=int(cores_per_node[i]),
            shared_flag=int(shared[i]),
            priority=int(priority[i]),
            memory_requested=float(memory[i]),
            runtime_estimate=float(runtime[i]),
            job_type=spec.job_types[type_idx[i]].name,
            true_power=float(power[i]),
            actual_runtime=float(runtime[i]),
        ))
    return JobTable(tuple(jobs))


# ---------------------------------------------------------------------------
# Power tertiles
# ---------------------------------------------------------------------------

class PowerCategory(enum.Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"


def tertile_bounds(powers: Sequence[float]) -> tuple[float, float]:
    powers = np.asarray(powers, dtype=float)
    if powers.size == 0:
        raise ValueError("cannot compute tertiles of an empty table")
    lo, hi = np.percentile(powers, [100.0 / 3.0, 200.0 / 3.0])
    return float(lo), float(hi)


def classify(power: float, bounds: tuple[float, float]) -> PowerCategory:
    lo, hi = bounds
    if power <= lo:
        return PowerCategory.LOW
    if power <= hi:
        return PowerCategory.MEDIUM
    return PowerCategory.HIGH


def categorize_power(jobs: JobTable, reference: JobTable | None = None) -> dict[str, PowerCategory]:
    """Map job id to its power tertile; ties at a boundary go to the lower class.

    Boundaries come from ``reference`` (defaults to ``jobs`` itself).
    """
    if len(jobs) == 0:
        raise ValueError("cannot categorize an empty job table")
    ref = jobs if reference is None else reference
    bounds = tertile_bounds(ref.powers())
    return {j.id: classify(j.true_power, bounds) for j in jobs}
