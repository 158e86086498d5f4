import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from helpers import make_job, table
from tardis.trace import (
    TRACE_COLUMNS,
    JobTable,
    JobTypeSpec,
    PowerCategory,
    TraceError,
    WorkloadSpec,
    categorize_power,
    generate_synthetic_workload,
    parse_trace,
    serialize_trace,
)

HEADER = ",".join(TRACE_COLUMNS)
ROW = "a,10,2,4,32,0,3,2048,3600,cpu,5.5,3500"


def test_header_only_gives_empty_table():
    assert len(parse_trace(HEADER + "\n")) == 0


def test_single_row_preserves_fields():
    jobs = parse_trace(f"{HEADER}\n{ROW}\n")
    assert len(jobs) == 1
    j = jobs[0]
    assert (j.id, j.submit_time, j.nodes_requested, j.cores_per_task, j.cores_per_node) == \
        ("a", 10.0, 2, 4, 32)
    assert (j.shared_flag, j.priority, j.memory_requested, j.runtime_estimate) == (0, 3, 2048.0, 3600.0)
    assert (j.job_type, j.true_power, j.actual_runtime) == ("cpu", 5.5, 3500.0)


def test_duplicate_id_rejected():
    with pytest.raises(TraceError, match="duplicate id"):
        parse_trace(f"{HEADER}\n{ROW}\n{ROW}\n")


def test_malformed_row_names_row_and_column():
    bad = ROW.replace(",2,4,", ",two,4,", 1)
    with pytest.raises(TraceError, match=r"row 3, column 'nodes_requested'"):
        parse_trace(f"{HEADER}\n{ROW.replace('a,', 'b,', 1)}\n{bad}\n")


def test_negative_numeric_field_rejected():
    with pytest.raises(TraceError, match="negative"):
        parse_trace(f"{HEADER}\n{ROW.replace('5.5', '-1')}\n")


def test_power_in_watts_is_converted():
    header = HEADER.replace("power_kw", "power_w")
    jobs = parse_trace(f"{header}\n{ROW.replace('5.5', '5500')}\n")
    assert jobs[0].true_power == pytest.approx(5.5)


def test_missing_column_reported():
    with pytest.raises(TraceError, match="missing columns"):
        parse_trace("id,submit_time\n")


def test_table_sorted_by_submit_then_id():
    jobs = table(make_job("b", 5), make_job("a", 5), make_job("c", 1))
    assert jobs.ids == ["c", "a", "b"]


_job = st.builds(
    make_job,
    job_id=st.text("abcdefgh0123456789", min_size=1, max_size=6),
    submit=st.floats(0, 1e7, allow_nan=False),
    nodes=st.integers(1, 64),
    runtime=st.floats(1, 1e5, allow_nan=False),
    power=st.floats(0, 1e4, allow_nan=False),
    priority=st.integers(0, 100),
    cores_per_node=st.integers(1, 128),
    job_type=st.sampled_from(["cpu", "gpu", "io"]),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(_job, max_size=12, unique_by=lambda j: j.id))
def test_parse_serialize_roundtrip(jobs):
    t = JobTable(tuple(jobs))
    again = parse_trace(io.StringIO(serialize_trace(t)))
    assert again.jobs == t.jobs


def test_generation_deterministic_and_empty():
    spec = WorkloadSpec(job_count=300, duration_days=2)
    assert serialize_trace(generate_synthetic_workload(spec, 4)) == \
        serialize_trace(generate_synthetic_workload(spec, 4))
    assert serialize_trace(generate_synthetic_workload(spec, 4)) != \
        serialize_trace(generate_synthetic_workload(spec, 5))
    assert len(generate_synthetic_workload(WorkloadSpec(job_count=0), 0)) == 0


def test_generated_power_tracks_nodes():
    jobs = generate_synthetic_workload(WorkloadSpec(job_count=3000, duration_days=5), 1)
    nodes = np.array([j.nodes_requested for j in jobs])
    assert np.corrcoef(nodes, jobs.powers())[0, 1] > 0.5
    assert all(j.actual_runtime == j.runtime_estimate for j in jobs)


def test_heavy_tail_power_matches_reference_ks():
    # one type and one node size so the configured law is a single lognormal
    sigma, kw, nodes = 1.0, 0.5, 8
    spec = WorkloadSpec(job_count=10_000, duration_days=10, node_choices=(nodes,), node_weights=(1.0,),
                        job_types=(JobTypeSpec("cpu", 1.0, kw, 3600),), power_sigma=sigma)
    sample = generate_synthetic_workload(spec, 11).powers()
    reference = stats.lognorm(s=sigma, scale=kw * nodes).rvs(10_000, random_state=2024)
    assert stats.ks_2samp(sample, reference).pvalue > 0.01


def test_tertiles_small_examples():
    t = table(*(make_job(f"j{p}", power=p) for p in (1, 2, 3)))
    cats = categorize_power(t)
    assert [cats[f"j{p}"] for p in (1, 2, 3)] == [PowerCategory.LOW, PowerCategory.MEDIUM, PowerCategory.HIGH]

    t = table(*(make_job(f"j{p}", power=p) for p in range(1, 10)))
    cats = categorize_power(t)
    expect = {1: "Low", 2: "Low", 3: "Low", 4: "Medium", 5: "Medium", 6: "Medium",
              7: "High", 8: "High", 9: "High"}
    assert {p: cats[f"j{p}"].value for p in range(1, 10)} == expect


def test_tertiles_ties_go_low_and_empty_rejected():
    t = table(*(make_job(f"j{i}", power=4.0) for i in range(5)))
    assert set(categorize_power(t).values()) == {PowerCategory.LOW}
    with pytest.raises(ValueError):
        categorize_power(JobTable(()))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=40))
def test_tertiles_partition_and_monotone(powers):
    t = table(*(make_job(f"j{i}", power=p) for i, p in enumerate(powers)))
    cats = categorize_power(t)
    assert len(cats) == len(powers)
    order = {PowerCategory.LOW: 0, PowerCategory.MEDIUM: 1, PowerCategory.HIGH: 2}
    pairs = sorted((p, order[cats[f"j{i}"]]) for i, p in enumerate(powers))
    ranks = [r for _, r in pairs]
    assert ranks == sorted(ranks)
