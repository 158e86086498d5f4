import math

from tardis.pricing import PriceSchedule, Site
from tardis.trace import Job, JobTable

HOUR = 3600.0


def make_job(job_id="j0", submit=0.0, nodes=1, runtime=HOUR, power=1.0, priority=1,
             cores_per_node=32, job_type="cpu", actual=None, **kw):
    return Job(
        id=job_id,
        submit_time=float(submit),
        nodes_requested=nodes,
        cores_per_task=kw.get("cores_per_task", 1),
        cores_per_node=cores_per_node,
        shared_flag=kw.get("shared_flag", 0),
        priority=priority,
        memory_requested=kw.get("memory", 1000.0),
        runtime_estimate=float(runtime),
        job_type=job_type,
        true_power=float(power),
        actual_runtime=float(actual if actual is not None else runtime),
    )


def make_site(name="S", nodes=10, budget=math.inf, offset=0, off=0.10, peak=None, window=(0.0, 0.0)):
    peak = off if peak is None else peak
    return Site(name, nodes, budget, offset, PriceSchedule(off, peak, window))


def table(*jobs):
    return JobTable(tuple(jobs))
