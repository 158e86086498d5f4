"""Time-of-use electricity rates for HPC sites."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

DAY = 86400.0


@dataclass(frozen=True)
class PriceSchedule:
    """Two-level tariff; ``peak_window`` is [start, end) in site-local hours.

    ``start == end`` means flat pricing at ``off_peak_rate``. Windows with
    ``start > end`` wrap past midnight. Rates may be zero or negative.
    """

    off_peak_rate: float
    peak_rate: float
    peak_window: tuple[float, float] = (6.0, 22.0)

    def __post_init__(self) -> None:
        start, end = self.peak_window
        if not (0 <= start < 24 and 0 <= end < 24):
            raise ValueError(f"peak window hours must lie in [0, 24): {self.peak_window}")

    @classmethod
    def flat(cls, rate: float) -> "PriceSchedule":
        return cls(rate, rate, (0.0, 0.0))

    @property
    def is_flat(self) -> bool:
        return self.peak_window[0] == self.peak_window[1]

    def in_peak(self, local_hour):
        """Vectorised window membership for local hour(s) in [0, 24)."""
        start, end = self.peak_window
        h = np.asarray(local_hour, dtype=float)
        if start == end:
            member = np.zeros_like(h, dtype=bool)
        elif start < end:
            member = (h >= start) & (h < end)
        else:
            member = (h >= start) | (h < end)
        return member if member.ndim else bool(member)


@dataclass(frozen=True)
class Site:
    name: str
    node_count: int
    power_budget_kw: float
    utc_offset_minutes: int
    schedule: PriceSchedule

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError(f"site {self.name}: node_count must be >= 1")
        if not self.power_budget_kw > 0:
            raise ValueError(f"site {self.name}: power_budget_kw must be > 0")

    def with_budget(self, budget_kw: float) -> "Site":
        return replace(self, power_budget_kw=budget_kw)

    def local_hour(self, t):
        """Site-local hour of day (fractional) for UTC epoch second(s) ``t``."""
        local = np.asarray(t, dtype=float) + self.utc_offset_minutes * 60.0
        hours = np.mod(local, DAY) / 3600.0
        return hours if hours.ndim else float(hours)


def is_peak(site: Site, t) -> bool:
    return site.schedule.in_peak(site.local_hour(t))


def rate_at(site: Site, t):
    """Electricity rate in $/kWh at UTC epoch second(s) ``t``."""
    peak = site.schedule.in_peak(site.local_hour(t))
    if isinstance(peak, bool):
        return site.schedule.peak_rate if peak else site.schedule.off_peak_rate
    return np.where(peak, site.schedule.peak_rate, site.schedule.off_peak_rate)


def next_rate_changes(site: Site, t: float, until: float) -> list[float]:
    """UTC instants in (t, until] at which the site's rate switches."""
    sched = site.schedule
    if sched.is_flat or sched.peak_rate == sched.off_peak_rate or until <= t:
        return []
    offset = site.utc_offset_minutes * 60.0
    out = []
    day0 = math.floor((t + offset) / DAY) - 1
    day1 = math.floor((until + offset) / DAY) + 1
    for day in range(day0, day1 + 1):
        for hour in sched.peak_window:
            instant = day * DAY + hour * 3600.0 - offset
            if t < instant <= until:
                out.append(instant)
    out.sort()
    return out


# Three staggered sites; windows are local peak hours.
THREE_SITE_TARIFFS = {
    "A": (0.12, 0.36, (6.0, 22.0), -300),
    "B": (0.10, 0.30, (5.0, 21.0), -480),
    "C": (0.08, 0.24, (3.0, 19.0), -360),
}


def three_site_config(node_counts: Sequence[int] | int = 256,
                            budgets_kw: Sequence[float] | float = math.inf,
                            utc_offsets: Mapping[str, int] | None = None) -> list[Site]:
    """Sites A, B, C with the East/West/South time-of-use tariffs.

    Node counts and power budgets are not fixed by the tariffs and must be
    supplied; scalars apply to every site.
    """
    names = ("A", "B", "C")
    if isinstance(node_counts, int):
        node_counts = [node_counts] * 3
    if isinstance(budgets_kw, (int, float)):
        budgets_kw = [float(budgets_kw)] * 3
    sites = []
    for name, nodes, budget in zip(names, node_counts, budgets_kw):
        off, peak, window, offset = THREE_SITE_TARIFFS[name]
        if utc_offsets and name in utc_offsets:
            offset = utc_offsets[name]
        sites.append(Site(name, int(nodes), float(budget), offset, PriceSchedule(off, peak, window)))
    return sites


_SITE_KEYS = {"name", "node_count", "power_budget_kw", "budget_fraction_of_peak", "utc_offset_minutes",
              "off_peak_rate", "peak_rate", "peak_start_hour", "peak_end_hour"}


def site_from_dict(data: Mapping) -> tuple[Site, float | None]:
    """Build a Site from a config mapping.

    Returns the site and its ``budget_fraction_of_peak`` if the budget is to be
    derived from the trace rather than given in kW.
    """
    unknown = set(data) - _SITE_KEYS
    if unknown:
        raise ValueError(f"unknown site keys {sorted(unknown)}")
    fraction = data.get("budget_fraction_of_peak")
    # budgets given as a fraction stay unbounded until the trace peak is known
    budget = data.get("power_budget_kw")
    if budget is None:
        budget = math.inf
    schedule = PriceSchedule(
        float(data["off_peak_rate"]),
        float(data.get("peak_rate", data["off_peak_rate"])),
        (float(data.get("peak_start_hour", 0)), float(data.get("peak_end_hour", 0))),
    )
    site = Site(str(data["name"]), int(data["node_count"]), float(budget),
                int(data.get("utc_offset_minutes", 0)), schedule)
    return site, (None if fraction is None else float(fraction))


def site_to_dict(site: Site) -> dict:
    return {
        "name": site.name,
        "node_count": site.node_count,
        "power_budget_kw": site.power_budget_kw if math.isfinite(site.power_budget_kw) else None,
        "utc_offset_minutes": site.utc_offset_minutes,
        "off_peak_rate": site.schedule.off_peak_rate,
        "peak_rate": site.schedule.peak_rate,
        "peak_start_hour": site.schedule.peak_window[0],
        "peak_end_hour": site.schedule.peak_window[1],
    }
