"""Report payloads plus the tables and figures derived from them."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

REPORT_FILE = "report.json"
REPORT_FORMAT = "tardis-report/1"
TABLE_COLUMNS = ("label", "policy", "budget_fraction", "total_cost", "peak_cost_share",
                 "cost_per_job", "mean_wait_h", "p95_wait_h", "avg_utilization",
                 "max_utilization", "jobs_completed", "budget_violations", "baseline",
                 "reduction_pct")
RUN_KEYS = {
    "label": str, "policy": str, "total_cost": float, "peak_cost_share": float,
    "daily_cost": list, "mean_wait_s": float, "p95_wait_s": float,
    "hourly_starts": dict, "avg_utilization": dict, "max_utilization": dict,
    "category_shares": dict, "jobs_completed": int, "budget_violations": int,
}

_STYLE = {
    "figure.figsize": (7.0, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
    "svg.hashsalt": "tardis",
}


class ReportError(ValueError):
    pass


def dumps(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def validate_report(payload: Mapping) -> None:
    """Raise :class:`ReportError` if ``payload`` lacks the report structure."""
    if payload.get("format") != REPORT_FORMAT:
        raise ReportError(f"unexpected report format {payload.get('format')!r}")
    for key in ("metadata", "config", "runs", "budget_fractions"):
        if key not in payload:
            raise ReportError(f"report missing {key!r}")
    runs = payload["runs"]
    if not isinstance(runs, dict) or not runs:
        raise ReportError("report has no runs")
    for label, run in runs.items():
        for key, kind in RUN_KEYS.items():
            value = run.get(key)
            ok = isinstance(value, (int, float)) if kind is float else isinstance(value, kind)
            if not ok:
                raise ReportError(f"run {label!r}: field {key!r} missing or not {kind.__name__}")
        if run["label"] != label:
            raise ReportError(f"run key {label!r} disagrees with its label")


def load_report(directory) -> dict:
    path = Path(directory) / REPORT_FILE
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path} is not valid JSON: {exc}") from None
    validate_report(payload)
    return payload


def _baseline_for(label: str, runs: Mapping[str, dict], fractions: Mapping[str, float | None]) -> str:
    """FCFS at the same budget level when present, else the first run."""
    for other, run in runs.items():
        if run["policy"] == "fcfs" and fractions.get(other) == fractions.get(label):
            return other
    return next(iter(runs))


def reduction_pct(cost: float, baseline_cost: float) -> float:
    return 100.0 * (1.0 - cost / baseline_cost) if baseline_cost else 0.0


def summary_rows(payload: Mapping) -> list[dict]:
    runs = payload["runs"]
    fractions = payload["budget_fractions"]
    rows = []
    for label, run in runs.items():
        base = _baseline_for(label, runs, fractions)
        util = run["avg_utilization"]
        umax = run["max_utilization"]
        rows.append({
            "label": label,
            "policy": run["policy"],
            "budget_fraction": fractions.get(label),
            "total_cost": run["total_cost"],
            "peak_cost_share": run["peak_cost_share"],
            "cost_per_job": run.get("cost_per_job"),
            "mean_wait_h": run["mean_wait_s"] / 3600.0,
            "p95_wait_h": run["p95_wait_s"] / 3600.0,
            "avg_utilization": sum(util.values()) / len(util) if util else 0.0,
            "max_utilization": max(umax.values()) if umax else 0.0,
            "jobs_completed": run["jobs_completed"],
            "budget_violations": run["budget_violations"],
            "baseline": base,
            "reduction_pct": reduction_pct(run["total_cost"], runs[base]["total_cost"]),
        })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in TABLE_COLUMNS})
    return buf.getvalue()


def rows_to_text(rows: list[dict]) -> str:
    head = ("run", "total $", "peak %", "$/job", "wait h", "p95 h", "util %", "max util %", "vs base %")
    body = []
    for r in rows:
        cpj = "-" if r["cost_per_job"] is None else f"{r['cost_per_job']:.2f}"
        body.append((r["label"], f"{r['total_cost']:.2f}", f"{100 * r['peak_cost_share']:.1f}", cpj,
                     f"{r['mean_wait_h']:.2f}", f"{r['p95_wait_h']:.2f}",
                     f"{100 * r['avg_utilization']:.1f}", f"{100 * r['max_utilization']:.1f}",
                     f"{r['reduction_pct']:+.1f} ({r['baseline']})"))
    widths = [max(len(head[i]), *(len(b[i]) for b in body)) for i in range(len(head))]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines) + "\n"


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_total_cost(rows: list[dict], path: Path) -> None:
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
        labels = [r["label"] for r in rows]
        x = range(len(rows))
        axes[0].bar(x, [r["total_cost"] for r in rows], color="C0")
        axes[0].set_ylabel("total cost ($)")
        axes[1].bar(x, [100 * r["peak_cost_share"] for r in rows], color="C3")
        axes[1].set_ylabel("peak-hour cost share (%)")
        axes[2].bar(x, [r["cost_per_job"] or 0.0 for r in rows], color="C2")
        axes[2].set_ylabel("cost per job ($)")
        for ax in axes:
            ax.set_xticks(list(x), labels, rotation=45, ha="right")
        _save(fig, path)


def plot_daily_cost(runs: Mapping[str, dict], path: Path) -> None:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for label, run in runs.items():
            ax.plot(range(len(run["daily_cost"])), run["daily_cost"], label=label, lw=1.2)
        ax.set_xlabel("day")
        ax.set_ylabel("daily cost ($)")
        ax.legend(fontsize=7, ncol=2)
        _save(fig, path)


def plot_hourly_starts(run: Mapping, path: Path) -> None:
    hist = run["hourly_starts"]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / max(len(hist), 1)
        for i, (site, counts) in enumerate(hist.items()):
            ax.bar([h + (i - (len(hist) - 1) / 2) * width for h in range(24)], counts,
                   width=width, label=f"site {site}")
        ax.set_xlabel("local hour of start")
        ax.set_ylabel("jobs started")
        ax.set_title(run["label"])
        ax.legend()
        _save(fig, path)


def plot_category_shares(runs: Mapping[str, dict], path: Path) -> None:
    labels = list(runs)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), sharey=True)
        for ax, window in zip(axes, ("peak", "off_peak")):
            bottom = [0.0] * len(labels)
            for cat, colour in (("Low", "C2"), ("Medium", "C1"), ("High", "C3")):
                vals = [100 * runs[l]["category_shares"].get(window, {}).get(cat, 0.0) for l in labels]
                ax.bar(range(len(labels)), vals, bottom=bottom, label=cat, color=colour)
                bottom = [b + v for b, v in zip(bottom, vals)]
            ax.set_title(window.replace("_", "-") + " starts")
            ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
        axes[0].set_ylabel("share of starts (%)")
        axes[1].legend()
        _save(fig, path)


def write_report_views(directory, payload: Mapping | None = None) -> list[Path]:
    """Write summary tables and figures for the report in ``directory``."""
    directory = Path(directory)
    payload = payload or load_report(directory)
    rows = summary_rows(payload)
    written = []
    for name, text in (("summary.csv", rows_to_csv(rows)), ("summary.txt", rows_to_text(rows))):
        (directory / name).write_text(text)
        written.append(directory / name)
    figs = directory / "figures"
    figs.mkdir(exist_ok=True)
    runs = payload["runs"]
    plot_total_cost(rows, figs / "total_cost.png")
    plot_daily_cost(runs, figs / "daily_cost.png")
    plot_category_shares(runs, figs / "category_shares.png")
    written += [figs / "total_cost.png", figs / "daily_cost.png", figs / "category_shares.png"]
    for label, run in runs.items():
        p = figs / f"hourly_starts_{label}.png"
        plot_hourly_starts(run, p)
        written.append(p)
    for p in written:
        if not p.is_file() or p.stat().st_size == 0:
            raise ReportError(f"failed to write {p}")
    return written
