"""Command-line entry point: ``tardis <command> [options]``."""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, derive_seeds, load_document, weights_to_dict
from .powermodel import (
    GnnPredictor,
    InsufficientJobsError,
    TrainConfig,
    TrainingDivergedError,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .powermodel.training import MeanPredictor, OraclePredictor
from .pricing import site_to_dict
from .report import (
    REPORT_FILE,
    REPORT_FORMAT,
    ReportError,
    dumps,
    load_report,
    rows_to_text,
    summary_rows,
    validate_report,
    write_report_views,
)
from .simengine import SimConfig, compare, peak_power
from .trace import JobTable, TraceError, WorkloadSpec, generate_synthetic_workload, load_trace, save_trace

log = logging.getLogger("tardis")

EARLY_SPLIT_FRACTION = 0.3


class CliError(Exception):
    pass


def temporal_subset(jobs: JobTable, fraction: float) -> JobTable:
    """Earliest ``fraction`` of the jobs by submission time."""
    return jobs[: int(math.floor(len(jobs) * fraction))]


def _budget_list(text: str) -> list[float | None]:
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        if part in ("none", "inf", ""):
            out.append(None)
            continue
        value = float(part.rstrip("%"))
        out.append(value / 100.0 if part.endswith("%") or value > 1 else value)
    return out


def _policy_list(values: list[str] | None) -> list[str] | None:
    if not values:
        return None
    return [p.strip() for v in values for p in v.split(",") if p.strip()]


def _read_trace(path) -> JobTable:
    try:
        return load_trace(path)
    except OSError as exc:
        raise CliError(f"cannot read trace {path}: {exc.strerror}") from None
    except TraceError as exc:
        raise CliError(f"invalid trace {path}: {exc}") from None


# ---------------------------------------------------------------------------
# gen-trace
# ---------------------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config).with_overrides(seed=args.seed)
        if cfg.workload is None:
            raise CliError("config has no trace.synthetic section")
        spec, seed = cfg.workload, cfg.seed
    else:
        spec = WorkloadSpec.for_scenario(args.scenario, args.days, args.jobs_per_day)
        seed = args.seed or 0
    jobs = generate_synthetic_workload(spec, derive_seeds(seed)["trace"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trace(jobs, out)
    print(f"wrote {len(jobs)} jobs to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    jobs = _read_trace(args.trace)
    if args.paper_split:
        jobs = temporal_subset(jobs, EARLY_SPLIT_FRACTION)
    overrides = load_document(args.config).get("training", {}) if args.config else {}
    seed = derive_seeds(args.seed or 0)["train"]
    cfg = TrainConfig(**{**overrides, "seed": seed})
    if args.epochs:
        cfg = replace(cfg, max_epochs=args.epochs)
    if args.batch_size:
        cfg = replace(cfg, batch_size=args.batch_size)
    try:
        model, pipeline, history = train(
            jobs, cfg, on_epoch=lambda e, tr, va: log.info("epoch %d train %.4f val %.4f", e, tr, va))
    except InsufficientJobsError as exc:
        raise CliError(str(exc)) from None
    except TrainingDivergedError as exc:
        raise CliError(f"training diverged: {exc}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, pipeline, cfg)
    hist_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    hist_path.write_text(history.to_csv())
    load_checkpoint(out)
    print(f"parameters {count_parameters(model)}; best epoch {history.best_epoch}; "
          f"best val MSE {history.best_val_loss:.6g} kW^2")
    print(f"wrote {out} and {hist_path}")
    return 0


# ---------------------------------------------------------------------------
# simulate / compare / report
# ---------------------------------------------------------------------------

def _budget_tag(fraction: float | None) -> str:
    return "bnone" if fraction is None else f"b{int(round(fraction * 100)):03d}"


def _predictor(cfg: ExperimentConfig, trace: JobTable):
    if cfg.predictor == "oracle":
        return OraclePredictor()
    if cfg.predictor == "mean":
        return MeanPredictor(float(trace.powers().mean()) if len(trace) else 0.0)
    try:
        model, pipeline, meta = load_checkpoint(cfg.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {cfg.checkpoint}: {exc}") from None
    k = (meta.get("config") or {}).get("k", 5)
    return GnnPredictor(model, pipeline, k=k)


def run_experiment(cfg: ExperimentConfig, command: str = "simulate"):
    """Run every (budget x policy) combination; returns (payload, ComparisonReport)."""
    trace = cfg.load_trace()
    weights = cfg.score_weights(trace)
    predictor = _predictor(cfg, trace)
    seeds = derive_seeds(cfg.seed)
    sites = tuple(cfg.sites)
    needs_peak = any(b is not None for b in cfg.budgets) or any(cfg.site_fractions)
    peak_kw = peak_power(trace, sites, cfg.dt) if needs_peak and len(trace) else 0.0
    if any(cfg.site_fractions):
        total_nodes = sum(s.node_count for s in sites)
        sites = tuple(s.with_budget(f * peak_kw * s.node_count / total_nodes) if f else s
                      for s, f in zip(sites, cfg.site_fractions))

    multi_budget = len(cfg.budgets) > 1 or cfg.budgets[0] is not None
    sims, fractions = [], {}
    for fraction in cfg.budgets:
        for policy in cfg.policies:
            label = f"{policy}_{_budget_tag(fraction)}" if multi_budget else policy
            sims.append(SimConfig(sites, policy=policy, weights=weights, predictor=predictor.kind,
                                  dt=cfg.dt, horizon_steps=cfg.horizon_steps,
                                  budget_fraction=fraction, seed=seeds["dispatch"],
                                  peak_hours_only=cfg.peak_hours_only, name=label))
            fractions[label] = fraction
    report = compare(trace, sims, predictor, peak_kw=peak_kw if needs_peak else None)

    site_budgets = {}
    for sim in sims:
        budgets = [s.power_budget_kw for s in sites]
        if sim.budget_fraction is not None:
            total_nodes = sum(s.node_count for s in sites)
            budgets = [sim.budget_fraction * peak_kw * s.node_count / total_nodes for s in sites]
        site_budgets[sim.label] = {s.name: (b if math.isfinite(b) else None)
                                   for s, b in zip(sites, budgets)}
    payload = report.to_dict()
    payload.update({
        "format": REPORT_FORMAT,
        "metadata": {
            "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "version": __version__,
            "command": command,
        },
        "config": dict(cfg.to_dict(), resolved_weights=weights_to_dict(weights)),
        "trace": {"jobs": len(trace),
                  "span_s": (trace[-1].submit_time - trace[0].submit_time) if len(trace) else 0.0},
        "sites": [site_to_dict(s) for s in sites],
        "peak_kw": peak_kw,
        "budget_fractions": fractions,
        "site_budgets_kw": site_budgets,
    })
    return payload, report


def write_experiment(payload: dict, report, out_dir) -> Path:
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    validate_report(payload)
    for label, result in report.results.items():
        (out / "runs" / f"{label}_steps.csv").write_text(result.steps_csv())
        (out / "runs" / f"{label}_daily.csv").write_text(result.daily_csv())
    (out / REPORT_FILE).write_text(dumps(payload))
    load_report(out)
    return out


def _experiment_from_args(args) -> ExperimentConfig:
    if not args.config:
        raise CliError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    budgets = _budget_list(args.budget) if args.budget else None
    return cfg.with_overrides(_policy_list(args.policy), budgets, args.seed, args.trace)


def cmd_simulate(args) -> int:
    cfg = _experiment_from_args(args)
    payload, report = run_experiment(cfg, "simulate")
    out = write_experiment(payload, report, args.out or cfg.out_dir)
    print(f"wrote {len(report.results)} result sets to {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = _experiment_from_args(args)
    payload, report = run_experiment(cfg, "compare")
    out = write_experiment(payload, report, args.out or cfg.out_dir)
    write_report_views(out, payload)
    print(rows_to_text(summary_rows(payload)), end="")
    return 0


def cmd_report(args) -> int:
    directory = Path(args.report_dir or args.out or ".")
    payload = load_report(directory)
    write_report_views(directory, payload)
    print(rows_to_text(summary_rows(payload)), end="")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tardis", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="write a synthetic trace CSV")
    g.add_argument("--out", required=True, help="output CSV path")
    g.add_argument("--config", help="experiment config with a trace.synthetic section")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--scenario", default="high", choices=("high", "average", "low"))
    g.add_argument("--days", type=float, default=30.0)
    g.add_argument("--jobs-per-day", type=float, default=200.0)
    g.set_defaults(func=cmd_gen_trace)

    t = sub.add_parser("train", help="train the power model on a trace")
    t.add_argument("--trace", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--paper-split", action="store_true",
                   help=f"train on the earliest {int(EARLY_SPLIT_FRACTION * 100)}%% of jobs")
    t.add_argument("--config", help="document whose 'training' mapping overrides TrainConfig")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="maximum epochs")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--history", help="per-epoch loss CSV (default: <out>.history.csv)")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("simulate", cmd_simulate, "run policy x budget simulations"),
                              ("compare", cmd_compare, "simulate, then write tables and figures")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--trace", help="trace CSV overriding the config's trace section")
        s.add_argument("--out", help="output directory (default: config out_dir)")
        s.add_argument("--seed", type=int)
        s.add_argument("--policy", action="append", help="policy or comma list; repeatable")
        s.add_argument("--budget", help="comma list of budget fractions, e.g. 0.25,0.5 or 25%%")
        s.set_defaults(func=func)

    r = sub.add_parser("report", help="tables and figures from a simulate output directory")
    r.add_argument("report_dir", nargs="?")
    r.add_argument("--out", help="same as report_dir")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ReportError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
