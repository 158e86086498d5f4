"""Experiment configuration documents (YAML or JSON).

Example::

    seed: 7
    trace:
      synthetic: {scenario: high, duration_days: 30, array_mean: 8, weekend_factor: 0.4}
    sites:
      preset: three_site        # or a list of site mappings
      node_counts: 1024
    policies: [tardis, fcfs]
    budgets: [0.25, 1.0]
    predictor: oracle            # oracle | mean | gnn (needs checkpoint)
    weights: {w_c: 0.4, w_p: 0.2, w_u: 0.0, w_w: 0.2, t_max_hours: 24}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .pricing import Site, three_site_config, site_from_dict, site_to_dict
from .scheduler import HOUR, POLICIES, ScoreWeights
from .trace import JobTable, WorkloadSpec, generate_synthetic_workload, load_trace

PREDICTORS = ("oracle", "mean", "gnn")


class ConfigError(ValueError):
    pass


def derive_seeds(master: int) -> dict[str, int]:
    """Independent child seeds for trace generation, training and dispatch."""
    children = np.random.SeedSequence(int(master)).spawn(3)
    names = ("trace", "train", "dispatch")
    return {n: int(c.generate_state(1, dtype=np.uint32)[0]) for n, c in zip(names, children)}


def load_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return data


def weights_from_dict(data: Mapping | None, p_max: float = 1.0) -> ScoreWeights:
    data = dict(data or {})
    t_max = data.pop("t_max_hours", None)
    kwargs = {k: float(v) for k, v in data.items() if k in ("w_c", "w_p", "w_u", "w_w", "w_r")}
    unknown = set(data) - set(kwargs) - {"p_max"}
    if unknown:
        raise ConfigError(f"unknown weight keys {sorted(unknown)}")
    if t_max is not None:
        kwargs["t_max"] = float(t_max) * HOUR
    kwargs["p_max"] = float(data.get("p_max", p_max))
    return ScoreWeights(**kwargs)


def weights_to_dict(w: ScoreWeights) -> dict:
    return {"w_c": w.w_c, "w_p": w.w_p, "w_u": w.w_u, "w_w": w.w_w, "w_r": w.w_r,
            "t_max_hours": w.t_max / HOUR, "p_max": w.p_max}


def sites_from_config(data: Any) -> tuple[list[Site], list[float | None]]:
    """Sites plus any per-site budget fractions given in the document."""
    if data is None:
        data = {"preset": "three_site"}
    if isinstance(data, Mapping):
        if data.get("preset") != "three_site":
            raise ConfigError("sites mapping needs preset: three_site")
        budget = data.get("power_budget_kw")
        sites = three_site_config(data.get("node_counts", 256),
                                        math.inf if budget is None else budget,
                                        data.get("utc_offsets"))
        if "only" in data:
            keep = set(data["only"])
            sites = [s for s in sites if s.name in keep]
            if not sites:
                raise ConfigError("sites.only selects nothing")
        return sites, [None] * len(sites)
    if not isinstance(data, list) or not data:
        raise ConfigError("sites must be a preset mapping or a non-empty list")
    out = [site_from_dict(d) for d in data]
    return [s for s, _ in out], [f for _, f in out]


@dataclass
class ExperimentConfig:
    trace_path: str | None = None
    workload: WorkloadSpec | None = None
    sites: list[Site] = field(default_factory=lambda: three_site_config())
    site_fractions: list[float | None] = field(default_factory=list)
    policies: list[str] = field(default_factory=lambda: ["tardis", "fcfs"])
    budgets: list[float | None] = field(default_factory=lambda: [None])
    predictor: str = "oracle"
    checkpoint: str | None = None
    weights: dict = field(default_factory=dict)
    seed: int = 0
    dt: float = 60.0
    horizon_steps: int | None = None
    peak_hours_only: bool = False
    out_dir: str = "out"

    def __post_init__(self) -> None:
        if not self.policies:
            raise ConfigError("at least one policy required")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise ConfigError(f"unknown policies {bad}; expected a subset of {list(POLICIES)}")
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"unknown predictor {self.predictor!r}")
        if self.predictor == "gnn" and not self.checkpoint:
            raise ConfigError("predictor gnn needs a checkpoint path")
        for b in self.budgets:
            if b is not None and not 0 < b <= 1:
                raise ConfigError(f"budget fraction {b} outside (0, 1]")
        if (self.trace_path is None) == (self.workload is None):
            raise ConfigError("give exactly one of trace.path or trace.synthetic")
        if not self.site_fractions:
            self.site_fractions = [None] * len(self.sites)
        weights_from_dict(self.weights)

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: Path | None = None) -> "ExperimentConfig":
        data = dict(data)
        trace = data.get("trace") or {}
        path = trace.get("path")
        if path is not None and base_dir is not None and not Path(path).is_absolute():
            path = str(base_dir / path)
        checkpoint = data.get("checkpoint")
        if checkpoint is not None and base_dir is not None and not Path(checkpoint).is_absolute():
            checkpoint = str(base_dir / checkpoint)
        try:
            workload = WorkloadSpec.from_dict(trace["synthetic"]) if "synthetic" in trace else None
            sites, fractions = sites_from_config(data.get("sites"))
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid trace or sites section: {exc}") from None
        budgets = data.get("budgets", [None])
        if not isinstance(budgets, list):
            budgets = [budgets]
        known = {"trace", "sites", "policies", "budgets", "predictor", "checkpoint", "weights",
                 "seed", "dt", "horizon_steps", "budget_peak_hours_only", "out_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(
                trace_path=path,
                workload=workload,
                sites=sites,
                site_fractions=fractions,
                policies=list(data.get("policies", ["tardis", "fcfs"])),
                budgets=[None if b is None else float(b) for b in budgets],
                predictor=data.get("predictor", "oracle"),
                checkpoint=checkpoint,
                weights=dict(data.get("weights") or {}),
                seed=int(data.get("seed", 0)),
                dt=float(data.get("dt", 60.0)),
                horizon_steps=data.get("horizon_steps"),
                peak_hours_only=bool(data.get("budget_peak_hours_only", False)),
                out_dir=str(data.get("out_dir", "out")),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_document(path), Path(path).parent)

    def with_overrides(self, policies=None, budgets=None, seed=None, trace_path=None) -> "ExperimentConfig":
        changes: dict[str, Any] = {}
        if policies:
            changes["policies"] = list(policies)
        if budgets:
            changes["budgets"] = list(budgets)
        if seed is not None:
            changes["seed"] = int(seed)
        if trace_path is not None:
            changes["trace_path"], changes["workload"] = trace_path, None
        return replace(self, **changes) if changes else self

    def load_trace(self) -> JobTable:
        if self.trace_path is not None:
            return load_trace(self.trace_path)
        return generate_synthetic_workload(self.workload, derive_seeds(self.seed)["trace"])

    def score_weights(self, trace: JobTable) -> ScoreWeights:
        p_max = max((j.priority for j in trace), default=1) or 1
        return weights_from_dict(self.weights, float(p_max))

    def to_dict(self) -> dict:
        return {
            "trace": ({"path": self.trace_path} if self.trace_path is not None
                      else {"synthetic": self.workload.to_dict()}),
            "sites": [dict(site_to_dict(s), **({"budget_fraction_of_peak": f} if f else {}))
                      for s, f in zip(self.sites, self.site_fractions)],
            "policies": list(self.policies),
            "budgets": list(self.budgets),
            "predictor": self.predictor,
            "checkpoint": self.checkpoint,
            "weights": dict(self.weights),
            "seed": self.seed,
            "dt": self.dt,
            "horizon_steps": self.horizon_steps,
            "budget_peak_hours_only": self.peak_hours_only,
        }
