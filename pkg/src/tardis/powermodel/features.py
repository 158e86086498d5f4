"""Job feature extraction and standardisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..trace import Job, JobTable

# Column order of the 8-wide feature matrix.
FEATURE_COLUMNS = (
    "nodes_requested",
    "cores_per_task",
    "cores_per_node",
    "shared_flag",
    "priority",
    "memory_requested",
    "runtime_estimate",
    "job_type",
)
CATEGORICAL_COLUMNS = ("job_type",)
N_FEATURES = len(FEATURE_COLUMNS)


@dataclass
class FeaturePipeline:
    """Label encoders plus z-score statistics, fitted on training jobs only.

    Categories unseen during fitting map to the reserved code ``len(vocab)``.
    The target (true power) statistics are kept alongside so predictions can
    be trained in standardised units and reported in kilowatts.
    """

    vocab: dict[str, dict[str, int]] = field(default_factory=dict)
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    target_mean: float = 0.0
    target_std: float = 1.0

    def encode(self, jobs: JobTable | list[Job]) -> np.ndarray:
        """Raw (unstandardised) feature matrix with categorical codes."""
        rows = np.empty((len(jobs), N_FEATURES), dtype=float)
        for i, job in enumerate(jobs):
            for c, col in enumerate(FEATURE_COLUMNS):
                value = getattr(job, col)
                if col in CATEGORICAL_COLUMNS:
                    codes = self.vocab.get(col, {})
                    value = codes.get(value, len(codes))
                rows[i, c] = value
        return rows

    def transform(self, jobs: JobTable | list[Job]) -> np.ndarray:
        return (self.encode(jobs) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeaturePipeline":
        return cls(
            vocab={k: dict(v) for k, v in data["vocab"].items()},
            mean=np.asarray(data["mean"], dtype=float),
            std=np.asarray(data["std"], dtype=float),
            target_mean=float(data["target_mean"]),
            target_std=float(data["target_std"]),
        )


def fit_pipeline(jobs: JobTable | list[Job]) -> FeaturePipeline:
    """Fit label encoders (first-appearance order) and population z-scores."""
    if len(jobs) == 0:
        raise ValueError("cannot fit a feature pipeline on an empty table")
    vocab: dict[str, dict[str, int]] = {}
    for col in CATEGORICAL_COLUMNS:
        codes: dict[str, int] = {}
        for job in jobs:
            codes.setdefault(getattr(job, col), len(codes))
        vocab[col] = codes
    pipe = FeaturePipeline(vocab=vocab)
    raw = pipe.encode(jobs)
    pipe.mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std[std == 0] = 1.0
    pipe.std = std
    power = np.array([j.true_power for j in jobs], dtype=float)
    pipe.target_mean = float(power.mean())
    pipe.target_std = float(power.std()) or 1.0
    return pipe
