"""Training and inference for the GCN power model."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from ..trace import Job, JobTable
from .features import N_FEATURES, FeaturePipeline, fit_pipeline
from .gcn import GcnModel, NonFiniteError, forward, init_model, mse_loss_and_grad
from .graph import build_knn_graph

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tardis-gcn/1"


class InsufficientJobsError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    patience: int = 15
    max_epochs: int = 200
    batch_size: int = 512
    k: int = 5
    dropout: float = 0.2
    seed: int = 0
    validation_fraction: float = 0.2
    hidden: int = 128
    fc_dim: int = 64

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.batch_size < 2 or self.k < 1 or self.max_epochs < 1:
            raise ValueError("batch_size >= 2, k >= 1 and max_epochs >= 1 required")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_csv(self) -> str:
        lines = ["epoch,train_mse_kw2,val_mse_kw2,best"]
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            lines.append(f"{i},{tr!r},{va!r},{int(i == self.best_epoch)}")
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def temporal_split(jobs: JobTable, validation_fraction: float) -> tuple[JobTable, JobTable]:
    """Earliest jobs train, latest validate; no shuffling across time."""
    cut = int(round(len(jobs) * (1.0 - validation_fraction)))
    return jobs[:cut], jobs[cut:]


def _windows(n: int, size: int) -> list[np.ndarray]:
    """Contiguous index windows of near-equal size, none larger than ``size``."""
    if n == 0:
        return []
    return np.array_split(np.arange(n), math.ceil(n / size))


def _graph_mse(model, x, y, windows, k) -> float:
    """Eval-mode mean squared error in kW^2 over contiguous graph windows."""
    total = 0.0
    for idx in windows:
        pred = forward(model, build_knn_graph(x[idx], k))
        total += float(np.sum((pred - y[idx]) ** 2))
    return total / len(y)


def _recalibrate_bn(model: GcnModel, x: np.ndarray, windows, k: int) -> None:
    """Set running batch-norm statistics to the average batch statistics over fixed windows."""
    probe = model.copy()
    probe.training = True
    probe.dropout = 0.0
    sums = {f"bn{i}": [0.0, 0.0] for i in range(3)}
    for idx in windows:
        _, cache = forward(probe, build_knn_graph(x[idx], k), return_cache=True)
        n = len(idx)
        for key in sums:
            mu, var = cache[key][4], cache[key][5]
            sums[key][0] = sums[key][0] + mu
            sums[key][1] = sums[key][1] + var * (n / max(n - 1, 1))
    for key, (mu_sum, var_sum) in sums.items():
        model.buffers[f"{key}.mean"] = mu_sum / len(windows)
        model.buffers[f"{key}.var"] = var_sum / len(windows)


def train(jobs: JobTable, cfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[int, float, float], None] | None = None
          ) -> tuple[GcnModel, FeaturePipeline, TrainHistory]:
    """Fit the GCN power model with Adam and early stopping.

    Jobs are split temporally; each epoch shuffles the training jobs into
    mini-batches and builds a fresh kNN graph per batch. Targets are trained in
    standardised units; reported losses are MSE in kW^2. After every epoch the
    batch-norm running statistics are recomputed over fixed contiguous training
    windows, so an epoch that leaves the weights unchanged also leaves the
    validation loss unchanged.
    """
    if len(jobs) < 2 * cfg.batch_size:
        raise InsufficientJobsError(
            f"insufficient jobs: need at least {2 * cfg.batch_size}, got {len(jobs)}")
    train_jobs, val_jobs = temporal_split(jobs, cfg.validation_fraction)
    pipe = fit_pipeline(train_jobs)
    x_tr = pipe.transform(train_jobs)
    x_va = pipe.transform(val_jobs)
    y_tr = (train_jobs.powers() - pipe.target_mean) / pipe.target_std
    y_va = val_jobs.powers()
    kw2 = pipe.target_std ** 2

    rng = np.random.default_rng(cfg.seed)
    model = init_model(N_FEATURES, cfg.hidden, cfg.fc_dim, cfg.dropout, seed=int(rng.integers(2**31)))
    model.buffers["out.scale"] = np.array([pipe.target_std])
    model.buffers["out.shift"] = np.array([pipe.target_mean])
    opt = Adam(model.params, cfg.learning_rate)

    fixed_train = _windows(len(x_tr), cfg.batch_size)
    val_windows = _windows(len(x_va), cfg.batch_size)
    history = TrainHistory()
    best = (math.inf, None)
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(x_tr))
        batch_losses = []
        try:
            for idx in _windows(len(order), cfg.batch_size):
                idx = order[idx]
                graph = build_knn_graph(x_tr[idx], cfg.k)
                loss, grads, _ = mse_loss_and_grad(model, graph, y_tr[idx], rng=rng)
                opt.step(model.params, grads)
                batch_losses.append(loss * len(idx))
            model.eval()
            _recalibrate_bn(model, x_tr, fixed_train, cfg.k)
            val = _graph_mse(model, x_va, y_va, val_windows, cfg.k)
        except NonFiniteError as exc:
            raise TrainingDivergedError(epoch, str(exc)) from None
        tr = sum(batch_losses) / len(x_tr) * kw2
        if not (math.isfinite(tr) and math.isfinite(val)):
            raise TrainingDivergedError(epoch)
        history.train_loss.append(tr)
        history.val_loss.append(val)
        if on_epoch:
            on_epoch(epoch, tr, val)
        log.debug("epoch %d train %.4g val %.4g", epoch, tr, val)
        if val < best[0]:
            best = (val, model.copy())
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model = best[1]
    model.eval()
    return model, pipe, history


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict(model: GcnModel, pipeline: FeaturePipeline, jobs: JobTable | list[Job],
            k: int = 5) -> dict[str, float]:
    """Predicted kW per job id from one graph over ``jobs``; negatives clamp to 0."""
    if len(jobs) == 0:
        return {}
    if model.training:
        raise ValueError("predict requires an eval-mode model")
    graph = build_knn_graph(pipeline.transform(jobs), k)
    out = np.maximum(forward(model, graph), 0.0)
    return {job.id: float(v) for job, v in zip(jobs, out)}


def predict_windows(model: GcnModel, pipeline: FeaturePipeline, jobs: JobTable,
                    k: int = 5, window: int = 512) -> dict[str, float]:
    """Predict over consecutive submission windows of at most ``window`` jobs."""
    out: dict[str, float] = {}
    for idx in _windows(len(jobs), window):
        out.update(predict(model, pipeline, [jobs[int(i)] for i in idx], k))
    return out


class Predictor:
    """Maps a job table to predicted power (kW) per job id."""

    kind = "abstract"

    def __call__(self, jobs: JobTable) -> dict[str, float]:
        raise NotImplementedError


class OraclePredictor(Predictor):
    kind = "oracle"

    def __call__(self, jobs):
        return {j.id: j.true_power for j in jobs}


class MeanPredictor(Predictor):
    kind = "mean"

    def __init__(self, mean_kw: float):
        self.mean_kw = float(mean_kw)

    def __call__(self, jobs):
        return {j.id: self.mean_kw for j in jobs}


class GnnPredictor(Predictor):
    kind = "gnn"

    def __init__(self, model: GcnModel, pipeline: FeaturePipeline, k: int = 5, window: int = 512):
        self.model, self.pipeline, self.k, self.window = model.eval(), pipeline, k, window

    def __call__(self, jobs):
        return predict_windows(self.model, self.pipeline, jobs, self.k, self.window)


def baseline_predictor(kind: str, train_jobs: JobTable | None = None) -> Predictor:
    if kind == "oracle":
        return OraclePredictor()
    if kind == "mean":
        if not train_jobs:
            raise ValueError("mean predictor needs training jobs")
        return MeanPredictor(float(np.mean(train_jobs.powers())))
    raise ValueError(f"unknown baseline predictor {kind!r}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: GcnModel, pipeline: FeaturePipeline,
                    cfg: TrainConfig | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "in_dim": model.in_dim,
        "hidden": model.hidden,
        "fc_dim": model.fc_dim,
        "dropout": model.dropout,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "pipeline": pipeline.to_dict(),
        "config": asdict(cfg) if cfg else None,
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[GcnModel, FeaturePipeline, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        model = GcnModel(meta["in_dim"], meta["hidden"], meta["fc_dim"], meta["dropout"])
        for key in data.files:
            if key.startswith("param/"):
                model.params[key[6:]] = data[key].copy()
            elif key.startswith("buffer/"):
                model.buffers[key[7:]] = data[key].copy()
    for name, shape in model.shapes().items():
        if model.params.get(name) is None or model.params[name].shape != tuple(shape):
            raise ValueError(f"checkpoint parameter {name} missing or misshapen")
    if not all(np.all(np.isfinite(v)) for v in model.params.values()):
        raise ValueError("checkpoint contains non-finite parameters")
    return model.eval(), FeaturePipeline.from_dict(meta["pipeline"]), meta
