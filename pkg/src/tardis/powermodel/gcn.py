"""Graph convolutional power regressor with hand-written backpropagation.

Layer stack (widths default to 8 -> 128 -> 128 -> 64 -> 1):

    embed:  Linear(in, hidden) + BatchNorm + ReLU + Dropout
    conv1:  GCNConv(hidden, hidden) + BatchNorm + ReLU
    conv2:  GCNConv(hidden, hidden) + residual(conv1 output) + BatchNorm + ReLU
    fc:     Linear(hidden, fc) + ReLU + Dropout
    out:    Linear(fc, 1)

GCNConv computes ``A_hat @ (H @ W) + b`` with the symmetric self-loop
normalisation held by :class:`JobGraph`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import JobGraph

BN_EPS = 1e-5

TRAINABLE = (
    "embed.W", "embed.b", "bn0.gamma", "bn0.beta",
    "conv1.W", "conv1.b", "bn1.gamma", "bn1.beta",
    "conv2.W", "conv2.b", "bn2.gamma", "bn2.beta",
    "fc.W", "fc.b", "out.W", "out.b",
)


class NonFiniteError(FloatingPointError):
    """A forward pass or loss produced NaN/inf."""


@dataclass
class GcnModel:
    in_dim: int = 8
    hidden: int = 128
    fc_dim: int = 64
    dropout: float = 0.2
    training: bool = False
    params: dict[str, np.ndarray] = field(default_factory=dict)
    # running batch-norm statistics and the kW output affine; not trainable
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def train(self) -> "GcnModel":
        self.training = True
        return self

    def eval(self) -> "GcnModel":
        self.training = False
        return self

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, f = self.hidden, self.fc_dim
        return {
            "embed.W": (self.in_dim, h), "embed.b": (h,),
            "bn0.gamma": (h,), "bn0.beta": (h,),
            "conv1.W": (h, h), "conv1.b": (h,),
            "bn1.gamma": (h,), "bn1.beta": (h,),
            "conv2.W": (h, h), "conv2.b": (h,),
            "bn2.gamma": (h,), "bn2.beta": (h,),
            "fc.W": (h, f), "fc.b": (f,),
            "out.W": (f, 1), "out.b": (1,),
        }

    def copy(self) -> "GcnModel":
        return GcnModel(self.in_dim, self.hidden, self.fc_dim, self.dropout, self.training,
                        {k: v.copy() for k, v in self.params.items()},
                        {k: v.copy() for k, v in self.buffers.items()})


def init_model(in_dim: int = 8, hidden: int = 128, fc_dim: int = 64, dropout: float = 0.2,
               seed: int = 0) -> GcnModel:
    """Fresh model: uniform(+-1/sqrt(fan_in)) linear layers, Glorot convs, unit batch-norm."""
    rng = np.random.default_rng(seed)
    model = GcnModel(in_dim, hidden, fc_dim, dropout)
    for name, shape in model.shapes().items():
        layer, kind = name.split(".")
        if kind == "gamma":
            value = np.ones(shape)
        elif kind == "beta":
            value = np.zeros(shape)
        elif layer.startswith("conv"):
            if kind == "W":
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, shape)
            else:
                value = np.zeros(shape)
        else:
            fan_in = model.shapes()[f"{layer}.W"][0]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, shape)
        model.params[name] = value
    reset_buffers(model)
    return model


def reset_buffers(model: GcnModel) -> None:
    for i in range(3):
        model.buffers[f"bn{i}.mean"] = np.zeros(model.hidden)
        model.buffers[f"bn{i}.var"] = np.ones(model.hidden)
    model.buffers.setdefault("out.scale", np.ones(1))
    model.buffers.setdefault("out.shift", np.zeros(1))


def count_parameters(model: GcnModel) -> int:
    """Trainable weights, biases and batch-norm scale/shift; running stats excluded."""
    return int(sum(int(np.prod(s)) for s in model.shapes().values()))


def _bn_forward(x, gamma, beta, mean_buf, var_buf, training):
    if training:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
    else:
        mu, var = mean_buf, var_buf
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma, training, mu, var)


def _bn_backward(dy, cache):
    xhat, inv, gamma, training, _, _ = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if not training:
        return dxhat * inv, dgamma, dbeta
    n = dy.shape[0]
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def _check(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite activation in {where}")


def forward(model: GcnModel, graph: JobGraph, rng: np.random.Generator | None = None,
            return_cache: bool = False):
    """Run the network; returns predictions in kW (length n).

    In training mode batch-norm uses batch statistics and dropout draws masks
    from ``rng``; in eval mode the pass is deterministic.
    """
    p, b = model.params, model.buffers
    x = graph.features
    adj = graph.adjacency
    train = model.training
    drop = model.dropout if train else 0.0
    if drop > 0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")

    def dropout_mask(shape):
        if drop <= 0:
            return None
        return (rng.random(shape) >= drop) / (1.0 - drop)

    a0 = x @ p["embed.W"] + p["embed.b"]
    n0, bn0 = _bn_forward(a0, p["bn0.gamma"], p["bn0.beta"], b["bn0.mean"], b["bn0.var"], train)
    r0 = np.maximum(n0, 0.0)
    m0 = dropout_mask(r0.shape)
    h0 = r0 if m0 is None else r0 * m0

    c1 = adj @ (h0 @ p["conv1.W"]) + p["conv1.b"]
    n1, bn1 = _bn_forward(c1, p["bn1.gamma"], p["bn1.beta"], b["bn1.mean"], b["bn1.var"], train)
    h1 = np.maximum(n1, 0.0)

    c2 = adj @ (h1 @ p["conv2.W"]) + p["conv2.b"] + h1
    n2, bn2 = _bn_forward(c2, p["bn2.gamma"], p["bn2.beta"], b["bn2.mean"], b["bn2.var"], train)
    h2 = np.maximum(n2, 0.0)

    a3 = h2 @ p["fc.W"] + p["fc.b"]
    f = np.maximum(a3, 0.0)
    m1 = dropout_mask(f.shape)
    fd = f if m1 is None else f * m1

    y = (fd @ p["out.W"] + p["out.b"])[:, 0]
    _check(y, "output layer")
    out = y * b["out.scale"][0] + b["out.shift"][0]
    if not return_cache:
        return out
    cache = dict(x=x, adj=adj, n0=n0, bn0=bn0, m0=m0, h0=h0, n1=n1, bn1=bn1, h1=h1,
                 n2=n2, bn2=bn2, h2=h2, a3=a3, m1=m1, fd=fd, y=y)
    return out, cache


def backward(model: GcnModel, cache: dict, dy: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable parameter.

    ``dy`` is dLoss/d(raw network output), i.e. before the kW output affine.
    """
    p = model.params
    g: dict[str, np.ndarray] = {}
    dy = dy.reshape(-1, 1)
    adj = cache["adj"]

    g["out.W"] = cache["fd"].T @ dy
    g["out.b"] = dy.sum(axis=0)
    dfd = dy @ p["out.W"].T
    df = dfd if cache["m1"] is None else dfd * cache["m1"]
    da3 = df * (cache["a3"] > 0)
    g["fc.W"] = cache["h2"].T @ da3
    g["fc.b"] = da3.sum(axis=0)
    dh2 = da3 @ p["fc.W"].T

    dn2 = dh2 * (cache["n2"] > 0)
    dc2, g["bn2.gamma"], g["bn2.beta"] = _bn_backward(dn2, cache["bn2"])
    g["conv2.b"] = dc2.sum(axis=0)
    prop2 = adj.T @ dc2
    g["conv2.W"] = cache["h1"].T @ prop2
    dh1 = dc2 + prop2 @ p["conv2.W"].T

    dn1 = dh1 * (cache["n1"] > 0)
    dc1, g["bn1.gamma"], g["bn1.beta"] = _bn_backward(dn1, cache["bn1"])
    g["conv1.b"] = dc1.sum(axis=0)
    prop1 = adj.T @ dc1
    g["conv1.W"] = cache["h0"].T @ prop1
    dh0 = prop1 @ p["conv1.W"].T

    dr0 = dh0 if cache["m0"] is None else dh0 * cache["m0"]
    dn0 = dr0 * (cache["n0"] > 0)
    da0, g["bn0.gamma"], g["bn0.beta"] = _bn_backward(dn0, cache["bn0"])
    g["embed.W"] = cache["x"].T @ da0
    g["embed.b"] = da0.sum(axis=0)
    return g


def mse_loss_and_grad(model: GcnModel, graph: JobGraph, target: np.ndarray,
                      rng: np.random.Generator | None = None):
    """MSE between raw network output and ``target``; returns (loss, grads, cache)."""
    _, cache = forward(model, graph, rng=rng, return_cache=True)
    resid = cache["y"] - target
    loss = float(np.mean(resid ** 2))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    grads = backward(model, cache, 2.0 * resid / resid.size)
    return loss, grads, cache
