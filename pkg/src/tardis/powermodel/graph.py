"""k-nearest-neighbour job graphs with symmetric GCN normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

_ROW_CHUNK = 256


@dataclass(frozen=True)
class JobGraph:
    """Undirected graph over jobs.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``;
    ``alpha`` is the matching normalisation 1/sqrt((deg_i+1)(deg_j+1)).
    ``adjacency`` is the full normalised propagation matrix including the
    self-loop weights 1/(deg_i+1).
    """

    features: np.ndarray
    edges: np.ndarray
    alpha: np.ndarray
    adjacency: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=int)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        return deg


def knn_indices(features: np.ndarray, k: int) -> np.ndarray:
    """Row i lists the min(k, n-1) nearest other rows, nearer first.

    Distances are exact Euclidean; equal distances resolve to the lower index.
    """
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    kk = min(k, n - 1)
    if kk <= 0:
        return np.zeros((n, 0), dtype=int)
    out = np.empty((n, kk), dtype=int)
    for lo in range(0, n, _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, n)
        diff = x[lo:hi, None, :] - x[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        dist[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = np.argsort(dist, axis=1, kind="stable")[:, :kk]
    return out


def normalized_adjacency(n: int, edges: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    deg = np.zeros(n, dtype=float)
    if len(edges):
        np.add.at(deg, edges[:, 0], 1)
        np.add.at(deg, edges[:, 1], 1)
    inv = 1.0 / np.sqrt(deg + 1.0)
    if len(edges):
        alpha = inv[edges[:, 0]] * inv[edges[:, 1]]
        rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
        cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
        vals = np.concatenate([alpha, alpha, inv * inv])
    else:
        alpha = np.zeros(0)
        rows = cols = np.arange(n)
        vals = inv * inv
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return adj, alpha


def graph_from_edges(features: np.ndarray, edges) -> JobGraph:
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    e = np.asarray(edges, dtype=int).reshape(-1, 2)
    if len(e):
        e = np.sort(e, axis=1)
        if np.any(e[:, 0] == e[:, 1]):
            raise ValueError("self-edges are not allowed")
        e = np.unique(e, axis=0)
    adj, alpha = normalized_adjacency(n, e)
    return JobGraph(features, e, alpha, adj)


def build_knn_graph(features: np.ndarray, k: int) -> JobGraph:
    """Union-symmetrised kNN graph on the given (standardised) features."""
    if k < 1:
        raise ValueError("k must be >= 1")
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if n == 0:
        raise ValueError("graph needs at least one node")
    nbrs = knn_indices(features, k)
    if nbrs.size:
        src = np.repeat(np.arange(n), nbrs.shape[1])
        edges = np.stack([src, nbrs.ravel()], axis=1)
    else:
        edges = np.zeros((0, 2), dtype=int)
    return graph_from_edges(features, edges)
