"""Adaptive-kernel kNN graph and Markov diffusion of expression values."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import io as spio
from scipy import sparse

from .data import ExpressionMatrix

logger = logging.getLogger(__name__)

# below this many spots the transition matrix is applied densely
DENSE_LIMIT = 512


class GraphError(ValueError):
    pass


class IsolatedSpotError(GraphError):
    def __init__(self, row: int, spot_id: str | None = None):
        self.row = row
        self.spot_id = spot_id
        name = f"spot {spot_id!r} (row {row})" if spot_id is not None else f"row {row}"
        super().__init__(f"{name} has no graph neighbours (zero degree)")


@dataclass(frozen=True)
class PcaProjection:
    components: np.ndarray  # genes x d loadings, orthonormal columns
    means: np.ndarray
    projected: np.ndarray  # spots x d
    bypassed: bool = False

    @property
    def n_components(self) -> int:
        return self.projected.shape[1]


def _as_array(X) -> np.ndarray:
    if isinstance(X, ExpressionMatrix):
        return X.dense()
    return np.asarray(X, dtype=np.float64)


def pca_project(X_d, d: int = 100) -> PcaProjection:
    """Project onto the top ``d`` principal components.

    When the matrix has no more than ``d`` columns the projection is skipped
    and the input is returned as-is. Component signs are fixed so the largest
    absolute loading of every component is positive.
    """
    if d <= 0:
        raise ValueError(f"number of principal components must be positive, got {d}")
    X = _as_array(X_d)
    n, g = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two spots")
    if g <= d:
        return PcaProjection(np.eye(g), np.zeros(g), X.copy(), bypassed=True)
    d = min(d, n)
    means = X.mean(axis=0)
    centered = X - means
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:d].T
    pivot = np.abs(comps).argmax(axis=0)
    signs = np.sign(comps[pivot, np.arange(d)])
    signs[signs == 0] = 1.0
    comps = comps * signs
    return PcaProjection(comps, means, centered @ comps)


@dataclass(frozen=True)
class NeighborGraph:
    neighbors: np.ndarray  # n x m indices, nearest first
    distances: np.ndarray  # n x m Euclidean distances, ascending
    bandwidths: np.ndarray  # per-spot sigma
    k: int

    @property
    def n_spots(self) -> int:
        return self.neighbors.shape[0]


def nearest_neighbors(Z: np.ndarray, m: int, block: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``m`` nearest neighbours of every row of ``Z`` excluding itself.

    Candidates come from blocked squared-distance expansions; the reported
    distances are recomputed from coordinate differences. Ties are broken by
    index.
    """
    n = Z.shape[0]
    sq = np.einsum("ij,ij->i", Z, Z)
    neighbors = np.empty((n, m), dtype=np.int64)
    distances = np.empty((n, m))
    for start in range(0, n, block):
        rows = np.arange(start, min(start + block, n))
        d2 = sq[rows, None] + sq[None, :] - 2.0 * (Z[rows] @ Z.T)
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(rows.size), rows] = np.inf
        if m < n - 1:
            cand = np.argpartition(d2, m - 1, axis=1)[:, :m]
        else:
            cand = np.argsort(d2, axis=1, kind="stable")[:, :m]
        exact = np.sqrt(((Z[rows][:, None, :] - Z[cand]) ** 2).sum(axis=2))
        order = np.lexsort((cand, exact), axis=-1)
        neighbors[rows] = np.take_along_axis(cand, order, axis=1)
        distances[rows] = np.take_along_axis(exact, order, axis=1)
    return neighbors, distances


def _bandwidths(distances: np.ndarray, k: int) -> np.ndarray:
    sigma = np.median(distances[:, :k], axis=1)
    for i in np.flatnonzero(sigma <= 0):
        positive = distances[i][distances[i] > 0]
        sigma[i] = positive.min() if positive.size else 1.0
    return sigma


def build_knn_graph(Z, k: int = 5, k_max: int = 15) -> NeighborGraph:
    """Exact kNN graph with up to ``k_max`` neighbours per spot.

    The bandwidth of each spot is the median distance to its ``k`` nearest
    neighbours. A zero median (duplicated spots) falls back to the smallest
    positive neighbour distance, or 1 if every neighbour is a duplicate.
    """
    if isinstance(Z, PcaProjection):
        Z = Z.projected
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if k < 1 or k_max < k:
        raise GraphError(f"need 1 <= k <= k_max, got k={k}, k_max={k_max}")
    if n <= k:
        raise GraphError(f"kNN graph with k={k} needs more than {k} spots, got {n}")
    m = min(k_max, n - 1)
    neighbors, distances = nearest_neighbors(Z, m)
    return NeighborGraph(neighbors, distances, _bandwidths(distances, k), k)


def affinity_matrix(graph: NeighborGraph, alpha: float = 1.0) -> sparse.csr_matrix:
    """Directed Gaussian affinities ``exp(-d^2 / (2 sigma_i^2)) ** alpha`` on kNN edges."""
    sigma = graph.bandwidths
    if np.any(~(sigma > 0)):
        raise GraphError("kernel bandwidths must be positive")
    n, m = graph.neighbors.shape
    vals = np.exp(-(graph.distances**2) / (2.0 * sigma[:, None] ** 2)) ** alpha
    # keep the edge structural even if the kernel underflows
    vals = np.maximum(vals, np.finfo(np.float64).tiny)
    rows = np.repeat(np.arange(n), m)
    return sparse.csr_matrix((vals.ravel(), (rows, graph.neighbors.ravel())), shape=(n, n))


def symmetrize(A):
    """``(A + A^T) / 2``; exactly symmetric because addition commutes."""
    if A.shape[0] != A.shape[1]:
        raise GraphError(f"affinity matrix must be square, got {A.shape}")
    if sparse.issparse(A):
        A = sparse.csr_matrix(A)
        return sparse.csr_matrix((A + A.T) * 0.5)
    A = np.asarray(A, dtype=np.float64)
    return (A + A.T) * 0.5


@dataclass(frozen=True)
class DiffusionOperator:
    transition: sparse.csr_matrix
    steps: int = 3
    k: int = 5
    k_max: int = 15
    alpha: float = 1.0

    @property
    def n_spots(self) -> int:
        return self.transition.shape[0]

    def dump(self, path) -> None:
        """Write the transition matrix as MatrixMarket for inspection."""
        spio.mmwrite(str(Path(path)), self.transition, precision=17)


def row_normalize(W, steps: int = 3, spot_ids=None, k: int = 5, k_max: int = 15, alpha: float = 1.0) -> DiffusionOperator:
    W = sparse.csr_matrix(W, dtype=np.float64)
    deg = np.asarray(W.sum(axis=1)).ravel()
    zero = np.flatnonzero(deg <= 0)
    if zero.size:
        row = int(zero[0])
        raise IsolatedSpotError(row, None if spot_ids is None else spot_ids[row])
    P = sparse.csr_matrix(sparse.diags(1.0 / deg) @ W)
    return DiffusionOperator(P, steps, k, k_max, alpha)


def diffuse(op: DiffusionOperator, X_d):
    """Apply ``op.steps`` random-walk steps to the expression matrix.

    The power of the transition matrix is never formed; each step is one
    sparse (or, for small graphs, dense) matrix product.
    """
    expr = X_d if isinstance(X_d, ExpressionMatrix) else None
    X = _as_array(X_d)
    if X.shape[0] != op.n_spots:
        raise GraphError(f"operator has {op.n_spots} spots, expression has {X.shape[0]}")
    if op.steps < 0:
        raise GraphError(f"diffusion steps must be nonnegative, got {op.steps}")
    P = op.transition.toarray() if op.n_spots <= DENSE_LIMIT else op.transition
    out = X
    for _ in range(op.steps):
        out = P @ out
    out = np.asarray(out)
    if expr is None:
        return out
    # convex combinations of nonnegative values can still round to -0.0 or tiny negatives
    return expr.with_values(np.maximum(out, 0.0))


def build_operator(
    X_d,
    pca_dims: int = 100,
    k: int = 5,
    k_max: int = 15,
    alpha: float = 1.0,
    steps: int = 3,
) -> tuple[DiffusionOperator, PcaProjection]:
    """PCA -> kNN -> affinity -> symmetrize -> row-normalize."""
    pca = pca_project(X_d, pca_dims)
    graph = build_knn_graph(pca.projected, k, k_max)
    W = symmetrize(affinity_matrix(graph, alpha))
    spot_ids = X_d.spot_ids if isinstance(X_d, ExpressionMatrix) else None
    return row_normalize(W, steps, spot_ids, k, k_max, alpha), pca
