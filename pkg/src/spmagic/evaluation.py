"""Clustering accuracy: k-means, adjusted Rand index, synthetic data, benchmark harness."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .attention import spatial_features
from .config import RunConfig
from .data import Dataset, ExpressionMatrix, SpatialCoords
from .diffusion import pca_project
from .pipeline import run_diffusion, run_imputation
from .seeding import stage_rng

logger = logging.getLogger(__name__)

STRATEGIES = ("raw", "diffusion-only", "attention-pca-fusion", "full-hybrid")
CLUSTER_PCS = 50


@dataclass(frozen=True)
class LabeledClustering:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ValueError("labels must be one-dimensional")
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")
        if np.unique(labels).size != self.k:
            raise ValueError("every label class must be nonempty")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels) -> "LabeledClustering":
        """Relabel arbitrary integer labels to ``0..k-1`` in sorted order."""
        uniq, inverse = np.unique(np.asarray(labels), return_inverse=True)
        return cls(inverse.reshape(-1), uniq.size)

    def __len__(self) -> int:
        return self.labels.size


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _sq_dists(X, centers):
    d = (X * X).sum(1)[:, None] + (centers * centers).sum(1)[None, :] - 2.0 * X @ centers.T
    return np.maximum(d, 0.0)


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_dists(X, X[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), idx)))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(X, X[[nxt]])[:, 0])
    return X[idx].copy()


def lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int = 300):
    """Lloyd iterations from ``centers``.

    Returns ``(labels, centers, wcss_history)`` where the history holds the
    within-cluster sum of squares after every assignment step. An emptied
    cluster is re-seeded at the point farthest from its current centre.
    """
    centers = centers.copy()
    k = centers.shape[0]
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(X, centers)
        new = d.argmin(axis=1)
        point_cost = d[np.arange(X.shape[0]), new]
        history.append(float(point_cost.sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c]:
                centers[c] = X[labels == c].mean(axis=0)
        for c in np.flatnonzero(counts == 0):
            far = int(point_cost.argmax())
            centers[c] = X[far]
            point_cost[far] = 0.0
    return labels, centers, history


def cluster_features(X: np.ndarray, n_components: int = CLUSTER_PCS) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] > n_components and X.shape[0] >= 2:
        return pca_project(X, n_components).projected
    return X


def kmeans_cluster(X, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> LabeledClustering:
    """Best-of-``restarts`` k-means++/Lloyd clustering on the top principal components."""
    X = X.dense() if isinstance(X, ExpressionMatrix) else np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    feats = cluster_features(X)
    rng = np.random.default_rng(seed)
    best, best_cost = None, np.inf
    for _ in range(max(restarts, 1)):
        labels, _, history = lloyd(feats, kmeans_plus_plus(feats, k, rng), max_iter)
        if history[-1] < best_cost:
            best, best_cost = labels, history[-1]
    return LabeledClustering.from_labels(best)


# ---------------------------------------------------------------------------
# adjusted Rand index
# ---------------------------------------------------------------------------

def _pairs(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def _codes(x: np.ndarray) -> tuple[np.ndarray, int]:
    if np.issubdtype(x.dtype, np.integer) and x.min() >= 0 and x.max() < 4 * x.size:
        return x.astype(np.int64, copy=False), int(x.max()) + 1
    uniq, inverse = np.unique(x, return_inverse=True)
    return inverse.ravel(), uniq.size


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected pair agreement between two partitions of the same items.

    Evaluated as one ratio of integers, so rational results such as -1/2 are
    exact. Returns 1.0 when both partitions are trivial (zero denominator).
    """
    a = a.labels if isinstance(a, LabeledClustering) else np.asarray(a)
    b = b.labels if isinstance(b, LabeledClustering) else np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        return 1.0
    ai, ka = _codes(a)
    bi, kb = _codes(b)
    table = np.bincount(ai * kb + bi, minlength=ka * kb).reshape(ka, kb)
    index = int(_pairs(table).sum())
    sum_a = int(_pairs(table.sum(axis=1)).sum())
    sum_b = int(_pairs(table.sum(axis=0)).sum())
    total = n * (n - 1) // 2
    # (index - E) / (max - E) with E = sum_a sum_b / total, max = (sum_a + sum_b) / 2
    num = 2 * (total * index - sum_a * sum_b)
    den = total * (sum_a + sum_b) - 2 * sum_a * sum_b
    if den == 0:
        return 1.0
    return num / den


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_spots: int = 600
    n_genes: int = 100
    n_clusters: int = 3
    cluster_separation: float = 1.0
    dropout_rate: float = 0.5
    spatial_layout: str = "blocks"
    seed: int = 0

    def __post_init__(self):
        if self.n_spots < 1 or self.n_genes < 1 or self.n_clusters < 1:
            raise ValueError("n_spots, n_genes and n_clusters must be positive")
        if self.n_clusters > self.n_spots:
            raise ValueError("n_clusters cannot exceed n_spots")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.cluster_separation < 0:
            raise ValueError("cluster_separation must be nonnegative")
        if self.spatial_layout not in ("blocks", "stripes"):
            raise ValueError(f"unknown spatial layout {self.spatial_layout!r}")


def _regions(n_clusters: int, layout: str) -> list[tuple[float, float, float, float]]:
    """Disjoint axis-aligned rectangles ``(x0, x1, y0, y1)`` tiling the unit square."""
    if layout == "stripes":
        return [(c / n_clusters, (c + 1) / n_clusters, 0.0, 1.0) for c in range(n_clusters)]
    rows = max(1, int(np.floor(np.sqrt(n_clusters))))
    per_row = [n_clusters // rows + (r < n_clusters % rows) for r in range(rows)]
    boxes = []
    for r, cols in enumerate(per_row):
        for c in range(cols):
            boxes.append((c / cols, (c + 1) / cols, r / rows, (r + 1) / rows))
    return boxes


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Poisson counts around per-cluster archetypes, spatially contiguous clusters, random dropout.

    Each cluster's archetype multiplies a shared gene baseline by log-normal
    fold changes of scale ``cluster_separation``. Spots get a log-normal
    library size, so normalization matters.
    """
    rng = stage_rng(spec.seed, "synthetic")
    n, g, k = spec.n_spots, spec.n_genes, spec.n_clusters
    labels = np.repeat(np.arange(k), [n // k + (c < n % k) for c in range(k)])
    coords = np.empty((n, 2))
    for c, (x0, x1, y0, y1) in enumerate(_regions(k, spec.spatial_layout)):
        rows = labels == c
        coords[rows, 0] = rng.uniform(x0, x1, rows.sum())
        coords[rows, 1] = rng.uniform(y0, y1, rows.sum())
    coords *= 1000.0  # platform-like units

    base = rng.gamma(2.0, 1.5, g)
    archetypes = base * np.exp(spec.cluster_separation * rng.normal(size=(k, g)))
    library = rng.lognormal(0.0, 0.3, n)
    counts = rng.poisson(library[:, None] * archetypes[labels]).astype(np.float64)
    if spec.dropout_rate > 0:
        counts[rng.random(counts.shape) < spec.dropout_rate] = 0.0

    spot_ids = [f"spot_{i:05d}" for i in range(n)]
    gene_ids = [f"gene_{j:05d}" for j in range(g)]
    return Dataset(ExpressionMatrix(counts, spot_ids, gene_ids), SpatialCoords(coords), labels)


def drop_empty_spots(dataset: Dataset) -> Dataset:
    totals = np.asarray(dataset.expression.values.sum(axis=1)).ravel()
    keep = np.flatnonzero(totals > 0)
    if keep.size == dataset.n_spots:
        return dataset
    logger.warning("dropping %d spots with zero total expression", dataset.n_spots - keep.size)
    return dataset.subset(keep)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkRow:
    strategy: str
    seed: int
    ari: float
    seconds: float


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    strategies: tuple[str, ...]
    seeds: tuple[int, ...]
    config: dict = field(default_factory=dict)

    def scores(self, strategy: str) -> list[float]:
        return [r.ari for r in self.rows if r.strategy == strategy]

    def mean_ari(self, strategy: str) -> float:
        return float(np.mean(self.scores(strategy)))

    def mean_seconds(self, strategy: str) -> float:
        return float(np.mean([r.seconds for r in self.rows if r.strategy == strategy]))

    def summary(self) -> list[tuple[str, float, float, float]]:
        """One ``(strategy, mean_ari, std_ari, mean_seconds)`` row per strategy."""
        return [
            (s, self.mean_ari(s), float(np.std(self.scores(s))), self.mean_seconds(s))
            for s in self.strategies
        ]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("strategy,seed,ari,seconds\n")
            for r in self.rows:
                fh.write(f"{r.strategy},{r.seed},{r.ari!r},{r.seconds:.6f}\n")

    def to_markdown(self) -> str:
        lines = [
            "| strategy | mean ARI | std ARI | mean seconds |",
            "|---|---|---|---|",
        ]
        for s, mean, std, secs in self.summary():
            lines.append(f"| {s} | {mean:.4f} | {std:.4f} | {secs:.2f} |")
        lines.append("")
        lines.append(f"Seeds: {', '.join(map(str, self.seeds))}. The UMAP-based attention baseline is not included.")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path, md_path = directory / "benchmark.csv", directory / "benchmark.md"
        self.to_csv(csv_path)
        md_path.write_text(self.to_markdown())
        return csv_path, md_path


def run_benchmark(
    dataset: Dataset,
    strategies: Iterable[str] = STRATEGIES,
    config: Optional[RunConfig] = None,
    seeds: Sequence[int] = (0,),
) -> BenchmarkReport:
    """Cluster each strategy's features with k = #ground-truth classes and score by ARI.

    Preprocessing and diffusion are seed-independent and computed once; their
    cost is charged to every strategy that needs them. Training runs once per
    seed and is charged to both strategies that consume the trained model.
    """
    if dataset.labels is None:
        raise ValueError("benchmark needs ground-truth labels")
    strategies = tuple(dict.fromkeys(strategies))
    unknown = [s for s in strategies if s not in STRATEGIES]
    if not strategies or unknown:
        raise ValueError(f"unknown or empty strategy set: {unknown or strategies}")
    config = (config or RunConfig()).validate()
    dataset = drop_empty_spots(dataset)
    truth = LabeledClustering.from_labels(dataset.labels)

    start = time.perf_counter()
    diff = run_diffusion(dataset, config)
    diff_cost = time.perf_counter() - start
    pre_cost = diff.timings["preprocess"]

    rows = []
    for seed in seeds:
        cfg = RunConfig(**{**config.as_dict(), "seed": int(seed)})
        km_seed = stage_rng(seed, "kmeans").integers(2**63)
        result, train_cost = None, 0.0
        if {"attention-pca-fusion", "full-hybrid"} & set(strategies):
            start = time.perf_counter()
            result = run_imputation(dataset, cfg, diff)
            train_cost = time.perf_counter() - start
        for strategy in strategies:
            start = time.perf_counter()
            if strategy == "raw":
                feats, base = diff.X_d.dense(), pre_cost
            elif strategy == "diffusion-only":
                feats, base = diff.X_magic.dense(), diff_cost
            elif strategy == "attention-pca-fusion":
                ckpt = result.checkpoint
                H_proj = spatial_features(ckpt.standardized_coords(dataset.coords).astype(np.float32), ckpt.attention)
                feats = np.hstack([diff.X_d.dense(), H_proj.astype(np.float64)])
                base = pre_cost + train_cost
            else:
                feats, base = result.imputed.dense().astype(np.float64), diff_cost + train_cost
            pred = kmeans_cluster(feats, truth.k, km_seed)
            ari = adjusted_rand_index(truth, pred)
            rows.append(BenchmarkRow(strategy, int(seed), ari, base + time.perf_counter() - start))
            logger.info("seed %s %s: ARI %.4f", seed, strategy, ari)
    return BenchmarkReport(rows, strategies, tuple(int(s) for s in seeds), config.as_dict())
