"""End-to-end imputation: preprocess, diffuse, train, reconstruct."""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

from .config import RunConfig
from .data import Dataset, ExpressionMatrix, preprocess
from .diffusion import DiffusionOperator, PcaProjection, build_operator, diffuse
from .model import ModelCheckpoint, infer, train

logger = logging.getLogger(__name__)


@contextmanager
def timed(timings: dict, stage: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = time.perf_counter() - start
        logger.info("%s: %.2fs", stage, timings[stage])


@dataclass
class DiffusionResult:
    X_d: ExpressionMatrix
    normalization_target: float
    operator: DiffusionOperator
    pca: PcaProjection
    X_magic: ExpressionMatrix
    timings: dict = field(default_factory=dict)


@dataclass
class ImputationResult:
    diffusion: DiffusionResult
    checkpoint: ModelCheckpoint
    imputed: ExpressionMatrix
    timings: dict = field(default_factory=dict)


def run_diffusion(dataset: Dataset, cfg: RunConfig) -> DiffusionResult:
    timings: dict = {}
    with timed(timings, "preprocess"):
        pre = preprocess(dataset.expression, cfg.hvg_count)
    with timed(timings, "diffusion"):
        op, pca = build_operator(pre.matrix, cfg.pca_dims, cfg.knn_k, cfg.knn_max, cfg.alpha, cfg.diffusion_t)
        X_magic = diffuse(op, pre.matrix)
    return DiffusionResult(pre.matrix, pre.normalization_target, op, pca, X_magic, timings)


def checkpoint_metadata(diff: DiffusionResult, cfg: RunConfig) -> dict:
    return {
        "genes": list(diff.X_d.gene_ids),
        "normalization_target": diff.normalization_target,
        "diffusion": {
            "pca_dims": cfg.pca_dims,
            "pca_bypassed": diff.pca.bypassed,
            "knn_k": cfg.knn_k,
            "knn_max": cfg.knn_max,
            "alpha": cfg.alpha,
            "steps": cfg.diffusion_t,
        },
        "arrays": {"pca_components": diff.pca.components, "pca_means": diff.pca.means},
    }


def run_imputation(dataset: Dataset, cfg: RunConfig, diff: Optional[DiffusionResult] = None) -> ImputationResult:
    diff = run_diffusion(dataset, cfg) if diff is None else diff
    timings = dict(diff.timings)
    with timed(timings, "train"):
        ckpt = train(dataset, diff.X_magic, cfg.training_config(), checkpoint_metadata(diff, cfg))
    with timed(timings, "infer"):
        imputed = infer(ckpt, diff.X_magic, dataset.coords)
    return ImputationResult(diff, ckpt, imputed, timings)
