"""Spatial transcriptomics imputation by kNN-graph diffusion, coordinate self-attention
and a masked denoising autoencoder, with ARI-based evaluation."""

from .config import RunConfig
from .data import Dataset, ExpressionMatrix, SpatialCoords, load_dataset, preprocess
from .diffusion import DiffusionOperator, build_operator, diffuse
from .evaluation import (
    SyntheticSpec,
    adjusted_rand_index,
    generate_synthetic,
    kmeans_cluster,
    run_benchmark,
)
from .model import ModelCheckpoint, TrainingConfig, infer, load_checkpoint, save_checkpoint, train
from .pipeline import run_imputation

__all__ = [
    "Dataset",
    "DiffusionOperator",
    "ExpressionMatrix",
    "ModelCheckpoint",
    "RunConfig",
    "SpatialCoords",
    "SyntheticSpec",
    "TrainingConfig",
    "adjusted_rand_index",
    "build_operator",
    "diffuse",
    "generate_synthetic",
    "infer",
    "kmeans_cluster",
    "load_checkpoint",
    "load_dataset",
    "preprocess",
    "run_benchmark",
    "run_imputation",
    "save_checkpoint",
    "train",
]
