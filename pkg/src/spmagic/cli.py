"""Command-line entry point: ``impute``, ``simulate``, ``evaluate`` and ``benchmark``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_config, read_config_file
from .data import (
    DataError,
    load_dataset,
    read_expression,
    read_labels_csv,
    write_coords_csv,
    write_expression_csv,
    write_expression_mtx,
    write_labels_csv,
)
from .evaluation import (
    STRATEGIES,
    LabeledClustering,
    SyntheticSpec,
    adjusted_rand_index,
    generate_synthetic,
    kmeans_cluster,
    run_benchmark,
)
from .model import save_checkpoint, write_loss_history
from .pipeline import run_imputation
from .seeding import stage_rng

logger = logging.getLogger("spmagic")

CONFIG_HELP = {
    "hvg_count": "number of highly variable genes kept",
    "pca_dims": "principal components used for the kNN graph",
    "knn_k": "neighbours used for the kernel bandwidth",
    "knn_max": "maximum neighbours per spot",
    "alpha": "kernel decay exponent",
    "diffusion_t": "random-walk steps",
    "embed_dim": "coordinate embedding width",
    "heads": "attention heads",
    "mask_rate": "fraction of expression entries masked per batch",
    "batch_size": "mini-batch size",
    "learning_rate": "Adam learning rate",
    "epochs": "training epochs",
    "dropout_rate": "dropout between the encoder layers",
    "decoder_hidden": "decoder hidden width",
    "seed": "root random seed",
    "deterministic": "single-threaded, bitwise reproducible numerics",
    "freeze_attention": "keep attention weights at initialization during training",
}


class StageError(RuntimeError):
    pass


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("run configuration (flag > --config file > default)")
    group.add_argument("--config", type=Path, help="key = value config file")
    group.add_argument("--threads", type=int, help="BLAS threads (env SPMAGIC_THREADS)")
    group.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    defaults = RunConfig()
    for key, kind in RunConfig.field_types().items():
        flag = "--" + key.replace("_", "-")
        help_text = f"{CONFIG_HELP[key]} (default: {getattr(defaults, key)})"
        if kind is bool:
            group.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help_text)
        else:
            group.add_argument(flag, dest=key, type=kind, default=None, help=help_text)
    return parent


def _spec_args(parser: argparse.ArgumentParser, defaults: SyntheticSpec) -> None:
    g = parser.add_argument_group("synthetic dataset")
    g.add_argument("--n-spots", type=int, default=defaults.n_spots, help=f"(default: {defaults.n_spots})")
    g.add_argument("--n-genes", type=int, default=defaults.n_genes, help=f"(default: {defaults.n_genes})")
    g.add_argument("--n-clusters", type=int, default=defaults.n_clusters, help=f"(default: {defaults.n_clusters})")
    g.add_argument("--separation", type=float, default=defaults.cluster_separation,
                   help=f"log fold-change scale between clusters (default: {defaults.cluster_separation})")
    g.add_argument("--dropout", type=float, default=defaults.dropout_rate,
                   help=f"probability an entry is zeroed (default: {defaults.dropout_rate})")
    g.add_argument("--layout", choices=("blocks", "stripes"), default=defaults.spatial_layout,
                   help=f"(default: {defaults.spatial_layout})")


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="spmagic", description="Spatial expression imputation by graph diffusion and spatial attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("impute", parents=[parent], help="impute an expression matrix")
    p.add_argument("--expr", required=True, type=Path, help="expression .mtx or .csv")
    p.add_argument("--coords", required=True, type=Path, help="CSV with spot_id,x,y")
    p.add_argument("--format", choices=("matrix-market", "csv"), help="expression format (default: from suffix)")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--binary", action="store_true", help="write imputed.npz instead of imputed.csv")
    p.add_argument("--dump-operator", type=Path, help="write the transition matrix as MatrixMarket")

    p = sub.add_parser("simulate", parents=[parent], help="write a synthetic labelled dataset")
    _spec_args(p, SyntheticSpec())
    p.add_argument("--format", choices=("matrix-market", "csv"), default="csv", help="expression format (default: csv)")
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("evaluate", parents=[parent], help="cluster a matrix and print its ARI against labels")
    p.add_argument("--imputed", required=True, type=Path, help="matrix CSV (spot ids x genes) or .npz from impute --binary")
    p.add_argument("--labels", required=True, type=Path, help="CSV with spot_id,label")
    p.add_argument("--k", type=int, help="number of clusters (default: number of label classes)")

    p = sub.add_parser("benchmark", parents=[parent], help="compare imputation strategies by ARI")
    p.add_argument("--expr", type=Path, help="expression file (omit to use a synthetic dataset)")
    p.add_argument("--coords", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--format", choices=("matrix-market", "csv"))
    _spec_args(p, SyntheticSpec())
    p.add_argument("--strategies", default=",".join(STRATEGIES), help=f"comma-separated subset of {', '.join(STRATEGIES)}")
    p.add_argument("--seeds", default="0", help="comma-separated seeds (default: 0)")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    return parser


def _resolve_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {key: getattr(args, key) for key in RunConfig.field_types()}
    return build_config(file_values, overrides)


def _thread_limit(args, cfg: RunConfig):
    threads = args.threads
    if threads is None and os.environ.get("SPMAGIC_THREADS"):
        threads = int(os.environ["SPMAGIC_THREADS"])
    if cfg.deterministic:
        threads = 1
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def _spec_from_args(args, seed: int) -> SyntheticSpec:
    return SyntheticSpec(args.n_spots, args.n_genes, args.n_clusters, args.separation, args.dropout, args.layout, seed)


def cmd_impute(args, cfg: RunConfig) -> None:
    try:
        dataset = load_dataset(args.expr, args.coords, format=args.format)
    except (DataError, FileNotFoundError) as exc:
        raise StageError(f"load: {exc}") from exc
    try:
        result = run_imputation(dataset, cfg)
    except Exception as exc:
        raise StageError(f"impute: {exc}") from exc
    args.out.mkdir(parents=True, exist_ok=True)
    if args.dump_operator:
        result.diffusion.operator.dump(args.dump_operator)
    if args.binary:
        imp = result.imputed
        np.savez(args.out / "imputed.npz", values=imp.values, spot_ids=np.array(imp.spot_ids), gene_ids=np.array(imp.gene_ids))
    else:
        write_expression_csv(result.imputed, args.out / "imputed.csv")
    save_checkpoint(result.checkpoint, args.out / "model.ckpt")
    write_loss_history(result.checkpoint.loss_history, args.out / "loss.csv")
    for stage, seconds in result.timings.items():
        print(f"{stage}\t{seconds:.3f}s")


def cmd_simulate(args, cfg: RunConfig) -> None:
    try:
        spec = _spec_from_args(args, cfg.seed)
    except ValueError as exc:
        raise ConfigError("synthetic dataset", str(exc)) from exc
    ds = generate_synthetic(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.format == "matrix-market":
        write_expression_mtx(ds.expression, args.out)
    else:
        write_expression_csv(ds.expression, args.out / "expression.csv")
    write_coords_csv(ds.expression.spot_ids, ds.coords, args.out / "coords.csv")
    write_labels_csv(ds.expression.spot_ids, ds.labels, args.out / "labels.csv")


def _read_matrix(path: Path):
    if path.suffix == ".npz":
        with np.load(path) as z:
            return z["values"].astype(np.float64), [str(s) for s in z["spot_ids"]]
    expr = read_expression(path, "csv")
    return expr.dense(), list(expr.spot_ids)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    try:
        X, spot_ids = _read_matrix(args.imputed)
        truth = LabeledClustering.from_labels(read_labels_csv(args.labels, spot_ids))
    except (DataError, FileNotFoundError, KeyError) as exc:
        raise StageError(f"load: {exc}") from exc
    k = args.k if args.k is not None else truth.k
    if k < 1:
        raise ConfigError("k", f"{k} must be >= 1")
    pred = kmeans_cluster(X, k, stage_rng(cfg.seed, "kmeans").integers(2**63))
    print(f"ari={adjusted_rand_index(truth, pred):.6f}")


def cmd_benchmark(args, cfg: RunConfig) -> None:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad or not strategies:
        raise ConfigError("strategies", f"unknown strategies {bad}; choose from {', '.join(STRATEGIES)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("seeds", f"cannot parse {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    if args.expr:
        if not (args.coords and args.labels):
            raise ConfigError("labels", "--expr needs --coords and --labels")
        try:
            dataset = load_dataset(args.expr, args.coords, args.labels, args.format)
        except (DataError, FileNotFoundError) as exc:
            raise StageError(f"load: {exc}") from exc
    else:
        try:
            spec = _spec_from_args(args, cfg.seed)
        except ValueError as exc:
            raise ConfigError("synthetic dataset", str(exc)) from exc
        dataset = generate_synthetic(spec)
    report = run_benchmark(dataset, strategies, cfg, seeds)
    csv_path, md_path = report.write(args.out)
    sys.stdout.write(report.to_markdown())


COMMANDS = {
    "impute": cmd_impute,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        with _thread_limit(args, cfg):
            COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"spmagic {args.command}: {exc}", file=sys.stderr)
        return 2
    except (StageError, DataError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"spmagic {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
