"""Masked denoising autoencoder over fused expression/spatial features.

Architecture ``2G -> 512 -> 256 -> 512 -> G`` with ReLU everywhere and
dropout between the two encoder layers. Training zeroes a random fraction of
the diffused expression entries per batch and reconstructs the clean rows;
gradients are computed by hand and applied with Adam.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import (
    ATTENTION_TENSORS,
    AttentionParams,
    fuse,
    init_attention,
    spatial_backward,
    spatial_features,
    spatial_forward,
)
from .data import Dataset, ExpressionMatrix, SpatialCoords
from .seeding import stage_rng

logger = logging.getLogger(__name__)

AE_TENSORS = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")
MAGIC = b"SPMAGIC1"
INFER_BLOCK = 4096


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class AutoencoderParams:
    tensors: dict[str, np.ndarray]
    dropout_rate: float = 0.1

    def __post_init__(self):
        missing = [k for k in AE_TENSORS if k not in self.tensors]
        if missing:
            raise ValueError(f"autoencoder parameters missing {missing}")
        t = self.tensors
        chain = [(t["w1"], t["b1"]), (t["w2"], t["b2"]), (t["w3"], t["b3"]), (t["w4"], t["b4"])]
        for i, (w, b) in enumerate(chain, 1):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 1 and chain[i - 2][0].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input width {w.shape[0]} != previous output {chain[i - 2][0].shape[1]}")
        if t["w1"].shape[0] != 2 * t["w4"].shape[1]:
            raise ValueError("encoder input width must be twice the decoder output width")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        for name, v in t.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"autoencoder parameter {name} is not finite")

    @property
    def n_genes(self) -> int:
        return self.tensors["w4"].shape[1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def astype(self, dtype) -> "AutoencoderParams":
        return AutoencoderParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.dropout_rate)


def init_autoencoder(
    n_genes: int,
    hidden: int = 512,
    latent: int = 256,
    decoder_hidden: int = 512,
    dropout_rate: float = 0.1,
    rng: np.random.Generator | int | None = None,
    dtype=np.float32,
) -> AutoencoderParams:
    rng = np.random.default_rng(rng)
    sizes = [2 * n_genes, hidden, latent, decoder_hidden, n_genes]
    t = {}
    for i in range(4):
        bound = 1.0 / np.sqrt(sizes[i])
        t[f"w{i + 1}"] = rng.uniform(-bound, bound, (sizes[i], sizes[i + 1])).astype(dtype)
        t[f"b{i + 1}"] = rng.uniform(-bound, bound, sizes[i + 1]).astype(dtype)
    return AutoencoderParams(t, dropout_rate)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _as_matrix(X):
    if isinstance(X, ExpressionMatrix):
        return X.dense()
    if hasattr(X, "matrix"):
        return X.matrix
    return np.asarray(X)


def _encode(X, p: AutoencoderParams, rng=None):
    if X.shape[1] != p["w1"].shape[0]:
        raise ValueError(f"fused input has {X.shape[1]} columns, encoder expects {p['w1'].shape[0]}")
    h1 = np.maximum(X @ p["w1"] + p["b1"], 0)
    keep = None
    if rng is not None and p.dropout_rate > 0:
        keep = (rng.random(h1.shape) >= p.dropout_rate).astype(h1.dtype) / h1.dtype.type(1 - p.dropout_rate)
        h1d = h1 * keep
    else:
        h1d = h1
    h2 = np.maximum(h1d @ p["w2"] + p["b2"], 0)
    return h2, (X, h1, keep, h1d, h2)


def _decode(h2, p: AutoencoderParams):
    if h2.shape[1] != p["w3"].shape[0]:
        raise ValueError(f"latent has {h2.shape[1]} columns, decoder expects {p['w3'].shape[0]}")
    h3 = np.maximum(h2 @ p["w3"] + p["b3"], 0)
    out = np.maximum(h3 @ p["w4"] + p["b4"], 0)
    return out, (h3, out)


def encoder_forward(X_fused, params: AutoencoderParams, training: bool = False, rng=None) -> np.ndarray:
    """Latent code ``h_2``. Dropout is applied only when ``training`` is set."""
    X = _as_matrix(X_fused)
    if training:
        rng = np.random.default_rng(rng)
    else:
        rng = None
    return _encode(X, params, rng)[0]


def decoder_forward(h2: np.ndarray, params: AutoencoderParams) -> np.ndarray:
    """Nonnegative reconstruction ``ReLU(ReLU(h2 W3 + b3) W4 + b4)``."""
    return _decode(h2, params)[0]


def autoencoder_forward(X_fused, params: AutoencoderParams, rng=None):
    h2, enc = _encode(_as_matrix(X_fused), params, rng)
    out, dec = _decode(h2, params)
    return out, enc + dec


def autoencoder_backward(d_out: np.ndarray, cache, params: AutoencoderParams):
    """Return ``(grads, d_input)`` for upstream gradient ``d_out`` on the reconstruction."""
    X, h1, keep, h1d, h2, h3, out = cache
    p = params
    g = {}
    d = d_out * (out > 0)
    g["w4"] = h3.T @ d
    g["b4"] = d.sum(axis=0)
    d = (d @ p["w4"].T) * (h3 > 0)
    g["w3"] = h2.T @ d
    g["b3"] = d.sum(axis=0)
    d = (d @ p["w3"].T) * (h2 > 0)
    g["w2"] = h1d.T @ d
    g["b2"] = d.sum(axis=0)
    d = d @ p["w2"].T
    if keep is not None:
        d = d * keep
    d = d * (h1 > 0)
    g["w1"] = X.T @ d
    g["b1"] = d.sum(axis=0)
    return {k: g[k] for k in AE_TENSORS}, d @ p["w1"].T


def mse_loss(X_hat: np.ndarray, target: np.ndarray) -> float:
    """Mean over rows of the squared Euclidean row error."""
    X_hat, target = _as_matrix(X_hat), _as_matrix(target)
    if X_hat.shape != target.shape:
        raise ValueError(f"shape mismatch: {X_hat.shape} vs {target.shape}")
    r = X_hat - target
    return float(np.einsum("ij,ij->", r, r, dtype=np.float64)) / X_hat.shape[0]


def make_mask(n: int, n_genes: int, p: float, seed=None, dtype=np.float32) -> np.ndarray:
    """Binary mask with each entry independently 0 with probability ``p``."""
    if not 0 < p < 1:
        raise ValueError(f"mask rate must be in (0, 1), got {p}")
    rng = np.random.default_rng(seed)
    return (rng.random((n, n_genes)) >= p).astype(dtype)


def corrupt(X_magic, mask: np.ndarray, H_proj: np.ndarray):
    """Mask the expression block only; the spatial block passes through."""
    X = _as_matrix(X_magic)
    if X.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match expression {X.shape}")
    return fuse(X * mask, H_proj)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingConfig:
    mask_rate: float = 0.2
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    joint_attention_training: bool = True
    dropout_rate: float = 0.1
    hidden: int = 512
    latent: int = 256
    decoder_hidden: int = 512
    embed_dim: int = 32
    heads: int = 2

    def __post_init__(self):
        if not 0 < self.mask_rate < 1:
            raise ValueError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim ({self.embed_dim}) must be a positive multiple of heads ({self.heads})")
        for key in ("hidden", "latent", "decoder_hidden"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            p = params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class ModelCheckpoint:
    attention: AttentionParams
    autoencoder: AutoencoderParams
    config: TrainingConfig
    metadata: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    @property
    def genes(self) -> Optional[list[str]]:
        return self.metadata.get("genes")

    def standardized_coords(self, coords: SpatialCoords) -> np.ndarray:
        mean = self.metadata.get("coord_mean")
        scale = self.metadata.get("coord_scale")
        return coords.standardize(mean, scale)[0]


def _param_norms(attention: AttentionParams, ae: AutoencoderParams) -> dict[str, float]:
    norms = {f"attention.{k}": float(np.linalg.norm(v)) for k, v in attention.tensors.items()}
    norms.update({f"autoencoder.{k}": float(np.linalg.norm(v)) for k, v in ae.tensors.items()})
    return norms


def train(
    dataset: Dataset,
    X_magic: ExpressionMatrix,
    config: TrainingConfig,
    metadata: Optional[dict] = None,
) -> ModelCheckpoint:
    """Mini-batch masked-denoising training of attention + autoencoder.

    Per batch: fresh Bernoulli mask, corrupted fused input, loss against the
    clean diffused rows, backward pass and one Adam step. With
    ``joint_attention_training`` the spatial features of the batch are
    recomputed from the current attention weights (queries are the batch,
    keys are all spots) and the attention tensors are updated too; otherwise
    they are computed once and sliced.

    The returned checkpoint carries the per-epoch mean loss in
    ``loss_history``.
    """
    dtype = np.float32
    X = X_magic.dense().astype(dtype)
    n, G = X.shape
    if dataset.n_spots != n:
        raise ValueError(f"dataset has {dataset.n_spots} spots, diffused matrix has {n}")
    S_std, mean, scale = dataset.coords.standardize()
    S_std = S_std.astype(dtype)

    init_rng = stage_rng(config.seed, "init")
    attention = init_attention(G, config.embed_dim, config.heads, rng=init_rng, dtype=dtype)
    ae = init_autoencoder(G, config.hidden, config.latent, config.decoder_hidden, config.dropout_rate, init_rng, dtype)
    shuffle_rng = stage_rng(config.seed, "shuffle")
    mask_rng = stage_rng(config.seed, "mask")
    dropout_rng = stage_rng(config.seed, "dropout")

    ae_opt = Adam(config.learning_rate)
    att_opt = Adam(config.learning_rate)
    joint = config.joint_attention_training
    H_proj_all = None if joint else spatial_features(S_std, attention)

    history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start : start + config.batch_size]
            Xb = X[rows]
            mask = make_mask(rows.size, G, config.mask_rate, mask_rng, dtype)
            if joint:
                Hb, att_cache = spatial_forward(S_std, attention, rows)
            else:
                Hb = H_proj_all[rows]
            fused = corrupt(Xb, mask, Hb)
            out, cache = autoencoder_forward(fused, ae, dropout_rng)
            resid = out - Xb
            loss = float(np.einsum("ij,ij->", resid, resid, dtype=np.float64)) / rows.size
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch + 1}, batch {b + 1}; "
                    f"parameter norms: {_param_norms(attention, ae)}"
                )
            total += loss * rows.size
            grads, d_fused = autoencoder_backward(resid * dtype(2.0 / rows.size), cache, ae)
            if joint:
                att_grads = spatial_backward(d_fused[:, G:], att_cache, attention)
                att_opt.step(attention.tensors, att_grads)
            ae_opt.step(ae.tensors, grads)
        history.append(total / n)
        logger.debug("epoch %d mean loss %.6g", epoch + 1, history[-1])

    meta = dict(metadata or {})
    meta.setdefault("genes", list(X_magic.gene_ids))
    meta["coord_mean"] = [float(v) for v in mean]
    meta["coord_scale"] = [float(v) for v in scale]
    return ModelCheckpoint(attention, ae, config, meta, history)


def infer(checkpoint: ModelCheckpoint, X_magic, coords: SpatialCoords) -> ExpressionMatrix | np.ndarray:
    """Evaluation-mode reconstruction from the clean fused features."""
    genes = checkpoint.genes
    if isinstance(X_magic, ExpressionMatrix) and genes is not None and list(X_magic.gene_ids) != list(genes):
        raise CheckpointError("gene set of the input does not match the checkpoint")
    X = _as_matrix(X_magic)
    if X.shape[1] != checkpoint.autoencoder.n_genes:
        raise CheckpointError(f"input has {X.shape[1]} genes, checkpoint expects {checkpoint.autoencoder.n_genes}")
    if X.shape[0] != len(coords):
        raise ValueError(f"{X.shape[0]} expression rows but {len(coords)} coordinates")
    dtype = checkpoint.autoencoder["w1"].dtype
    X = X.astype(dtype)
    S_std = checkpoint.standardized_coords(coords).astype(dtype)
    H_proj = spatial_features(S_std, checkpoint.attention)
    out = np.empty_like(X)
    for start in range(0, X.shape[0], INFER_BLOCK):
        rows = slice(start, start + INFER_BLOCK)
        fused = fuse(X[rows], H_proj[rows])
        out[rows] = decoder_forward(encoder_forward(fused, checkpoint.autoencoder), checkpoint.autoencoder)
    if isinstance(X_magic, ExpressionMatrix):
        return X_magic.with_values(out)
    return out


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------

def save_checkpoint(checkpoint: ModelCheckpoint, path) -> None:
    """Write ``SPMAGIC1`` | u64 header length | JSON header | float32 tensors.

    Tensors are stored row-major, little-endian, in header order. Extra
    arrays (e.g. PCA loadings) can be passed as ``metadata["arrays"]``.
    """
    meta = dict(checkpoint.metadata)
    arrays = meta.pop("arrays", {})
    tensors = [(f"attention.{k}", checkpoint.attention[k]) for k in ATTENTION_TENSORS]
    tensors += [(f"autoencoder.{k}", checkpoint.autoencoder[k]) for k in AE_TENSORS]
    tensors += [(f"meta.{k}", np.asarray(v)) for k, v in sorted(arrays.items())]
    header = {
        "format": MAGIC.decode(),
        "config": asdict(checkpoint.config),
        "heads": checkpoint.attention.heads,
        "dropout_rate": checkpoint.autoencoder.dropout_rate,
        "metadata": meta,
        "loss_history": list(checkpoint.loss_history),
        "tensors": [{"name": name, "shape": list(t.shape), "dtype": "<f4"} for name, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + length])
    offset = 16 + length
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[spec["name"]] = data.astype(np.float32).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    att = AttentionParams({k: tensors[f"attention.{k}"] for k in ATTENTION_TENSORS}, header["heads"])
    ae = AutoencoderParams({k: tensors[f"autoencoder.{k}"] for k in AE_TENSORS}, header["dropout_rate"])
    meta = dict(header["metadata"])
    extra = {k[5:]: v for k, v in tensors.items() if k.startswith("meta.")}
    if extra:
        meta["arrays"] = extra
    return ModelCheckpoint(att, ae, TrainingConfig(**header["config"]), meta, header["loss_history"])


def write_loss_history(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, loss in enumerate(history, 1):
            fh.write(f"{i},{loss!r}\n")


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckInstance:
    """Tiny double-precision problem exercising the full differentiable path."""

    X: np.ndarray
    S: np.ndarray
    mask: np.ndarray
    attention: AttentionParams
    autoencoder: AutoencoderParams
    target_scale: float = 1.0

    @classmethod
    def random(cls, n=8, n_genes=6, d_model=8, heads=2, hidden=16, latent=12, decoder_hidden=16, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.gamma(2.0, 0.5, (n, n_genes))
        S = rng.normal(size=(n, 2))
        mask = make_mask(n, n_genes, 0.2, rng, np.float64)
        att = init_attention(n_genes, d_model, heads, rng=rng, dtype=np.float64)
        # non-identity layer norms so their gradients are exercised
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            att.tensors[name] = att.tensors[name] + rng.normal(0, 0.3, d_model)
        ae = init_autoencoder(n_genes, hidden, latent, decoder_hidden, 0.0, rng, np.float64)
        return cls(X, S, mask, att, ae)

    def _tensors(self):
        out = {f"attention.{k}": v for k, v in self.attention.tensors.items()}
        out.update({f"autoencoder.{k}": v for k, v in self.autoencoder.tensors.items()})
        return out

    def loss(self) -> float:
        H_proj, _ = spatial_forward(self.S, self.attention)
        out, _ = autoencoder_forward(corrupt(self.X, self.mask, H_proj), self.autoencoder)
        return self.target_scale * mse_loss(out, self.X)

    def gradients(self) -> dict[str, np.ndarray]:
        H_proj, att_cache = spatial_forward(self.S, self.attention)
        out, cache = autoencoder_forward(corrupt(self.X, self.mask, H_proj), self.autoencoder)
        d_out = self.target_scale * 2.0 * (out - self.X) / self.X.shape[0]
        ae_grads, d_fused = autoencoder_backward(d_out, cache, self.autoencoder)
        att_grads = spatial_backward(d_fused[:, self.X.shape[1]:], att_cache, self.attention)
        grads = {f"attention.{k}": v for k, v in att_grads.items()}
        grads.update({f"autoencoder.{k}": v for k, v in ae_grads.items()})
        return grads

    def numerical_gradients(self, eps: float = 1e-5) -> dict[str, np.ndarray]:
        grads = {}
        for name, t in self._tensors().items():
            g = np.zeros_like(t)
            flat, gflat = t.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = self.loss()
                flat[i] = orig - eps
                down = self.loss()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads[name] = g
        return grads


def gradient_errors(
    instance: GradCheckInstance | None = None, eps: float = 1e-5, floor: float = 1e-10
) -> dict[str, float]:
    """Per-tensor relative error ``|a - f| / max(|a|, |f|, floor)`` (Frobenius norms).

    The floor keeps identically-zero gradients (the key bias cancels inside
    the softmax) from turning rounding noise into a relative error of 1.
    """
    instance = GradCheckInstance.random() if instance is None else instance
    analytic = instance.gradients()
    numeric = instance.numerical_gradients(eps)
    errors = {}
    for name, a in analytic.items():
        f = numeric[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(f), floor)
        errors[name] = float(np.linalg.norm(a - f) / denom)
    return errors


def check_gradients(instance: GradCheckInstance | None = None, eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    return max(gradient_errors(instance, eps).values())
