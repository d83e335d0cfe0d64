"""Coordinate embedding, one-layer multi-head self-attention encoder and gene projection.

Every forward function has a matching backward so the encoder can be trained
jointly with the autoencoder. Parameters live in a flat ``dict`` of arrays,
which is also what the optimizer updates in place.

Encoder layer (post-norm)::

    E      = S W_e + b_e
    X1     = E + MHA(E)
    Y1     = LN1(X1)
    X2     = Y1 + FFN(Y1)        FFN = ReLU(. W_f1 + b_f1) W_f2 + b_f2
    H_attn = LN2(X2)
    H_proj = H_attn W_p + b_p
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ExpressionMatrix

LN_EPS = 1e-5
QUERY_BLOCK = 1024

ATTENTION_TENSORS = (
    "embed_w", "embed_b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b",
    "ff1_w", "ff1_b", "ff2_w", "ff2_b",
    "ln2_g", "ln2_b",
    "proj_w", "proj_b",
)


@dataclass
class AttentionParams:
    tensors: dict[str, np.ndarray]
    heads: int = 2

    def __post_init__(self):
        missing = [k for k in ATTENTION_TENSORS if k not in self.tensors]
        if missing:
            raise ValueError(f"attention parameters missing {missing}")
        if self.d_model % self.heads:
            raise ValueError(f"embedding dim {self.d_model} not divisible by {self.heads} heads")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ValueError(f"attention parameter {name} is not finite")

    @property
    def d_model(self) -> int:
        return self.tensors["embed_w"].shape[1]

    @property
    def n_genes(self) -> int:
        return self.tensors["proj_w"].shape[1]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def astype(self, dtype) -> "AttentionParams":
        return AttentionParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.heads)

    def copy(self) -> "AttentionParams":
        return AttentionParams({k: v.copy() for k, v in self.tensors.items()}, self.heads)


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_attention(
    n_genes: int,
    d_model: int = 32,
    heads: int = 2,
    d_ff: int | None = None,
    rng: np.random.Generator | int | None = None,
    dtype=np.float32,
) -> AttentionParams:
    """Uniform(+-1/sqrt(fan_in)) weights and biases; layer norms start at identity."""
    if d_model % heads:
        raise ValueError(f"embedding dim {d_model} not divisible by {heads} heads")
    rng = np.random.default_rng(rng)
    d_ff = 2 * d_model if d_ff is None else d_ff
    t = {
        "embed_w": _uniform(rng, 2, (2, d_model), dtype),
        "embed_b": _uniform(rng, 2, (d_model,), dtype),
    }
    for name in ("q", "k", "v", "o"):
        t[f"w{name}"] = _uniform(rng, d_model, (d_model, d_model), dtype)
        t[f"b{name}"] = _uniform(rng, d_model, (d_model,), dtype)
    t["ff1_w"] = _uniform(rng, d_model, (d_model, d_ff), dtype)
    t["ff1_b"] = _uniform(rng, d_model, (d_ff,), dtype)
    t["ff2_w"] = _uniform(rng, d_ff, (d_ff, d_model), dtype)
    t["ff2_b"] = _uniform(rng, d_ff, (d_model,), dtype)
    for ln in ("ln1", "ln2"):
        t[f"{ln}_g"] = np.ones(d_model, dtype=dtype)
        t[f"{ln}_b"] = np.zeros(d_model, dtype=dtype)
    t["proj_w"] = _uniform(rng, d_model, (d_model, n_genes), dtype)
    t["proj_b"] = _uniform(rng, d_model, (n_genes,), dtype)
    return AttentionParams({k: t[k] for k in ATTENTION_TENSORS}, heads)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def _layer_norm_backward(dy, cache):
    xhat, rstd, gain = cache
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _split_heads(x, heads):
    r, d = x.shape
    return x.reshape(r, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, r, dh = x.shape
    return x.transpose(1, 0, 2).reshape(r, h * dh)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def embed_coords(S: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Affine embedding of (already standardized) coordinates, one row per spot."""
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[1] != 2:
        raise ValueError(f"coordinates must be n x 2, got {S.shape}")
    return S @ params["embed_w"] + params["embed_b"]


def _encoder_forward(H, params: AttentionParams, rows=None, keys=None, keep_cache=False):
    """Encoder layer for query ``rows`` attending over ``keys`` (default: all spots)."""
    p = params
    Hq = H if rows is None else H[rows]
    Hk = H if keys is None else H[keys]
    scale = 1.0 / np.sqrt(p.head_dim)
    Q = _split_heads(Hq @ p["wq"] + p["bq"], p.heads)
    K = _split_heads(Hk @ p["wk"] + p["bk"], p.heads)
    V = _split_heads(Hk @ p["wv"] + p["bv"], p.heads)
    A = _softmax((Q @ K.transpose(0, 2, 1)) * scale)
    O = _merge_heads(A @ V)
    X1 = Hq + O @ p["wo"] + p["bo"]
    Y1, ln1 = _layer_norm(X1, p["ln1_g"], p["ln1_b"])
    F1 = np.maximum(Y1 @ p["ff1_w"] + p["ff1_b"], 0)
    X2 = Y1 + F1 @ p["ff2_w"] + p["ff2_b"]
    out, ln2 = _layer_norm(X2, p["ln2_g"], p["ln2_b"])
    if not keep_cache:
        return out, A
    cache = dict(Hq=Hq, Hk=Hk, Q=Q, K=K, V=V, A=A, O=O, ln1=ln1, Y1=Y1, F1=F1, ln2=ln2, scale=scale)
    return out, cache


def self_attention_encode(H: np.ndarray, params: AttentionParams, keys=None, block: int = QUERY_BLOCK) -> np.ndarray:
    """Run the encoder layer over every spot, processing queries in blocks.

    ``keys`` optionally restricts attention to a subset of landmark spots;
    by default every spot attends to all spots.
    """
    n = H.shape[0]
    if n < 1:
        raise ValueError("need at least one spot")
    if H.shape[1] != params.d_model:
        raise ValueError(f"embedding has width {H.shape[1]}, params expect {params.d_model}")
    out = np.empty_like(H)
    for start in range(0, n, block):
        rows = slice(start, min(start + block, n))
        out[rows], _ = _encoder_forward(H, params, np.arange(n)[rows], keys)
    return out


def attention_weights(H: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Per-head attention matrices, shape ``(heads, n, n)``."""
    _, A = _encoder_forward(H, params)
    return A


def project_to_genes(H_attn: np.ndarray, params: AttentionParams) -> np.ndarray:
    if H_attn.shape[1] != params.d_model:
        raise ValueError(f"encoded width {H_attn.shape[1]} does not match params ({params.d_model})")
    return H_attn @ params["proj_w"] + params["proj_b"]


def spatial_features(S_std: np.ndarray, params: AttentionParams, keys=None) -> np.ndarray:
    """Embed, encode and project coordinates for every spot."""
    H = embed_coords(S_std, params)
    return project_to_genes(self_attention_encode(H, params, keys), params)


@dataclass(frozen=True)
class FusedFeatures:
    matrix: np.ndarray  # n x 2G, expression block first

    @property
    def n_genes(self) -> int:
        return self.matrix.shape[1] // 2

    @property
    def expression(self) -> np.ndarray:
        return self.matrix[:, : self.n_genes]

    @property
    def spatial(self) -> np.ndarray:
        return self.matrix[:, self.n_genes:]


def fuse(X_magic, H_proj: np.ndarray) -> FusedFeatures:
    X = X_magic.dense() if isinstance(X_magic, ExpressionMatrix) else np.asarray(X_magic)
    if X.shape != H_proj.shape:
        raise ValueError(f"cannot fuse expression {X.shape} with spatial features {H_proj.shape}")
    dtype = np.result_type(X.dtype, H_proj.dtype)
    return FusedFeatures(np.concatenate([X.astype(dtype, copy=False), H_proj.astype(dtype, copy=False)], axis=1))


# ---------------------------------------------------------------------------
# training path: forward with cache + backward
# ---------------------------------------------------------------------------

def spatial_forward(S_std: np.ndarray, params: AttentionParams, rows=None):
    """``H_proj`` for query ``rows`` (all spots attend as keys) plus a backward cache."""
    H = embed_coords(S_std, params)
    H_attn, cache = _encoder_forward(H, params, rows, keep_cache=True)
    cache.update(S=S_std, rows=rows, H_attn=H_attn, n=H.shape[0])
    return project_to_genes(H_attn, params), cache


def spatial_backward(d_proj: np.ndarray, cache: dict, params: AttentionParams) -> dict[str, np.ndarray]:
    """Gradients of every attention tensor given the upstream gradient on ``H_proj``."""
    p = params
    g = {}
    g["proj_w"] = cache["H_attn"].T @ d_proj
    g["proj_b"] = d_proj.sum(axis=0)
    d = d_proj @ p["proj_w"].T

    d, g["ln2_g"], g["ln2_b"] = _layer_norm_backward(d, cache["ln2"])
    dY1 = d.copy()
    g["ff2_w"] = cache["F1"].T @ d
    g["ff2_b"] = d.sum(axis=0)
    dF1 = (d @ p["ff2_w"].T) * (cache["F1"] > 0)
    g["ff1_w"] = cache["Y1"].T @ dF1
    g["ff1_b"] = dF1.sum(axis=0)
    dY1 += dF1 @ p["ff1_w"].T

    dX1, g["ln1_g"], g["ln1_b"] = _layer_norm_backward(dY1, cache["ln1"])
    dHq = dX1.copy()
    g["wo"] = cache["O"].T @ dX1
    g["bo"] = dX1.sum(axis=0)
    dO = _split_heads(dX1 @ p["wo"].T, p.heads)

    A, Q, K, V, scale = cache["A"], cache["Q"], cache["K"], cache["V"], cache["scale"]
    dA = dO @ V.transpose(0, 2, 1)
    dV = A.transpose(0, 2, 1) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dQ = _merge_heads(dS @ K) * scale
    dK = _merge_heads(dS.transpose(0, 2, 1) @ Q) * scale
    dV = _merge_heads(dV)

    Hq, Hk = cache["Hq"], cache["Hk"]
    g["wq"] = Hq.T @ dQ
    g["bq"] = dQ.sum(axis=0)
    g["wk"] = Hk.T @ dK
    g["bk"] = dK.sum(axis=0)
    g["wv"] = Hk.T @ dV
    g["bv"] = dV.sum(axis=0)
    dHq += dQ @ p["wq"].T
    dH = dK @ p["wk"].T + dV @ p["wv"].T
    rows = cache["rows"]
    if rows is None:
        dH += dHq
    else:
        dH[rows] += dHq  # batch rows are unique

    S = cache["S"]
    g["embed_w"] = S.T.astype(dH.dtype) @ dH
    g["embed_b"] = dH.sum(axis=0)
    return {k: g[k] for k in ATTENTION_TENSORS}
