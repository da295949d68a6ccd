"""Shared encoder with three heads, plus its exact reverse-mode gradients.

The encoder is a hashed character n-gram bag: text is lowercased, wrapped in
boundary markers, split into character n-grams, and each n-gram is hashed
with 64-bit FNV-1a into one of ``num_buckets`` embedding rows. The pooled
embedding runs through a two-layer GELU MLP; three linear heads produce the
in-domain logits, the language-ID logits, and an L2-normalized projection.

All operations preserve the dtype of the parameter tensors. Training uses
float32 (which round-trips bit-exactly through the f32 checkpoint format);
gradient checking uses float64 parameter sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .core import CheckpointError, NumericError, ValidationError

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

# tanh-form GELU constants
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class FeaturizerConfig:
    ngram_min: int = 1
    ngram_max: int = 3
    num_buckets: int = 2**18
    marker_prefix: str = "^"
    marker_suffix: str = "$"
    max_chars: int = 256

    def __post_init__(self):
        if not (1 <= self.ngram_min <= self.ngram_max <= 5):
            raise ValidationError(f"need 1 <= ngram_min <= ngram_max <= 5, got {self.ngram_min}..{self.ngram_max}")
        if self.num_buckets < 1 or (self.num_buckets & (self.num_buckets - 1)) != 0:
            raise ValidationError(f"num_buckets must be a power of two, got {self.num_buckets}")
        if self.max_chars < 1:
            raise ValidationError("max_chars must be positive")
        if len(self.marker_prefix) != 1 or len(self.marker_suffix) != 1:
            raise ValidationError("boundary markers must be single characters")


@dataclass(frozen=True)
class SparseFeatures:
    """Hashed n-gram counts: strictly increasing bucket indices, counts > 0."""

    indices: np.ndarray  # int64, sorted unique
    counts: np.ndarray  # float64, positive
    total_count: float

    @property
    def nnz(self) -> int:
        return len(self.indices)


_EMPTY_IDX = np.empty(0, dtype=np.int64)
_EMPTY_CNT = np.empty(0, dtype=np.float64)


def fnv1a64(data: bytes) -> int:
    """Reference 64-bit FNV-1a of a byte string."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _hash_fixed_width(mat: np.ndarray) -> np.ndarray:
    """Vectorized FNV-1a over the rows of a (m, width) uint8 matrix."""
    h = np.full(mat.shape[0], _FNV_OFFSET, dtype=np.uint64)
    for col in range(mat.shape[1]):
        h ^= mat[:, col].astype(np.uint64)
        h *= _FNV_PRIME
    return h


def featurize(text: str, cfg: FeaturizerConfig) -> SparseFeatures:
    """Hash the character n-grams of ``text`` into bucket counts.

    Lowercases, truncates to ``max_chars`` characters, wraps the result in
    the boundary markers, and hashes every n-gram for n in
    [ngram_min, ngram_max] over its UTF-8 bytes. Empty text produces an
    empty feature list.
    """
    if not text:
        return SparseFeatures(_EMPTY_IDX, _EMPTY_CNT, 0.0)
    wrapped = cfg.marker_prefix + text.lower()[: cfg.max_chars] + cfg.marker_suffix
    nbuckets = np.uint64(cfg.num_buckets)

    hashed: list[np.ndarray] = []
    if wrapped.isascii():
        arr = np.frombuffer(wrapped.encode("ascii"), dtype=np.uint8)
        for n in range(cfg.ngram_min, cfg.ngram_max + 1):
            if n > len(arr):
                continue
            windows = np.lib.stride_tricks.sliding_window_view(arr, n)
            hashed.append(_hash_fixed_width(windows) % nbuckets)
    else:
        # Non-ASCII: build byte strings per n-gram, then batch by byte width.
        by_width: dict[int, list[bytes]] = {}
        for n in range(cfg.ngram_min, cfg.ngram_max + 1):
            for i in range(len(wrapped) - n + 1):
                g = wrapped[i : i + n].encode("utf-8")
                by_width.setdefault(len(g), []).append(g)
        for width, grams in by_width.items():
            mat = np.frombuffer(b"".join(grams), dtype=np.uint8).reshape(-1, width)
            hashed.append(_hash_fixed_width(mat) % nbuckets)

    if not hashed:
        return SparseFeatures(_EMPTY_IDX, _EMPTY_CNT, 0.0)
    buckets = np.concatenate(hashed).astype(np.int64)
    indices, counts = np.unique(buckets, return_counts=True)
    return SparseFeatures(indices, counts.astype(np.float64), float(len(buckets)))


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 64
    d_hid: int = 128
    d_proj: int = 128

    def __post_init__(self):
        if min(self.d_emb, self.d_hid, self.d_proj) < 1:
            raise ValidationError("model dimensions must be positive")


@dataclass
class ModelParams:
    """All trainable tensors. Field order is the canonical tensor order."""

    embedding: np.ndarray  # (num_buckets, d_emb)
    mlp_w1: np.ndarray  # (d_emb, d_hid)
    mlp_b1: np.ndarray  # (d_hid,)
    mlp_w2: np.ndarray  # (d_hid, d_hid)
    mlp_b2: np.ndarray  # (d_hid,)
    indomain_w: np.ndarray  # (d_hid, 2)
    indomain_b: np.ndarray  # (2,)
    langid_w: np.ndarray  # (d_hid, n_langs)
    langid_b: np.ndarray  # (n_langs,)
    proj_w: np.ndarray  # (d_hid, d_proj)
    proj_b: np.ndarray  # (d_proj,)

    def named(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def n_langs(self) -> int:
        return self.langid_w.shape[1]


ParamGrads = ModelParams  # same container, one gradient tensor per parameter tensor

TENSOR_NAMES = tuple(f.name for f in fields(ModelParams))


def init_params(
    feat_cfg: FeaturizerConfig,
    model_cfg: ModelConfig,
    n_langs: int,
    seed: int,
    dtype=np.float32,
) -> ModelParams:
    """Seeded initialization: Xavier-uniform matrices, zero biases."""
    if n_langs < 2:
        raise ValidationError("need at least 2 in-domain languages")
    rng = np.random.default_rng(seed)
    d_emb, d_hid, d_proj = model_cfg.d_emb, model_cfg.d_hid, model_cfg.d_proj

    def mat(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)

    def vec(dim):
        return np.zeros(dim, dtype=dtype)

    return ModelParams(
        embedding=mat(feat_cfg.num_buckets, d_emb),
        mlp_w1=mat(d_emb, d_hid),
        mlp_b1=vec(d_hid),
        mlp_w2=mat(d_hid, d_hid),
        mlp_b2=vec(d_hid),
        indomain_w=mat(d_hid, 2),
        indomain_b=vec(2),
        langid_w=mat(d_hid, n_langs),
        langid_b=vec(n_langs),
        proj_w=mat(d_hid, d_proj),
        proj_b=vec(d_proj),
    )


def zeros_like_params(params: ModelParams) -> ParamGrads:
    return ModelParams(**{k: np.zeros_like(v) for k, v in params.named().items()})


@dataclass(frozen=True)
class ForwardOutputs:
    hidden: np.ndarray
    indomain_logits: np.ndarray
    langid_logits: np.ndarray
    projection: np.ndarray  # unit L2 norm


def _gelu(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


class _Trace:
    """Forward intermediates shared by the batched forward and backward."""

    __slots__ = ("pooled", "h1_pre", "a1", "h2_pre", "hidden", "raw", "raw_norm", "z")


def _pool(params: ModelParams, batch: list[SparseFeatures]) -> np.ndarray:
    dtype = params.embedding.dtype
    pooled = np.zeros((len(batch), params.embedding.shape[1]), dtype=dtype)
    for i, f in enumerate(batch):
        if f.nnz:
            w = f.counts.astype(dtype) / dtype.type(max(f.total_count, 1.0))
            pooled[i] = w @ params.embedding[f.indices]
    return pooled


def _run_forward(params: ModelParams, batch: list[SparseFeatures]) -> _Trace:
    t = _Trace()
    t.pooled = _pool(params, batch)
    t.h1_pre = t.pooled @ params.mlp_w1 + params.mlp_b1
    t.a1 = _gelu(t.h1_pre)
    t.h2_pre = t.a1 @ params.mlp_w2 + params.mlp_b2
    t.hidden = _gelu(t.h2_pre)
    t.raw = t.hidden @ params.proj_w + params.proj_b
    t.raw_norm = np.linalg.norm(t.raw, axis=1)
    t.z = np.zeros_like(t.raw)
    ok = t.raw_norm >= 1e-12
    t.z[ok] = t.raw[ok] / t.raw_norm[ok, None]
    t.z[~ok, 0] = 1.0  # degenerate guard: first basis vector
    return t


def forward(params: ModelParams, f: SparseFeatures) -> ForwardOutputs:
    """Single-example forward pass."""
    out = forward_batch(params, [f])
    return ForwardOutputs(
        hidden=out.hidden[0],
        indomain_logits=out.indomain_logits[0],
        langid_logits=out.langid_logits[0],
        projection=out.projection[0],
    )


def forward_batch(params: ModelParams, batch: list[SparseFeatures]) -> ForwardOutputs:
    """Batched forward pass; rows of each output correspond to ``batch``."""
    _check_dims(params)
    t = _run_forward(params, batch)
    return ForwardOutputs(
        hidden=t.hidden,
        indomain_logits=t.hidden @ params.indomain_w + params.indomain_b,
        langid_logits=t.hidden @ params.langid_w + params.langid_b,
        projection=t.z,
    )


def backward(
    params: ModelParams,
    batch: list[SparseFeatures],
    grad_indomain_logits: np.ndarray,
    grad_langid_logits: np.ndarray,
    grad_z: np.ndarray,
) -> ParamGrads:
    """Exact gradients of sum_i <grads_i, outputs_i> w.r.t. every parameter.

    ``grad_z`` is taken in the normalized space; the normalization Jacobian
    is applied here. The forward pass is recomputed internally.
    """
    _check_dims(params)
    n = len(batch)
    for name, g in (
        ("indomain_logits", grad_indomain_logits),
        ("langid_logits", grad_langid_logits),
        ("z", grad_z),
    ):
        if g.shape[0] != n:
            raise ValidationError(f"grad for {name} has {g.shape[0]} rows, batch has {n}")
        bad = ~np.isfinite(g).reshape(n, -1).all(axis=1)
        if bad.any():
            raise NumericError(f"non-finite gradient w.r.t. {name} at example {int(np.argmax(bad))}")

    t = _run_forward(params, batch)
    g = zeros_like_params(params)

    # Through the normalization: dL/draw = (g_z - (g_z . z) z) / ||raw||.
    ok = t.raw_norm >= 1e-12
    g_raw = np.zeros_like(t.raw)
    dots = np.sum(grad_z * t.z, axis=1, keepdims=True)
    g_raw[ok] = (grad_z[ok] - dots[ok] * t.z[ok]) / t.raw_norm[ok, None]

    g.proj_w += t.hidden.T @ g_raw
    g.proj_b += g_raw.sum(axis=0)
    g.indomain_w += t.hidden.T @ grad_indomain_logits
    g.indomain_b += grad_indomain_logits.sum(axis=0)
    g.langid_w += t.hidden.T @ grad_langid_logits
    g.langid_b += grad_langid_logits.sum(axis=0)

    g_hidden = (
        grad_indomain_logits @ params.indomain_w.T
        + grad_langid_logits @ params.langid_w.T
        + g_raw @ params.proj_w.T
    )
    g_h2pre = g_hidden * _gelu_grad(t.h2_pre)
    g.mlp_w2 += t.a1.T @ g_h2pre
    g.mlp_b2 += g_h2pre.sum(axis=0)
    g_a1 = g_h2pre @ params.mlp_w2.T
    g_h1pre = g_a1 * _gelu_grad(t.h1_pre)
    g.mlp_w1 += t.pooled.T @ g_h1pre
    g.mlp_b1 += g_h1pre.sum(axis=0)
    g_pooled = g_h1pre @ params.mlp_w1.T

    _scatter_embedding_grads(g.embedding, batch, g_pooled)
    return g


def _scatter_embedding_grads(g_emb: np.ndarray, batch: list[SparseFeatures], g_pooled: np.ndarray):
    dtype = g_emb.dtype
    idx_parts, row_parts = [], []
    for i, f in enumerate(batch):
        if f.nnz:
            w = f.counts.astype(dtype) / dtype.type(max(f.total_count, 1.0))
            idx_parts.append(f.indices)
            row_parts.append(w[:, None] * g_pooled[i][None, :])
    if not idx_parts:
        return
    idx = np.concatenate(idx_parts)
    rows = np.concatenate(row_parts)
    # Segment-sum in sorted bucket order: deterministic and add.at-free.
    order = np.argsort(idx, kind="stable")
    idx, rows = idx[order], rows[order]
    starts = np.flatnonzero(np.r_[True, np.diff(idx) != 0])
    g_emb[idx[starts]] += np.add.reduceat(rows, starts, axis=0)


def _check_dims(params: ModelParams) -> None:
    d_emb = params.embedding.shape[1]
    d_hid = params.mlp_w1.shape[1]
    d_proj = params.proj_w.shape[1]
    expect = {
        "mlp_w1": (d_emb, d_hid),
        "mlp_b1": (d_hid,),
        "mlp_w2": (d_hid, d_hid),
        "mlp_b2": (d_hid,),
        "indomain_w": (d_hid, 2),
        "indomain_b": (2,),
        "langid_w": (d_hid, params.n_langs),
        "langid_b": (params.n_langs,),
        "proj_w": (d_hid, d_proj),
        "proj_b": (d_proj,),
    }
    for name, shape in expect.items():
        actual = getattr(params, name).shape
        if actual != shape:
            raise ValidationError(f"parameter {name} has shape {actual}, expected {shape}")


# ---------------------------------------------------------------------------
# Tensor file format: one line of JSON manifest, then a little-endian f32
# payload blob in manifest order.
# ---------------------------------------------------------------------------


def write_tensor_file(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = {"meta": meta or {}, "tensors": entries, "payload_bytes": offset}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def read_tensor_file(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
        entries = manifest["tensors"]
        expected = manifest["payload_bytes"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest says {expected}")
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{path}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + 4 * count
        if stop > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} overruns the payload")
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(shape).copy()
        tensors[entry["name"]] = arr
    return tensors, manifest.get("meta", {})
