"""Shared test helpers: independent oracles and finite-difference tooling.

Everything here is deliberately written the naive way (explicit loops,
math.exp) so it shares no code path with the package implementations it
checks.
"""

import math

import numpy as np

from lidkit import losses, model
from lidkit.core import Hyperparams


def rel_err(a, b, floor=1e-4):
    """Elementwise relative error with a floor against 0/0 blowups."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def reference_fnv1a64(data: bytes) -> int:
    h = 14695981039346656037
    for byte in data:
        h ^= byte
        h = (h * 1099511628211) % (1 << 64)
    return h


# ---------------------------------------------------------------------------
# Naive double-loop loss oracles
# ---------------------------------------------------------------------------


def oracle_instance_loss(z, labels, tau):
    n = len(z)
    total = 0.0
    for i in range(n):
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(float(z[i] @ z[a]) / tau) for a in range(n) if a != i)
        acc = 0.0
        for p in pos:
            acc += -math.log(math.exp(float(z[i] @ z[p]) / tau) / denom)
        total += acc / len(pos)
    return total


def oracle_class_loss(z, labels, in_domain, margins, tau, mode):
    sign = -1.0 if mode == "as_written" else 1.0
    members = {}
    for i in range(len(z)):
        if in_domain[i]:
            members.setdefault(int(labels[i]), []).append(i)
    centroids = {y: np.mean([z[i] for i in rows], axis=0) for y, rows in members.items()}
    total = 0.0
    for i in range(len(z)):
        if not in_domain[i]:
            continue
        yi = int(labels[i])
        num = math.exp(float(z[i] @ centroids[yi]) / tau)
        den = 0.0
        for y, c in sorted(centroids.items()):
            den += math.exp(float(z[i] @ c) / tau + sign * float(margins[yi, y]))
        total += -math.log(num / den)
    return total


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff(fun, x, h=1e-4):
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = fun(x)
        flat[j] = orig - h
        fm = fun(x)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2 * h)
    return g


def small_random_setup(rng, n_examples=4, n_langs=3, d_emb=6, d_hid=7, d_proj=5, num_buckets=64):
    """A tiny float64 model plus a featurized batch with mixed OOD rows.

    Weights are rescaled and biases randomized after init so pre-normalization
    projection norms sit around 1. That keeps the higher derivatives of the
    normalize-then-contrast composition moderate, which finite differences at
    step 1e-4 need in order to resolve the gradient to 1e-4 relative.
    """
    feat_cfg = model.FeaturizerConfig(ngram_min=1, ngram_max=2, num_buckets=num_buckets, max_chars=32)
    mcfg = model.ModelConfig(d_emb=d_emb, d_hid=d_hid, d_proj=d_proj)
    params = model.init_params(feat_cfg, mcfg, n_langs, seed=int(rng.integers(2**31)), dtype=np.float64)
    for name, arr in params.named().items():
        if arr.ndim == 2 and name != "embedding":
            arr *= 3.0
        elif arr.ndim == 1:
            arr += rng.normal(0.0, 0.3, size=arr.shape)
    alphabet = "abcdefghij "
    texts = [
        "".join(alphabet[k] for k in rng.integers(0, len(alphabet), size=rng.integers(3, 12)))
        for _ in range(n_examples)
    ]
    feats = [model.featurize(t, feat_cfg) for t in texts]
    in_domain = rng.random(n_examples) < 0.75
    if not in_domain.any():
        in_domain[0] = True
    labels = np.where(in_domain, rng.integers(0, n_langs, size=n_examples), losses.OOD_INDEX)
    return params, feats, labels.astype(np.int64), in_domain


def full_objective(params, feats, labels, in_domain, margins, hp):
    """Scalar combined loss as a function of the parameters."""
    out = model.forward_batch(params, feats)
    b = losses.BatchEmbeddings(out.projection, labels, in_domain)
    return losses.total_loss(b, out.indomain_logits, out.langid_logits, margins, hp).total


def objective_grads(params, feats, labels, in_domain, margins, hp):
    """Analytic parameter gradients of the combined loss."""
    out = model.forward_batch(params, feats)
    b = losses.BatchEmbeddings(out.projection, labels, in_domain)
    lb = losses.total_loss(b, out.indomain_logits, out.langid_logits, margins, hp)
    return model.backward(params, feats, lb.grads_indomain_logits, lb.grads_langid_logits, lb.grads_z)


def default_hp(**kw):
    base = dict(temperature=0.5, lambda1=1.0, lambda2=1.0, lambda3=0.1, seed=0)
    base.update(kw)
    return Hyperparams(**base)
