"""Training objectives with exact gradients.

Four components over a batch of L2-normalized projections:

* instance-level supervised contrastive loss (same-label rows attract,
  everything else repels, scaled by a temperature),
* batch class centroids (plain arithmetic means, not renormalized),
* class-level contrastive loss with pair-specific additive margins,
* masked cross-entropy for the two classification heads,

plus the weighted combination that drives training. Every operation returns
both the scalar loss and the exact gradient w.r.t. its tensor inputs;
gradients flow through the centroids (no stop-gradient). All softmax-style
ratios are computed in log space with max-subtraction.

OOD rows form a single pseudo-class for the instance loss, are excluded
from centroids and the class loss, and are masked out of the language-ID
cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Hyperparams, LabelSpace, MarginTable, ValidationError, margin_of

OOD_INDEX = -1

_MODE_SIGN = {"as_written": -1.0, "enforcing": 1.0}


@dataclass(frozen=True)
class BatchEmbeddings:
    """Projected embeddings with their labels.

    ``labels`` holds the in-domain class index per row, or ``OOD_INDEX``
    for out-of-domain rows; ``in_domain`` mirrors that as booleans.
    """

    z: np.ndarray  # (n, d), unit rows
    labels: np.ndarray  # (n,) int
    in_domain: np.ndarray  # (n,) bool

    def __post_init__(self):
        z = np.asarray(self.z)
        labels = np.asarray(self.labels, dtype=np.int64)
        in_domain = np.asarray(self.in_domain, dtype=bool)
        if z.ndim != 2 or labels.shape != (z.shape[0],) or in_domain.shape != (z.shape[0],):
            raise ValidationError("inconsistent batch shapes")
        norms = np.linalg.norm(z, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValidationError(f"row {worst} is not unit norm (|z|={norms[worst]:.8f})")
        if np.any(labels[in_domain] < 0):
            raise ValidationError("in-domain rows must carry a class index >= 0")
        if np.any(labels[~in_domain] != OOD_INDEX):
            raise ValidationError("OOD rows must carry the OOD sentinel label")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "in_domain", in_domain)

    @property
    def n(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True)
class ClassCentroids:
    """Mean embedding per in-domain class present in the batch (ascending
    class index); means are not renormalized."""

    present_classes: np.ndarray  # (m,) int
    c: np.ndarray  # (m, d)
    counts: np.ndarray  # (m,) int, batch members per class


@dataclass(frozen=True)
class LossBreakdown:
    l_indomain: float
    l_langid: float
    l_instance: float
    l_class: float
    total: float
    grads_z: np.ndarray
    grads_indomain_logits: np.ndarray
    grads_langid_logits: np.ndarray


def margin_matrix(table: MarginTable, space: LabelSpace) -> np.ndarray:
    """Dense K x K margin lookup indexed by in-domain class index."""
    table.validate_against(space)
    k = len(space.in_domain)
    out = np.zeros((k, k), dtype=np.float64)
    for i, a in enumerate(space.in_domain):
        for j, b in enumerate(space.in_domain):
            out[i, j] = margin_of(a, b, table, space)
    return out


def _masked_logsumexp(logits: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp(logits[keep]))); rows must keep something."""
    masked = np.where(keep, logits, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(masked - m), axis=1, keepdims=True)))[:, 0]


def instance_contrastive(b: BatchEmbeddings, tau: float) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over all anchor/positive pairs.

    For each anchor with at least one same-label partner, averages
    -log(exp(z_i.z_p / tau) / sum_a exp(z_i.z_a / tau)) over its positives,
    where the denominator runs over every other row. Anchors without
    positives contribute zero. Returns the sum over anchors and the exact
    gradient w.r.t. z.
    """
    if b.n < 2:
        raise ValidationError("instance contrastive loss needs a batch of at least 2")
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    n = b.n
    logits = (b.z @ b.z.T) / tau
    offdiag = ~np.eye(n, dtype=bool)
    pos = (b.labels[:, None] == b.labels[None, :]) & offdiag
    pos_counts = pos.sum(axis=1)
    valid = pos_counts > 0

    logz = _masked_logsumexp(logits, offdiag)
    per_anchor = np.where(
        valid,
        logz - np.where(pos, logits, 0.0).sum(axis=1) / np.maximum(pos_counts, 1),
        0.0,
    )
    loss = float(per_anchor.sum())

    q = np.exp(np.where(offdiag, logits, -np.inf) - logz[:, None])
    grad_logits = (q - pos / np.maximum(pos_counts, 1)[:, None]) / tau
    grad_logits[~valid] = 0.0
    grad_z = grad_logits @ b.z + grad_logits.T @ b.z
    return loss, grad_z


def class_centroids(b: BatchEmbeddings) -> ClassCentroids:
    """Arithmetic mean embedding of each in-domain class in the batch."""
    if not b.in_domain.any():
        raise ValidationError("cannot form class centroids: batch has no in-domain examples")
    labels = b.labels[b.in_domain]
    z = b.z[b.in_domain]
    present, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    c = np.zeros((len(present), z.shape[1]), dtype=z.dtype)
    np.add.at(c, inverse, z)
    c /= counts[:, None].astype(z.dtype)
    return ClassCentroids(present_classes=present, c=c, counts=counts)


def class_contrastive(
    b: BatchEmbeddings,
    cents: ClassCentroids,
    margins: np.ndarray,
    tau: float,
    mode: str = "as_written",
) -> tuple[float, np.ndarray]:
    """Centroid-attraction loss with additive class-pair margins.

    Each in-domain anchor is pulled toward its own centroid against a
    softmax over the centroids of every class present in the batch. The
    margin ``margins[y_i, y]`` enters the competing logits with sign -1 in
    ``as_written`` mode and +1 in ``enforcing`` mode; the true-class logit
    is never margined. OOD anchors contribute zero. Gradients flow through
    both the anchor and, via the centroid means, every in-domain row.
    """
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    if mode not in _MODE_SIGN:
        raise ValidationError(f"unknown margin mode {mode!r}")
    sign = _MODE_SIGN[mode]

    anchor_rows = np.flatnonzero(b.in_domain)
    grad_z = np.zeros_like(b.z)
    if len(anchor_rows) == 0:
        return 0.0, grad_z

    present = cents.present_classes
    pos_of_class = {int(y): k for k, y in enumerate(present)}
    anchor_labels = b.labels[anchor_rows]
    try:
        anchor_pos = np.array([pos_of_class[int(y)] for y in anchor_labels], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"anchor class {exc} has no centroid in this batch") from None

    z_a = b.z[anchor_rows]
    sims = z_a @ cents.c.T / tau  # (a, m)
    delta = margins[np.ix_(anchor_labels, present)]
    logits = sims + sign * delta

    m = logits.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    own = sims[np.arange(len(anchor_rows)), anchor_pos]
    loss = float(np.sum(logz - own))

    p = np.exp(logits - logz[:, None])
    g_sims = p / tau
    g_sims[np.arange(len(anchor_rows)), anchor_pos] -= 1.0 / tau

    grad_z[anchor_rows] += g_sims @ cents.c
    grad_c = g_sims.T @ z_a  # (m, d)
    # Each centroid is the mean of its member rows.
    grad_z[anchor_rows] += grad_c[anchor_pos] / cents.counts[anchor_pos, None].astype(b.z.dtype)
    return loss, grad_z


def masked_cross_entropy(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean -log softmax(logits)[target] over masked rows.

    Unmasked rows contribute neither loss nor gradient; a fully masked-out
    batch scores zero.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValidationError("cross entropy needs (n, K) logits with K >= 2")
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n, k = logits.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise ValidationError("targets/mask do not match logits rows")
    if np.any((targets[mask] < 0) | (targets[mask] >= k)):
        raise ValidationError("target out of range on a masked-in row")

    grad = np.zeros_like(logits)
    n_masked = int(mask.sum())
    if n_masked == 0:
        return 0.0, grad

    rows = logits[mask]
    m = rows.max(axis=1, keepdims=True)
    shifted = rows - m
    logz = np.log(np.exp(shifted).sum(axis=1))
    t = targets[mask]
    loss = float(np.mean(logz - shifted[np.arange(n_masked), t]))

    p = np.exp(shifted - logz[:, None])
    p[np.arange(n_masked), t] -= 1.0
    grad[mask] = p / n_masked
    return loss, grad


def total_loss(
    b: BatchEmbeddings,
    indomain_logits: np.ndarray,
    langid_logits: np.ndarray,
    margins: np.ndarray,
    hp: Hyperparams,
) -> LossBreakdown:
    """The combined objective and its gradients w.r.t. z and both heads.

    total = lambda1 * L_indomain + lambda2 * L_langid
          + lambda3 * (instance_scale * L_instance + class_scale * L_class)

    The contrastive components are always evaluated (so they can be logged)
    even when lambda3 is zero. A batch without in-domain rows has no
    centroids; its class loss is the empty sum, zero.
    """
    l_ind, g_ind = masked_cross_entropy(
        indomain_logits, b.in_domain.astype(np.int64), np.ones(b.n, dtype=bool)
    )
    l_lid, g_lid = masked_cross_entropy(
        langid_logits, np.where(b.in_domain, b.labels, 0), b.in_domain
    )
    l_inst, g_inst = instance_contrastive(b, hp.temperature)
    if b.in_domain.any():
        cents = class_centroids(b)
        l_cls, g_cls = class_contrastive(b, cents, margins, hp.temperature, hp.margin_mode)
    else:
        l_cls, g_cls = 0.0, np.zeros_like(b.z)

    grads_z = hp.lambda3 * (hp.instance_scale * g_inst + hp.class_scale * g_cls)
    total = (
        hp.lambda1 * l_ind
        + hp.lambda2 * l_lid
        + hp.lambda3 * (hp.instance_scale * l_inst + hp.class_scale * l_cls)
    )
    return LossBreakdown(
        l_indomain=l_ind,
        l_langid=l_lid,
        l_instance=l_inst,
        l_class=l_cls,
        total=total,
        grads_z=grads_z.astype(b.z.dtype, copy=False),
        grads_indomain_logits=hp.lambda1 * g_ind,
        grads_langid_logits=hp.lambda2 * g_lid,
    )
