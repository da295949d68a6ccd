"""Classification metrics and embedding-space analytics.

Covers the full report bundle: in-domain accuracy, macro
precision/recall/F1 and top-k over the language head, confusion matrices
and their normalized diffs, leave-one-out k-NN retrieval accuracy,
inter/intra cluster statistics, and positive/negative cosine-pair
histograms. OOD rows participate only in the in-domain accuracy; callers
filter them out of the embedding analytics.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .core import ValidationError
from .model import FeaturizerConfig, ModelParams, featurize, forward_batch


@dataclass(frozen=True)
class EvalReport:
    in_acc: float
    macro_precision: float | None
    macro_recall: float | None
    macro_f1: float | None
    top1: float | None
    top5: float | None
    confusion: np.ndarray  # (K, K) counts, rows = gold
    n_examples: int
    n_in_domain: int
    per_class: dict

    def to_dict(self) -> dict:
        return {
            "in_acc": self.in_acc,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "top1": self.top1,
            "top5": self.top5,
            "confusion": self.confusion.tolist(),
            "n_examples": self.n_examples,
            "n_in_domain": self.n_in_domain,
            "per_class": self.per_class,
            "metadata": {
                "averaging": "macro over classes with gold support",
                "ood_in_language_metrics": False,
            },
        }


@dataclass(frozen=True)
class EmbeddingStats:
    inter: float  # mean pairwise centroid distance
    intra: float  # mean distance to own centroid
    ratio: float  # inter / max(intra, 1e-9)

    def to_dict(self) -> dict:
        return {
            "inter": self.inter,
            "intra": self.intra,
            "ratio": self.ratio,
            "metadata": {
                "inter": "mean Euclidean distance over unordered class-centroid pairs",
                "intra": "mean Euclidean distance of each point to its class centroid",
            },
        }


@dataclass(frozen=True)
class PairSimHistogram:
    bin_edges: np.ndarray  # 51 edges over [-1, 1] by default
    pos_counts: np.ndarray
    neg_counts: np.ndarray
    n_pos: int
    n_neg: int
    pos_mean: float | None
    neg_mean: float | None
    mean_gap: float | None


def _ranked_classes(logits_row: np.ndarray) -> np.ndarray:
    """Class indices by descending score; ties broken by class index."""
    return np.argsort(-logits_row, kind="stable")


def classification_report(
    indomain_logits: np.ndarray,
    langid_logits: np.ndarray,
    labels: np.ndarray,
    in_domain: np.ndarray,
) -> EvalReport:
    """Score the two heads over a corpus.

    ``labels`` are in-domain class indices (-1 for OOD rows). The in-domain
    accuracy covers every row; language metrics cover only gold in-domain
    rows. Macro averages run over classes with gold support; a class never
    predicted gets precision 0.
    """
    indomain_logits = np.asarray(indomain_logits)
    langid_logits = np.asarray(langid_logits)
    labels = np.asarray(labels, dtype=np.int64)
    in_domain = np.asarray(in_domain, dtype=bool)
    n = len(labels)
    if n == 0:
        raise ValidationError("cannot evaluate an empty corpus")
    k = langid_logits.shape[1]

    in_pred = indomain_logits.argmax(axis=1)
    in_acc = float((in_pred == in_domain.astype(np.int64)).mean())

    rows = np.flatnonzero(in_domain)
    confusion = np.zeros((k, k), dtype=np.int64)
    if len(rows) == 0:
        return EvalReport(
            in_acc=in_acc, macro_precision=None, macro_recall=None, macro_f1=None,
            top1=None, top5=None, confusion=confusion, n_examples=n, n_in_domain=0, per_class={},
        )

    gold = labels[rows]
    ranked = np.argsort(-langid_logits[rows], axis=1, kind="stable")
    pred = ranked[:, 0]
    for g, p in zip(gold, pred):
        confusion[g, p] += 1

    top1 = float((pred == gold).mean())
    depth = min(5, k)
    top5 = float((ranked[:, :depth] == gold[:, None]).any(axis=1).mean())

    per_class = {}
    precs, recs, f1s = [], [], []
    for c in range(k):
        support = int(confusion[c].sum())
        if support == 0:
            continue
        tp = int(confusion[c, c])
        predicted = int(confusion[:, c].sum())
        prec = tp / predicted if predicted > 0 else 0.0
        rec = tp / support
        f1 = 2 * prec * rec / (prec + rec) if (prec + rec) > 0 else 0.0
        per_class[int(c)] = {"precision": prec, "recall": rec, "f1": f1, "support": support}
        precs.append(prec)
        recs.append(rec)
        f1s.append(f1)

    return EvalReport(
        in_acc=in_acc,
        macro_precision=float(np.mean(precs)),
        macro_recall=float(np.mean(recs)),
        macro_f1=float(np.mean(f1s)),
        top1=top1,
        top5=top5,
        confusion=confusion,
        n_examples=n,
        n_in_domain=len(rows),
        per_class=per_class,
    )


def knn_eval(embeddings: np.ndarray, labels: np.ndarray, k: int = 5) -> tuple[float, float]:
    """Leave-one-out k-NN retrieval accuracy over cosine similarity.

    Per query, classes are ranked by vote count among the k nearest
    neighbors, ties broken by summed similarity then class index; classes
    with no votes rank afterwards by centroid similarity.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if k < 1:
        raise ValidationError("k must be positive")
    if n <= k:
        raise ValidationError(f"need more points than neighbors, got n={n} k={k}")

    norms = np.linalg.norm(z, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    zn = z / safe[:, None]
    sims = zn @ zn.T

    classes = np.unique(labels)
    cents = np.stack([z[labels == c].mean(axis=0) for c in classes])
    cnorm = np.linalg.norm(cents, axis=1)
    cents = cents / np.where(cnorm > 0, cnorm, 1.0)[:, None]
    cent_sims = zn @ cents.T  # (n, C)

    top1_hits = 0
    top5_hits = 0
    class_pos = {int(c): j for j, c in enumerate(classes)}
    for i in range(n):
        row = sims[i].copy()
        row[i] = -np.inf
        order = np.argsort(-row, kind="stable")[:k]
        votes: dict[int, int] = {}
        simsum: dict[int, float] = {}
        for j in order:
            c = int(labels[j])
            votes[c] = votes.get(c, 0) + 1
            simsum[c] = simsum.get(c, 0.0) + float(row[j])
        voted = sorted(votes, key=lambda c: (-votes[c], -simsum[c], c))
        unvoted = sorted(
            (int(c) for c in classes if int(c) not in votes),
            key=lambda c: (-cent_sims[i, class_pos[c]], c),
        )
        ranking = voted + unvoted
        gold = int(labels[i])
        if ranking[0] == gold:
            top1_hits += 1
        if gold in ranking[:5]:
            top5_hits += 1
    return top1_hits / n, top5_hits / n


def embedding_stats(embeddings: np.ndarray, labels: np.ndarray) -> EmbeddingStats:
    """Centroid-pair mean distance vs mean distance to own centroid."""
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValidationError("embedding stats need at least 2 classes")
    cents = {int(c): z[labels == c].mean(axis=0) for c in classes}

    dists = []
    cl = [int(c) for c in classes]
    for a in range(len(cl)):
        for b in range(a + 1, len(cl)):
            dists.append(float(np.linalg.norm(cents[cl[a]] - cents[cl[b]])))
    inter = float(np.mean(dists))
    intra = float(np.mean([np.linalg.norm(z[i] - cents[int(labels[i])]) for i in range(len(z))]))
    return EmbeddingStats(inter=inter, intra=intra, ratio=inter / max(intra, 1e-9))


def pair_similarity_histogram(
    embeddings: np.ndarray,
    labels: np.ndarray,
    max_pairs_per_side: int = 20000,
    seed: int = 0,
    bins: int = 50,
) -> PairSimHistogram:
    """Cosine similarity histograms of same-label vs different-label pairs.

    A side with at most ``max_pairs_per_side`` pairs is enumerated exactly;
    a larger side is sampled uniformly (with replacement) to that budget.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n < 2:
        raise ValidationError("need at least two points for pair similarities")
    norms = np.linalg.norm(z, axis=1)
    zn = z / np.where(norms > 0, norms, 1.0)[:, None]

    counts = {int(c): int((labels == c).sum()) for c in np.unique(labels)}
    n_pos_total = sum(m * (m - 1) // 2 for m in counts.values())
    n_all = n * (n - 1) // 2
    n_neg_total = n_all - n_pos_total

    rng = np.random.default_rng(seed)
    pos_sims = _side_sims(zn, labels, True, n_pos_total, max_pairs_per_side, rng)
    neg_sims = _side_sims(zn, labels, False, n_neg_total, max_pairs_per_side, rng)

    edges = np.linspace(-1.0, 1.0, bins + 1)
    pos_counts, _ = np.histogram(np.clip(pos_sims, -1, 1), bins=edges)
    neg_counts, _ = np.histogram(np.clip(neg_sims, -1, 1), bins=edges)
    pos_mean = float(np.mean(pos_sims)) if len(pos_sims) else None
    neg_mean = float(np.mean(neg_sims)) if len(neg_sims) else None
    gap = (pos_mean - neg_mean) if (pos_mean is not None and neg_mean is not None) else None
    return PairSimHistogram(
        bin_edges=edges,
        pos_counts=pos_counts,
        neg_counts=neg_counts,
        n_pos=len(pos_sims),
        n_neg=len(neg_sims),
        pos_mean=pos_mean,
        neg_mean=neg_mean,
        mean_gap=gap,
    )


def _side_sims(zn, labels, same_label: bool, total: int, budget: int, rng) -> np.ndarray:
    n = len(labels)
    if total == 0:
        return np.empty(0)
    if total <= budget:
        sims = []
        for i in range(n):
            for j in range(i + 1, n):
                if (labels[i] == labels[j]) == same_label:
                    sims.append(float(zn[i] @ zn[j]))
        return np.asarray(sims)
    sims = np.empty(budget)
    filled = 0
    while filled < budget:
        m = (budget - filled) * 2 + 16
        ii = rng.integers(0, n, size=m)
        jj = rng.integers(0, n, size=m)
        keep = (ii != jj) & ((labels[ii] == labels[jj]) == same_label)
        picked = min(int(keep.sum()), budget - filled)
        idx = np.flatnonzero(keep)[:picked]
        sims[filled : filled + picked] = np.sum(zn[ii[idx]] * zn[jj[idx]], axis=1)
        filled += picked
    return sims


def row_normalize(confusion: np.ndarray) -> np.ndarray:
    """Rows scaled to sum 1; all-zero rows stay zero."""
    c = np.asarray(confusion, dtype=np.float64)
    sums = c.sum(axis=1, keepdims=True)
    return np.divide(c, sums, out=np.zeros_like(c), where=sums > 0)


def confusion_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise difference of two row-normalized confusion matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"confusion shapes differ: {a.shape} vs {b.shape}")
    for name, m in (("first", a), ("second", b)):
        sums = m.sum(axis=1)
        ok = np.isclose(sums, 1.0, atol=1e-8) | np.isclose(sums, 0.0, atol=1e-12)
        if not ok.all():
            raise ValidationError(f"{name} matrix is not row-normalized")
    return a - b


# ---------------------------------------------------------------------------
# Running a model over a corpus, and exporting its embeddings
# ---------------------------------------------------------------------------


def corpus_outputs(params: ModelParams, corpus, feat_cfg: FeaturizerConfig, batch: int = 512):
    """Forward the whole corpus in chunks; returns stacked head outputs."""
    ind, lid, z = [], [], []
    for start in range(0, len(corpus), batch):
        feats = [featurize(ex.text, feat_cfg) for ex in corpus.examples[start : start + batch]]
        out = forward_batch(params, feats)
        ind.append(out.indomain_logits)
        lid.append(out.langid_logits)
        z.append(out.projection)
    if not z:
        d = params.proj_w.shape[1]
        return np.zeros((0, 2)), np.zeros((0, params.n_langs)), np.zeros((0, d))
    return np.concatenate(ind), np.concatenate(lid), np.concatenate(z)


def export_embeddings(params: ModelParams, corpus, feat_cfg: FeaturizerConfig, path) -> None:
    """CSV of per-example projections, one row per corpus example in order."""
    d = params.proj_w.shape[1]
    _, _, z = corpus_outputs(params, corpus, feat_cfg)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text_sha256", "lang", "in_domain"] + [f"z_{j}" for j in range(d)])
        for ex, row in zip(corpus.examples, z):
            digest = hashlib.sha256(ex.text.encode("utf-8")).hexdigest()
            writer.writerow(
                [digest, ex.lang, int(ex.in_domain)] + [f"{v:.8e}" for v in row]
            )
