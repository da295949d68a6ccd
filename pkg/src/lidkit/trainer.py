"""End-to-end optimization of the combined objective.

Single-threaded and deterministic under the config seed: batch order,
augmentation draws and parameter init all derive from it. Featurization of
a batch may be spread over threads (it is pure and order-preserving), which
does not change the results.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, make_positive_pair
from .core import (
    CheckpointError,
    Hyperparams,
    LabelSpace,
    MarginTable,
    NumericError,
    ValidationError,
)
from .data import Corpus, sample_batches
from .losses import BatchEmbeddings, margin_matrix, total_loss
from .model import (
    FeaturizerConfig,
    ModelConfig,
    ModelParams,
    backward,
    featurize,
    forward_batch,
    init_params,
    read_tensor_file,
    write_tensor_file,
    zeros_like_params,
)

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

LOG_COLUMNS = ("epoch", "step", "lr", "l_indomain", "l_langid", "l_instance", "l_class", "total")


@dataclass
class OptimizerState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> OptimizerState:
        return cls(m=zeros_like_params(params), v=zeros_like_params(params), t=0)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **kw):
        self.records.append({k: kw[k] for k in LOG_COLUMNS})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.records)


def cosine_lr(t: float, hp: Hyperparams) -> float:
    """Cosine-annealed rate at epoch progress ``t``; restarts every t_max."""
    if t < 0:
        raise ValidationError(f"schedule position must be non-negative, got {t}")
    if t > hp.t_max:
        t = t % hp.t_max
    if t == 0:
        return hp.lr_max
    if t == hp.t_max:
        return hp.lr_min
    return hp.lr_min + 0.5 * (hp.lr_max - hp.lr_min) * (1.0 + math.cos(math.pi * t / hp.t_max))


def adamw_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> tuple[ModelParams, OptimizerState]:
    """One decoupled-weight-decay Adam update, in place."""
    for name, g in grads.named().items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in tensor {name}; aborting step")
    state.t += 1
    bc1 = 1.0 - BETA1**state.t
    bc2 = 1.0 - BETA2**state.t
    for name, theta in params.named().items():
        g = getattr(grads, name)
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= lr * (m_hat / (np.sqrt(v_hat) + EPS) + weight_decay * theta)
    return params, state


def clip_global_norm(grads: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    if not math.isfinite(max_norm):
        sq = 0.0
        for arr in grads.named().values():
            sq += float(np.sum(np.asarray(arr, dtype=np.float64) ** 2))
        return math.sqrt(sq)
    sq = 0.0
    for arr in grads.named().values():
        sq += float(np.sum(np.asarray(arr, dtype=np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for arr in grads.named().values():
            arr *= arr.dtype.type(scale)
    return norm


@dataclass
class TrainResult:
    checkpoint_path: str
    log: TrainLog
    params: ModelParams
    state: OptimizerState


def train(
    corpus: Corpus,
    hp: Hyperparams,
    table: MarginTable,
    aug_cfg: AugmentConfig,
    out_dir,
    *,
    feat_cfg: FeaturizerConfig = FeaturizerConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    pool: dict[str, list[str]] | None = None,
    threads: int = 1,
    quiet: bool = False,
) -> TrainResult:
    """Optimize the combined objective over positive-pair batches.

    Each batch of anchors becomes 2x as many rows: the anchor and its
    augmented view, both carrying the anchor's labels. Checkpoints are
    written at every epoch end and at completion.
    """
    if len(corpus) == 0:
        raise ValidationError("cannot train on an empty corpus")
    os.makedirs(out_dir, exist_ok=True)
    space = corpus.label_space
    margins = margin_matrix(table, space)
    params = init_params(feat_cfg, model_cfg, len(space.in_domain), seed=hp.seed)
    state = OptimizerState.zeros(params)
    labels = corpus.label_indices()
    flags = corpus.in_domain_flags()
    tlog = TrainLog()

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for epoch in range(hp.epochs):
            batches = sample_batches(corpus, hp, epoch)
            steps_per_epoch = len(batches)
            for step, batch in enumerate(batches):
                views = _augmented_views(corpus, batch.indices, aug_cfg, pool, hp.seed, epoch)
                if executor is None:
                    feats = [featurize(v, feat_cfg) for v in views]
                else:
                    feats = list(executor.map(lambda v: featurize(v, feat_cfg), views))
                row_labels = np.repeat(labels[list(batch.indices)], 2)
                row_flags = np.repeat(flags[list(batch.indices)], 2)

                out = forward_batch(params, feats)
                bemb = BatchEmbeddings(out.projection, row_labels, row_flags)
                lb = total_loss(bemb, out.indomain_logits, out.langid_logits, margins, hp)
                if not math.isfinite(lb.total):
                    dump = os.path.join(out_dir, "failed_batch.json")
                    _dump_batch(dump, views, row_labels, lb)
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}; batch dumped to {dump}")

                grads = backward(
                    params, feats, lb.grads_indomain_logits, lb.grads_langid_logits, lb.grads_z
                )
                clip_global_norm(grads, hp.grad_clip)
                lr = cosine_lr(epoch + step / steps_per_epoch, hp)
                adamw_step(params, grads, state, lr, hp.weight_decay)
                tlog.append(
                    epoch=epoch,
                    step=step,
                    lr=lr,
                    l_indomain=lb.l_indomain,
                    l_langid=lb.l_langid,
                    l_instance=lb.l_instance,
                    l_class=lb.l_class,
                    total=lb.total,
                )
            if not quiet:
                log.info("epoch %d/%d done, last total loss %.5f", epoch + 1, hp.epochs, tlog.records[-1]["total"])
            save_checkpoint(
                params, state, hp,
                os.path.join(out_dir, f"epoch_{epoch + 1}.ckpt"),
                label_space=space, feat_cfg=feat_cfg, model_cfg=model_cfg,
            )
    finally:
        if executor is not None:
            executor.shutdown()

    final = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(params, state, hp, final, label_space=space, feat_cfg=feat_cfg, model_cfg=model_cfg)
    tlog.to_csv(os.path.join(out_dir, "train_log.csv"))
    return TrainResult(checkpoint_path=final, log=tlog, params=params, state=state)


def _augmented_views(corpus, indices, aug_cfg, pool, seed, epoch) -> list[str]:
    """Anchor and augmented texts, two per index, with per-example RNG streams."""
    views: list[str] = []
    for idx in indices:
        ex = corpus.examples[idx]
        rng = np.random.default_rng((seed, epoch, idx))
        a, b = make_positive_pair(ex, aug_cfg, pool, rng)
        views.append(a.text)
        views.append(b.text)
    return views


def _dump_batch(path, views, labels, lb):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "texts": list(views),
                "labels": [int(x) for x in labels],
                "l_indomain": lb.l_indomain,
                "l_langid": lb.l_langid,
                "l_instance": lb.l_instance,
                "l_class": lb.l_class,
            },
            fh,
            indent=2,
            ensure_ascii=False,
        )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


@dataclass
class CheckpointBundle:
    params: ModelParams
    state: OptimizerState
    hp: Hyperparams
    label_space: LabelSpace
    feat_cfg: FeaturizerConfig
    model_cfg: ModelConfig


def save_checkpoint(
    params: ModelParams,
    state: OptimizerState,
    hp: Hyperparams,
    path,
    *,
    label_space: LabelSpace,
    feat_cfg: FeaturizerConfig,
    model_cfg: ModelConfig,
) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in params.named().items():
        tensors[f"params.{name}"] = arr
    for name, arr in state.m.named().items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in state.v.named().items():
        tensors[f"opt.v.{name}"] = arr
    meta = {
        "step": state.t,
        "hyperparams": json.loads(hp.to_json()),
        "label_space": json.loads(label_space.to_json()),
        "featurizer": {
            "ngram_min": feat_cfg.ngram_min,
            "ngram_max": feat_cfg.ngram_max,
            "num_buckets": feat_cfg.num_buckets,
            "marker_prefix": feat_cfg.marker_prefix,
            "marker_suffix": feat_cfg.marker_suffix,
            "max_chars": feat_cfg.max_chars,
        },
        "model": {"d_emb": model_cfg.d_emb, "d_hid": model_cfg.d_hid, "d_proj": model_cfg.d_proj},
    }
    write_tensor_file(path, tensors, meta)


def load_checkpoint(path, expect: tuple[FeaturizerConfig, ModelConfig, int] | None = None) -> CheckpointBundle:
    """Read a checkpoint; optionally verify tensor shapes against a config."""
    tensors, meta = read_tensor_file(path)
    try:
        hp = Hyperparams.from_dict(dict(meta["hyperparams"]))
        space = LabelSpace(tuple(meta["label_space"]["in_domain"]), meta["label_space"]["ood_token"])
        feat_cfg = FeaturizerConfig(**meta["featurizer"])
        model_cfg = ModelConfig(**meta["model"])
        step = int(meta["step"])
        params = ModelParams(**{n: tensors[f"params.{n}"] for n in _param_names()})
        m = ModelParams(**{n: tensors[f"opt.m.{n}"] for n in _param_names()})
        v = ModelParams(**{n: tensors[f"opt.v.{n}"] for n in _param_names()})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if expect is not None:
        _check_expected_shapes(params, *expect, path=path)
    return CheckpointBundle(
        params=params,
        state=OptimizerState(m=m, v=v, t=step),
        hp=hp,
        label_space=space,
        feat_cfg=feat_cfg,
        model_cfg=model_cfg,
    )


def _param_names():
    from .model import TENSOR_NAMES

    return TENSOR_NAMES


def _check_expected_shapes(params, feat_cfg, model_cfg, n_langs, path):
    expected = {
        "embedding": (feat_cfg.num_buckets, model_cfg.d_emb),
        "mlp_w1": (model_cfg.d_emb, model_cfg.d_hid),
        "mlp_b1": (model_cfg.d_hid,),
        "mlp_w2": (model_cfg.d_hid, model_cfg.d_hid),
        "mlp_b2": (model_cfg.d_hid,),
        "indomain_w": (model_cfg.d_hid, 2),
        "indomain_b": (2,),
        "langid_w": (model_cfg.d_hid, n_langs),
        "langid_b": (n_langs,),
        "proj_w": (model_cfg.d_hid, model_cfg.d_proj),
        "proj_b": (model_cfg.d_proj,),
    }
    for name, shape in expected.items():
        actual = getattr(params, name).shape
        if actual != shape:
            raise CheckpointError(
                f"{path}: tensor params.{name} has shape {actual}, config expects {shape}"
            )
