"""Finite-difference verification of the analytic gradients.

Builds small float64 models, evaluates the combined objective, and compares
the analytic parameter gradients against central finite differences over
every parameter element. The differencing route shares nothing with the
reverse-mode implementation it checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Hyperparams
from .losses import OOD_INDEX, BatchEmbeddings, total_loss
from .model import FeaturizerConfig, ModelConfig, backward, featurize, forward_batch, init_params

FD_STEP = 1e-4
REL_TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_err: float
    worst_tensor: str
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < REL_TOLERANCE


def run_grad_check(trials: int = 20, seed: int = 1, h: float = FD_STEP) -> GradCheckResult:
    worst = 0.0
    worst_name = ""
    for trial in range(trials):
        rng = np.random.default_rng((seed, trial))
        err, name = _check_one(rng, h)
        if err > worst:
            worst, worst_name = err, name
    return GradCheckResult(max_rel_err=worst, worst_tensor=worst_name, trials=trials)


def _check_one(rng, h) -> tuple[float, str]:
    n_langs = int(rng.integers(2, 5))
    n_examples = int(rng.integers(3, 9))
    feat_cfg = FeaturizerConfig(ngram_min=1, ngram_max=2, num_buckets=64, max_chars=32)
    model_cfg = ModelConfig(
        d_emb=int(rng.integers(3, 9)), d_hid=int(rng.integers(3, 9)), d_proj=int(rng.integers(3, 9))
    )
    params = init_params(feat_cfg, model_cfg, n_langs, seed=int(rng.integers(2**31)), dtype=np.float64)
    # Rescale so pre-normalization projection norms are O(1); the check
    # resolves 1e-4 relative only when higher derivatives stay moderate.
    for name, arr in params.named().items():
        if arr.ndim == 2 and name != "embedding":
            arr *= 3.0
        elif arr.ndim == 1:
            arr += rng.normal(0.0, 0.3, size=arr.shape)

    alphabet = "abcdefghij "
    texts = [
        "".join(alphabet[j] for j in rng.integers(0, len(alphabet), size=rng.integers(3, 12)))
        for _ in range(n_examples)
    ]
    feats = [featurize(t, feat_cfg) for t in texts]
    in_domain = rng.random(n_examples) < 0.8
    if not in_domain.any():
        in_domain[0] = True
    labels = np.where(in_domain, rng.integers(0, n_langs, size=n_examples), OOD_INDEX)

    margins = rng.uniform(0.0, 0.6, size=(n_langs, n_langs))
    margins = (margins + margins.T) / 2
    np.fill_diagonal(margins, 0.0)
    hp = Hyperparams(
        temperature=float(rng.uniform(0.2, 1.0)),
        lambda1=1.0,
        lambda2=1.0,
        lambda3=0.1,
        margin_mode="as_written" if rng.random() < 0.5 else "enforcing",
        seed=0,
    )

    def objective() -> float:
        out = forward_batch(params, feats)
        b = BatchEmbeddings(out.projection, labels, in_domain)
        return total_loss(b, out.indomain_logits, out.langid_logits, margins, hp).total

    out = forward_batch(params, feats)
    b = BatchEmbeddings(out.projection, labels, in_domain)
    lb = total_loss(b, out.indomain_logits, out.langid_logits, margins, hp)
    analytic = backward(params, feats, lb.grads_indomain_logits, lb.grads_langid_logits, lb.grads_z)

    worst = 0.0
    worst_name = ""
    for name, theta in params.named().items():
        a = getattr(analytic, name)
        flat = theta.reshape(-1)
        aflat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = objective()
            flat[j] = orig - h
            dn = objective()
            flat[j] = orig
            fd = (up - dn) / (2 * h)
            denom = max(abs(aflat[j]), abs(fd), REL_TOLERANCE)
            err = abs(aflat[j] - fd) / denom
            if err > worst:
                worst, worst_name = err, name
    return worst, worst_name
