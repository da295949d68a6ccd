import json
import math

import numpy as np
import pytest

from lidkit import data, model, trainer
from lidkit.augment import AugmentConfig
from lidkit.core import CheckpointError, Hyperparams, LabelSpace, MarginTable, ValidationError, make_example
from lidkit.losses import BatchEmbeddings, total_loss
from lidkit.model import FeaturizerConfig, ModelConfig
from lidkit.trainer import OptimizerState, adamw_step, clip_global_norm, cosine_lr, load_checkpoint, save_checkpoint


def toy_corpus(n_per_class=120, seed=0):
    """Two synthetic languages over disjoint alphabets: linearly separable."""
    rng = np.random.default_rng(seed)
    space = LabelSpace(("aa", "bb"))

    def sentence(chars):
        words = [
            "".join(chars[i] for i in rng.integers(0, len(chars), rng.integers(2, 6)))
            for _ in range(rng.integers(2, 6))
        ]
        return " ".join(words)

    exs = []
    for _ in range(n_per_class):
        exs.append(make_example(sentence("abcde"), "aa", space))
        exs.append(make_example(sentence("vwxyz"), "bb", space))
    return data.Corpus(exs, space)


SMALL_FEAT = FeaturizerConfig(num_buckets=2**12)
SMALL_MODEL = ModelConfig(d_emb=16, d_hid=32, d_proj=16)


class TestCosineLr:
    def test_endpoints_exact(self):
        hp = Hyperparams(lr_max=2e-5, lr_min=2e-7, t_max=5)
        assert cosine_lr(0.0, hp) == 2e-5
        assert cosine_lr(5.0, hp) == 2e-7

    def test_midpoint(self):
        hp = Hyperparams(lr_max=1e-3, lr_min=1e-5, t_max=4)
        assert cosine_lr(2.0, hp) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)

    def test_restart_after_t_max(self):
        hp = Hyperparams(lr_max=1e-3, lr_min=1e-5, t_max=5)
        assert cosine_lr(5.5, hp) == cosine_lr(0.5, hp)
        assert cosine_lr(7.0, hp) == cosine_lr(2.0, hp)

    def test_monotone_decay_within_cycle(self):
        hp = Hyperparams(lr_max=1e-2, lr_min=1e-4, t_max=5)
        ts = np.linspace(0, 5, 101)
        lrs = [cosine_lr(float(t), hp) for t in ts]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestAdamW:
    def _scalar_params(self, theta):
        cfg = FeaturizerConfig(num_buckets=2)
        params = model.init_params(cfg, ModelConfig(2, 2, 2), 2, seed=0, dtype=np.float64)
        params = model.zeros_like_params(params)
        params.mlp_b1[0] = theta
        return params

    def test_zero_gradient_zero_decay_is_noop(self):
        params = self._scalar_params(1.5)
        before = {k: v.copy() for k, v in params.named().items()}
        adamw_step(params, model.zeros_like_params(params), OptimizerState.zeros(params), lr=0.1, weight_decay=0.0)
        for k, v in params.named().items():
            np.testing.assert_array_equal(v, before[k])

    def test_first_step_magnitude_equals_lr(self):
        params = self._scalar_params(0.0)
        grads = model.zeros_like_params(params)
        grads.mlp_b1[0] = 1.0
        adamw_step(params, grads, OptimizerState.zeros(params), lr=0.1, weight_decay=0.0)
        assert params.mlp_b1[0] == pytest.approx(-0.1, abs=1e-6)

    def test_pure_decoupled_decay(self):
        params = self._scalar_params(1.0)
        adamw_step(params, model.zeros_like_params(params), OptimizerState.zeros(params), lr=0.1, weight_decay=0.01)
        assert params.mlp_b1[0] == pytest.approx(0.999, rel=1e-12)

    def test_lr_zero_changes_nothing(self):
        rng = np.random.default_rng(0)
        params = model.init_params(SMALL_FEAT, SMALL_MODEL, 3, seed=1, dtype=np.float64)
        grads = model.zeros_like_params(params)
        for arr in grads.named().values():
            arr += rng.normal(size=arr.shape)
        before = {k: v.copy() for k, v in params.named().items()}
        adamw_step(params, grads, OptimizerState.zeros(params), lr=0.0, weight_decay=0.01)
        for k, v in params.named().items():
            np.testing.assert_array_equal(v, before[k])

    def test_nonfinite_grads_abort(self):
        params = self._scalar_params(0.0)
        grads = model.zeros_like_params(params)
        grads.mlp_w1[0, 0] = np.inf
        with pytest.raises(Exception, match="mlp_w1"):
            adamw_step(params, grads, OptimizerState.zeros(params), lr=0.1, weight_decay=0.0)

    def test_matches_reference_sequence(self):
        # Scalar AdamW reference, iterated by hand.
        params = self._scalar_params(0.5)
        state = OptimizerState.zeros(params)
        theta_ref, m_ref, v_ref = 0.5, 0.0, 0.0
        for t in range(1, 6):
            g = 0.3 * t
            grads = model.zeros_like_params(params)
            grads.mlp_b1[0] = g
            adamw_step(params, grads, state, lr=0.01, weight_decay=0.02)
            m_ref = 0.9 * m_ref + 0.1 * g
            v_ref = 0.999 * v_ref + 0.001 * g * g
            mh = m_ref / (1 - 0.9**t)
            vh = v_ref / (1 - 0.999**t)
            theta_ref = theta_ref - 0.01 * (mh / (math.sqrt(vh) + 1e-8) + 0.02 * theta_ref)
            assert params.mlp_b1[0] == pytest.approx(theta_ref, rel=1e-12)


class TestClipGlobalNorm:
    def test_noop_below_threshold(self):
        params = model.init_params(SMALL_FEAT, SMALL_MODEL, 2, seed=0, dtype=np.float64)
        g = model.zeros_like_params(params)
        g.mlp_b1[0] = 3.0
        norm = clip_global_norm(g, 5.0)
        assert norm == pytest.approx(3.0)
        assert g.mlp_b1[0] == 3.0

    def test_scales_to_threshold(self):
        params = model.init_params(SMALL_FEAT, SMALL_MODEL, 2, seed=0, dtype=np.float64)
        g = model.zeros_like_params(params)
        g.mlp_b1[0] = 3.0
        g.mlp_b2[0] = 4.0
        clip_global_norm(g, 1.0)  # joint norm was 5
        assert g.mlp_b1[0] == pytest.approx(0.6)
        assert g.mlp_b2[0] == pytest.approx(0.8)

    def test_infinite_threshold_disables(self):
        params = model.init_params(SMALL_FEAT, SMALL_MODEL, 2, seed=0, dtype=np.float64)
        g = model.zeros_like_params(params)
        g.mlp_b1[0] = 100.0
        clip_global_norm(g, float("inf"))
        assert g.mlp_b1[0] == 100.0


class TestFixedBatchDescent:
    def _fixed_batch(self, k=3, n=12, seed=4):
        rng = np.random.default_rng(seed)
        feat = FeaturizerConfig(num_buckets=2**10)
        alphabet = "abcdefghijkl "
        texts = ["".join(alphabet[i] for i in rng.integers(0, 13, size=10)) for _ in range(n)]
        feats = [model.featurize(t, feat) for t in texts]
        labels = rng.integers(0, k, size=n).astype(np.int64)
        flags = np.ones(n, dtype=bool)
        margins = np.zeros((k, k))
        params = model.init_params(feat, ModelConfig(8, 16, 8), k, seed=seed)
        return params, feats, labels, flags, margins

    @pytest.mark.parametrize("lambda3", [0.0, 0.1])
    def test_loss_monotone_after_transients(self, lambda3):
        params, feats, labels, flags, margins = self._fixed_batch()
        hp = Hyperparams(lambda3=lambda3)  # default lr 2e-5 etc.
        state = OptimizerState.zeros(params)
        history = []
        for _ in range(50):
            out = model.forward_batch(params, feats)
            b = BatchEmbeddings(out.projection, labels, flags)
            lb = total_loss(b, out.indomain_logits, out.langid_logits, margins, hp)
            history.append(lb.total)
            grads = model.backward(params, feats, lb.grads_indomain_logits, lb.grads_langid_logits, lb.grads_z)
            adamw_step(params, grads, state, lr=hp.lr_max, weight_decay=hp.weight_decay)
        for a, b_ in zip(history[5:], history[6:]):
            assert b_ <= a + 1e-12, history[5:]

    def test_lambda3_zero_matches_ce_only_gradients(self):
        params, feats, labels, flags, margins = self._fixed_batch()
        hp0 = Hyperparams(lambda3=0.0)
        out = model.forward_batch(params, feats)
        b = BatchEmbeddings(out.projection, labels, flags)
        lb = total_loss(b, out.indomain_logits, out.langid_logits, margins, hp0)
        g_full = model.backward(params, feats, lb.grads_indomain_logits, lb.grads_langid_logits, lb.grads_z)

        from lidkit.losses import masked_cross_entropy

        _, g_ind = masked_cross_entropy(out.indomain_logits, flags.astype(np.int64), np.ones(len(feats), bool))
        _, g_lid = masked_cross_entropy(out.langid_logits, labels, flags)
        g_ce = model.backward(params, feats, g_ind, g_lid, np.zeros_like(out.projection))
        for name in model.TENSOR_NAMES:
            np.testing.assert_allclose(
                getattr(g_full, name), getattr(g_ce, name), atol=1e-10
            )
        # contrastive values still logged
        assert lb.l_instance > 0.0


class TestTrainLoop:
    def test_toy_corpus_reaches_perfect_top1(self, tmp_path):
        corpus = toy_corpus()
        hp = Hyperparams(lambda3=0.0, batch_size=32, epochs=5, lr_max=0.05, lr_min=5e-4, seed=1)
        res = trainer.train(
            corpus, hp, MarginTable(0.4), AugmentConfig(), tmp_path / "run",
            feat_cfg=SMALL_FEAT, model_cfg=SMALL_MODEL,
        )
        feats = [model.featurize(e.text, SMALL_FEAT) for e in corpus.examples]
        out = model.forward_batch(res.params, feats)
        acc = (out.langid_logits.argmax(1) == corpus.label_indices()).mean()
        assert acc == 1.0

    def test_log_satisfies_total_identity(self, tmp_path):
        corpus = toy_corpus(n_per_class=40)
        hp = Hyperparams(lambda3=0.1, batch_size=16, epochs=2, lr_max=0.01, lr_min=1e-4, seed=3)
        res = trainer.train(
            corpus, hp, MarginTable(0.4), AugmentConfig(), tmp_path / "run",
            feat_cfg=SMALL_FEAT, model_cfg=SMALL_MODEL,
        )
        assert (tmp_path / "run" / "train_log.csv").exists()
        for rec in res.log.records:
            expect = (
                hp.lambda1 * rec["l_indomain"]
                + hp.lambda2 * rec["l_langid"]
                + hp.lambda3 * (rec["l_instance"] + rec["l_class"])
            )
            assert rec["total"] == pytest.approx(expect, rel=1e-6)

    def test_bit_identical_checkpoints_across_runs(self, tmp_path):
        corpus = toy_corpus(n_per_class=30)
        hp = Hyperparams(batch_size=16, epochs=2, lr_max=0.01, lr_min=1e-4, seed=7)
        a = trainer.train(corpus, hp, MarginTable(0.4), AugmentConfig(), tmp_path / "a",
                          feat_cfg=SMALL_FEAT, model_cfg=SMALL_MODEL)
        b = trainer.train(corpus, hp, MarginTable(0.4), AugmentConfig(), tmp_path / "b",
                          feat_cfg=SMALL_FEAT, model_cfg=SMALL_MODEL)
        blob_a = (tmp_path / "a" / "final.ckpt").read_bytes()
        blob_b = (tmp_path / "b" / "final.ckpt").read_bytes()
        assert blob_a == blob_b

    def test_threads_do_not_change_results(self, tmp_path):
        corpus = toy_corpus(n_per_class=20)
        hp = Hyperparams(batch_size=16, epochs=1, lr_max=0.01, lr_min=1e-4, seed=5)
        a = trainer.train(corpus, hp, MarginTable(0.4), AugmentConfig(), tmp_path / "a",
                          feat_cfg=SMALL_FEAT, model_cfg=SMALL_MODEL, threads=1)
        b = trainer.train(corpus, hp, MarginTable(0.4), AugmentConfig(), tmp_path / "b",
                          feat_cfg=SMALL_FEAT, model_cfg=SMALL_MODEL, threads=4)
        assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


class TestCheckpoints:
    def _bundle(self, tmp_path, d_hid=32):
        space = LabelSpace(("aa", "bb", "cc"))
        mcfg = ModelConfig(d_emb=16, d_hid=d_hid, d_proj=16)
        params = model.init_params(SMALL_FEAT, mcfg, 3, seed=2)
        state = OptimizerState.zeros(params)
        state.t = 17
        hp = Hyperparams(seed=9)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, state, hp, path, label_space=space, feat_cfg=SMALL_FEAT, model_cfg=mcfg)
        return params, state, hp, path, mcfg

    def test_roundtrip_bit_exact(self, tmp_path):
        params, state, hp, path, mcfg = self._bundle(tmp_path)
        bundle = load_checkpoint(path)
        assert bundle.state.t == 17
        assert bundle.hp == hp
        for name in model.TENSOR_NAMES:
            np.testing.assert_array_equal(getattr(bundle.params, name), getattr(params, name))
            np.testing.assert_array_equal(getattr(bundle.state.m, name), getattr(state.m, name))

    def test_truncated_payload_is_corruption(self, tmp_path):
        _, _, _, path, _ = self._bundle(tmp_path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_dimension_mismatch_names_tensor(self, tmp_path):
        _, _, _, path, _ = self._bundle(tmp_path, d_hid=32)
        smaller = ModelConfig(d_emb=16, d_hid=16, d_proj=16)
        with pytest.raises(CheckpointError, match="mlp_w1"):
            load_checkpoint(path, expect=(SMALL_FEAT, smaller, 3))

    def test_empty_corpus_rejected(self, tmp_path):
        space = LabelSpace(("aa", "bb"))
        with pytest.raises(ValidationError):
            trainer.train(
                data.Corpus([], space), Hyperparams(), MarginTable(0.4), AugmentConfig(), tmp_path / "x",
                feat_cfg=SMALL_FEAT, model_cfg=SMALL_MODEL,
            )

    def test_nonfinite_loss_dumps_batch(self, tmp_path, monkeypatch):
        corpus = toy_corpus(n_per_class=20)
        hp = Hyperparams(batch_size=16, epochs=1, seed=2)

        real = trainer.total_loss

        def poisoned(*args, **kwargs):
            lb = real(*args, **kwargs)
            return type(lb)(
                l_indomain=lb.l_indomain, l_langid=lb.l_langid, l_instance=lb.l_instance,
                l_class=lb.l_class, total=float("nan"), grads_z=lb.grads_z,
                grads_indomain_logits=lb.grads_indomain_logits,
                grads_langid_logits=lb.grads_langid_logits,
            )

        monkeypatch.setattr(trainer, "total_loss", poisoned)
        from lidkit.core import NumericError

        with pytest.raises(NumericError, match="non-finite loss"):
            trainer.train(corpus, hp, MarginTable(0.4), AugmentConfig(), tmp_path / "run",
                          feat_cfg=SMALL_FEAT, model_cfg=SMALL_MODEL)
        dump = tmp_path / "run" / "failed_batch.json"
        assert dump.exists()
        payload = json.loads(dump.read_text())
        assert len(payload["texts"]) == 32  # both views of a 16-anchor batch
