import json

import pytest

from lidkit import config as cfgmod
from lidkit.core import ValidationError


def write_config(tmp_path, payload, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(payload), encoding="utf-8")
    return p


FULL = {
    "label_space": {"in_domain": ["l0", "l1", "l2"]},
    "margins": {"delta_high": 0.4, "delta_low": 0.0, "confusing_pairs": [["l0", "l1"]]},
    "hyperparams": {"batch_size": 16, "epochs": 2, "lr_max": 0.01, "lr_min": 1e-4, "seed": 3},
    "featurizer": {"num_buckets": 4096},
    "model": {"d_emb": 16, "d_hid": 32, "d_proj": 16},
    "augment": {"deletion_prob": 0.1, "typo_rate": 0.02},
    "paths": {"corpus": "corpus.jsonl", "out_dir": "out"},
    "eval": {"knn_k": 3},
}


class TestLoadRunConfig:
    def test_full_config_loads(self, tmp_path):
        cfg = cfgmod.load_run_config(write_config(tmp_path, FULL))
        assert cfg.label_space.in_domain == ("l0", "l1", "l2")
        assert cfg.hp.batch_size == 16
        assert cfg.feat_cfg.num_buckets == 4096
        assert cfg.eval_cfg.knn_k == 3

    def test_paths_resolved_relative_to_config(self, tmp_path):
        cfg = cfgmod.load_run_config(write_config(tmp_path, FULL))
        assert cfg.paths["corpus"] == str(tmp_path / "corpus.jsonl")

    def test_defaults_when_sections_missing(self, tmp_path):
        cfg = cfgmod.load_run_config(write_config(tmp_path, {}))
        assert len(cfg.label_space.in_domain) == 10
        assert cfg.hp.temperature == 0.07
        assert cfg.margins.delta_high == 0.4

    def test_unknown_section_rejected(self, tmp_path):
        bad = dict(FULL)
        bad["optimizer"] = {}
        with pytest.raises(ValidationError, match="optimizer"):
            cfgmod.load_run_config(write_config(tmp_path, bad))

    def test_unknown_nested_key_rejected(self, tmp_path):
        bad = json.loads(json.dumps(FULL))
        bad["hyperparams"]["learning_rate"] = 0.1
        with pytest.raises(ValidationError, match="learning_rate"):
            cfgmod.load_run_config(write_config(tmp_path, bad))
        bad = json.loads(json.dumps(FULL))
        bad["featurizer"]["buckets"] = 16
        with pytest.raises(ValidationError, match="buckets"):
            cfgmod.load_run_config(write_config(tmp_path, bad))
        bad = json.loads(json.dumps(FULL))
        bad["paths"]["cache"] = "x"
        with pytest.raises(ValidationError, match="cache"):
            cfgmod.load_run_config(write_config(tmp_path, bad))

    def test_margin_pairs_checked_against_space(self, tmp_path):
        bad = json.loads(json.dumps(FULL))
        bad["margins"]["confusing_pairs"] = [["l0", "zz"]]
        with pytest.raises(ValidationError):
            cfgmod.load_run_config(write_config(tmp_path, bad))

    def test_canonical_roundtrip(self, tmp_path):
        cfg = cfgmod.load_run_config(write_config(tmp_path, FULL))
        blob = cfg.to_json()
        cfg2 = cfgmod.config_from_dict(json.loads(blob))
        cfg2.paths = cfg.paths
        assert cfg2.to_json() == blob


class TestPresets:
    def test_baseline_zeroes_lambda3(self):
        hp = cfgmod.apply_preset(cfgmod.Hyperparams(lambda3=0.1), "baseline")
        assert hp.lambda3 == 0.0

    def test_supcon_keeps_instance_only(self):
        hp = cfgmod.apply_preset(cfgmod.Hyperparams(), "supcon")
        assert hp.lambda3 == 0.1
        assert hp.instance_scale == 1.0
        assert hp.class_scale == 0.0

    def test_full_keeps_both(self):
        hp = cfgmod.apply_preset(cfgmod.Hyperparams(), "full")
        assert hp.lambda3 == 0.1
        assert hp.class_scale == 1.0

    def test_unknown_preset(self):
        with pytest.raises(ValidationError):
            cfgmod.apply_preset(cfgmod.Hyperparams(), "fancy")
