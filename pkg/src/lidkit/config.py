"""Run configuration: one JSON file, snake_case keys, unknown keys rejected.

Sections map onto the dataclasses they configure::

    {
      "label_space": {"in_domain": [...], "ood_token": "out_domain"},
      "margins":     {"delta_high": 0.4, "delta_low": 0.0,
                      "confusing_pairs": [["es", "pt"], ...], "overrides": []},
      "hyperparams": {... see core.Hyperparams ...},
      "featurizer":  {... see model.FeaturizerConfig ...},
      "model":       {... see model.ModelConfig ...},
      "augment":     {... see augment.AugmentConfig ...},
      "paths":       {"corpus": ..., "templates": ..., "entity_pool": ...,
                      "out_dir": ...},
      "eval":        {"knn_k": 5, "max_pairs_per_side": 20000}
    }

Every section is optional and falls back to defaults; paths are resolved
relative to the config file's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from .augment import AugmentConfig
from .core import Hyperparams, LabelSpace, MarginTable, ValidationError, _canonical_dumps
from .model import FeaturizerConfig, ModelConfig

SECTIONS = ("label_space", "margins", "hyperparams", "featurizer", "model", "augment", "paths", "eval")

PATH_KEYS = ("corpus", "templates", "entity_pool", "out_dir")

DEFAULT_LANGS = ("en", "es", "fr", "ar", "hi", "nl", "de", "it", "pt", "ja")
DEFAULT_CONFUSING = (("es", "pt"), ("es", "fr"), ("fr", "pt"))

PRESETS = {
    # cross-entropy heads only
    "baseline": {"lambda3": 0.0},
    # add the instance-level contrastive term, no class/margin term
    "supcon": {"lambda3": 0.1, "instance_scale": 1.0, "class_scale": 0.0},
    # the full two-level margin objective
    "full": {"lambda3": 0.1, "instance_scale": 1.0, "class_scale": 1.0},
}


@dataclass
class EvalConfig:
    knn_k: int = 5
    max_pairs_per_side: int = 20000
    histogram_bins: int = 50

    def __post_init__(self):
        if self.knn_k < 1 or self.max_pairs_per_side < 1 or self.histogram_bins < 2:
            raise ValidationError("eval config values must be positive")


@dataclass
class RunConfig:
    label_space: LabelSpace = field(default_factory=lambda: LabelSpace(DEFAULT_LANGS))
    margins: MarginTable = field(
        default_factory=lambda: MarginTable(0.4, 0.0, frozenset(DEFAULT_CONFUSING))
    )
    hp: Hyperparams = field(default_factory=Hyperparams)
    feat_cfg: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    model_cfg: ModelConfig = field(default_factory=ModelConfig)
    aug_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    paths: dict = field(default_factory=dict)
    eval_cfg: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.margins.validate_against(self.label_space)

    def to_json(self) -> str:
        payload = {
            "label_space": json.loads(self.label_space.to_json()),
            "margins": json.loads(self.margins.to_json()),
            "hyperparams": json.loads(self.hp.to_json()),
            "featurizer": _dataclass_dict(self.feat_cfg),
            "model": _dataclass_dict(self.model_cfg),
            "augment": _dataclass_dict(self.aug_cfg),
            "paths": dict(sorted(self.paths.items())),
            "eval": _dataclass_dict(self.eval_cfg),
        }
        return _canonical_dumps(payload)


def _dataclass_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _build(cls, obj: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ValidationError(f"unknown {what} keys: {', '.join(unknown)}")
    return cls(**obj)


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    unknown = sorted(set(obj) - set(SECTIONS))
    if unknown:
        raise ValidationError(f"{path}: unknown config sections: {', '.join(unknown)}")
    cfg = config_from_dict(obj)
    base = os.path.dirname(os.path.abspath(path))
    cfg.paths = {k: _resolve(base, v) for k, v in cfg.paths.items()}
    return cfg


def config_from_dict(obj: dict) -> RunConfig:
    cfg = RunConfig()
    if "label_space" in obj:
        cfg.label_space = LabelSpace.from_json(json.dumps(obj["label_space"]))
    if "margins" in obj:
        cfg.margins = MarginTable.from_json(json.dumps(obj["margins"]))
    if "hyperparams" in obj:
        cfg.hp = Hyperparams.from_dict(dict(obj["hyperparams"]))
    if "featurizer" in obj:
        cfg.feat_cfg = _build(FeaturizerConfig, dict(obj["featurizer"]), "featurizer")
    if "model" in obj:
        cfg.model_cfg = _build(ModelConfig, dict(obj["model"]), "model")
    if "augment" in obj:
        aug = dict(obj["augment"])
        if "typo_ops" in aug:
            aug["typo_ops"] = tuple(aug["typo_ops"])
        cfg.aug_cfg = _build(AugmentConfig, aug, "augment")
    if "paths" in obj:
        paths = dict(obj["paths"])
        unknown = sorted(set(paths) - set(PATH_KEYS))
        if unknown:
            raise ValidationError(f"unknown path keys: {', '.join(unknown)}")
        cfg.paths = paths
    if "eval" in obj:
        cfg.eval_cfg = _build(EvalConfig, dict(obj["eval"]), "eval")
    cfg.validate()
    return cfg


def _resolve(base: str, value: str) -> str:
    return value if os.path.isabs(value) else os.path.normpath(os.path.join(base, value))


def apply_preset(hp: Hyperparams, preset: str) -> Hyperparams:
    """Named weight settings for the ablation trio."""
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    payload = json.loads(hp.to_json())
    payload.update(PRESETS[preset])
    return Hyperparams.from_dict(payload)
