"""Shared domain types: labels, examples, margins, hyperparameters.

Everything here is immutable after construction and safe to share across
threads. Serialization to/from JSON is canonical: dumping a value that was
loaded from canonical JSON reproduces the bytes exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields


class ValidationError(ValueError):
    """Bad config, bad input data, or a violated call contract."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required."""


class CheckpointError(RuntimeError):
    """Corrupt or incompatible checkpoint file."""


OOD_TOKEN_DEFAULT = "out_domain"


def validate_label(code: str) -> str:
    """Check a language code: non-empty ASCII with no uppercase letters."""
    if not isinstance(code, str) or not code:
        raise ValidationError(f"language code must be a non-empty string, got {code!r}")
    if not code.isascii():
        raise ValidationError(f"language code must be ASCII: {code!r}")
    if code != code.lower():
        raise ValidationError(f"language code must be lowercase: {code!r}")
    return code


@dataclass(frozen=True)
class LabelSpace:
    """The ordered set of supported languages plus the reserved OOD bucket.

    The position of a code in ``in_domain`` is its class index for the
    language-ID head. Everything not listed is grouped under ``ood_token``.
    """

    in_domain: tuple[str, ...]
    ood_token: str = OOD_TOKEN_DEFAULT

    def __post_init__(self):
        codes = tuple(validate_label(c) for c in self.in_domain)
        object.__setattr__(self, "in_domain", codes)
        if len(codes) < 2:
            raise ValidationError("label space needs at least 2 in-domain languages")
        if len(set(codes)) != len(codes):
            raise ValidationError(f"duplicate in-domain codes: {codes}")
        if not self.ood_token:
            raise ValidationError("ood_token must be non-empty")
        if self.ood_token in codes:
            raise ValidationError(f"ood_token {self.ood_token!r} collides with an in-domain code")

    def __contains__(self, lang: str) -> bool:
        return lang in self.in_domain

    def index_of(self, lang: str) -> int:
        """Class index of an in-domain code; raises for anything else."""
        try:
            return self.in_domain.index(lang)
        except ValueError:
            raise ValidationError(f"{lang!r} is not an in-domain language") from None

    def to_json(self) -> str:
        return _canonical_dumps({"in_domain": list(self.in_domain), "ood_token": self.ood_token})

    @classmethod
    def from_json(cls, text: str) -> LabelSpace:
        obj = _parse_object(text, "LabelSpace")
        _reject_unknown_keys(obj, {"in_domain", "ood_token"}, "LabelSpace")
        if "in_domain" not in obj:
            raise ValidationError("LabelSpace JSON missing 'in_domain'")
        return cls(
            in_domain=tuple(obj["in_domain"]),
            ood_token=obj.get("ood_token", OOD_TOKEN_DEFAULT),
        )


def derive_in_domain(lang: str, space: LabelSpace) -> bool:
    """Whether ``lang`` belongs to the supported set (the binary task label)."""
    return lang in space.in_domain


@dataclass(frozen=True)
class Example:
    """One utterance: text, language label, derived in-domain flag.

    ``entity_spans`` are half-open ``(start, end, entity_type)`` byte ranges
    into the UTF-8 encoding of ``text``, aligned to character boundaries.
    Construct through :func:`make_example` so the in-domain flag stays
    consistent with the label space.
    """

    text: str
    lang: str
    in_domain: bool
    entity_spans: tuple[tuple[int, int, str], ...] | None = None

    def __post_init__(self):
        validate_label(self.lang)
        if self.entity_spans is not None:
            object.__setattr__(self, "entity_spans", tuple(tuple(s) for s in self.entity_spans))
            _validate_spans(self.text, self.entity_spans)


def make_example(
    text: str,
    lang: str,
    space: LabelSpace,
    entity_spans=None,
) -> Example:
    """Build an Example with its in-domain flag derived from the space."""
    return Example(
        text=text,
        lang=lang,
        in_domain=derive_in_domain(lang, space),
        entity_spans=tuple(entity_spans) if entity_spans is not None else None,
    )


def _validate_spans(text: str, spans) -> None:
    raw = text.encode("utf-8")
    prev_end = 0
    for start, end, etype in sorted(spans, key=lambda s: (s[0], s[1])):
        if not (0 <= start <= end <= len(raw)):
            raise ValidationError(f"span ({start},{end}) outside text of {len(raw)} bytes")
        if start < prev_end:
            raise ValidationError(f"overlapping entity spans at byte {start}")
        for pos in (start, end):
            # A continuation byte (0b10xxxxxx) means we are inside a code point.
            if pos < len(raw) and (raw[pos] & 0xC0) == 0x80:
                raise ValidationError(f"span boundary {pos} splits a UTF-8 character")
        if not etype:
            raise ValidationError("entity_type must be non-empty")
        prev_end = end


def span_text(text: str, start: int, end: int) -> str:
    """Slice ``text`` by a byte-offset span."""
    return text.encode("utf-8")[start:end].decode("utf-8")


MARGIN_MODES = ("as_written", "enforcing")


@dataclass(frozen=True)
class MarginTable:
    """Class-pair margin lookup.

    Confusable pairs get ``delta_high``, all other distinct pairs get
    ``delta_low``, the diagonal is always zero. ``overrides`` lets a config
    pin an explicit value for individual pairs, taking precedence over the
    high/low rule.
    """

    delta_high: float
    delta_low: float = 0.0
    confusing_pairs: frozenset[tuple[str, str]] = frozenset()
    overrides: tuple[tuple[str, str, float], ...] = ()

    def __post_init__(self):
        if not (self.delta_high > self.delta_low >= 0.0):
            raise ValidationError(
                f"need delta_high > delta_low >= 0, got {self.delta_high} / {self.delta_low}"
            )
        pairs = frozenset(_ordered_pair(a, b) for a, b in self.confusing_pairs)
        object.__setattr__(self, "confusing_pairs", pairs)
        over = tuple(sorted((*_ordered_pair(a, b), float(v)) for a, b, v in self.overrides))
        seen = set()
        for a, b, v in over:
            if (a, b) in seen:
                raise ValidationError(f"duplicate margin override for pair ({a},{b})")
            if v < 0:
                raise ValidationError(f"margin override for ({a},{b}) is negative")
            seen.add((a, b))
        object.__setattr__(self, "overrides", over)

    def validate_against(self, space: LabelSpace) -> None:
        """Every named pair must consist of two distinct in-domain codes."""
        named = set(self.confusing_pairs) | {(a, b) for a, b, _ in self.overrides}
        for a, b in named:
            if a == b:
                raise ValidationError(f"margin pair ({a},{b}) names the same label twice")
            for code in (a, b):
                if code not in space.in_domain:
                    raise ValidationError(f"margin pair label {code!r} is not in-domain")

    def to_json(self) -> str:
        return _canonical_dumps(
            {
                "confusing_pairs": [list(p) for p in sorted(self.confusing_pairs)],
                "delta_high": self.delta_high,
                "delta_low": self.delta_low,
                "overrides": [[a, b, v] for a, b, v in self.overrides],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> MarginTable:
        obj = _parse_object(text, "MarginTable")
        _reject_unknown_keys(
            obj, {"delta_high", "delta_low", "confusing_pairs", "overrides"}, "MarginTable"
        )
        return cls(
            delta_high=float(obj.get("delta_high", 0.4)),
            delta_low=float(obj.get("delta_low", 0.0)),
            confusing_pairs=frozenset(tuple(p) for p in obj.get("confusing_pairs", [])),
            overrides=tuple(tuple(o) for o in obj.get("overrides", [])),
        )


def _ordered_pair(a: str, b: str) -> tuple[str, str]:
    validate_label(a)
    validate_label(b)
    return (a, b) if a <= b else (b, a)


def margin_of(y_a: str, y_b: str, table: MarginTable, space: LabelSpace) -> float:
    """The margin between two in-domain classes: 0 on the diagonal,
    delta_high for confusable pairs, delta_low otherwise. Symmetric."""
    for code in (y_a, y_b):
        if code not in space.in_domain:
            raise ValidationError(f"margin lookup for non-in-domain label {code!r}")
    if y_a == y_b:
        return 0.0
    pair = _ordered_pair(y_a, y_b)
    for a, b, v in table.overrides:
        if (a, b) == pair:
            return v
    if pair in table.confusing_pairs:
        return table.delta_high
    return table.delta_low


@dataclass(frozen=True)
class Hyperparams:
    """Training hyperparameters.

    ``instance_scale`` / ``class_scale`` multiply the two contrastive
    components inside the lambda3 term; the defaults of 1.0 give the plain
    combined objective.
    """

    temperature: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    margin_mode: str = "as_written"
    batch_size: int = 150
    epochs: int = 10
    lr_max: float = 2e-5
    lr_min: float = 2e-7
    t_max: int = 5
    weight_decay: float = 0.0
    seed: int = 0
    instance_scale: float = 1.0
    class_scale: float = 1.0
    grad_clip: float = 5.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        for name in ("lambda1", "lambda2", "lambda3", "instance_scale", "class_scale"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.margin_mode not in MARGIN_MODES:
            raise ValidationError(f"margin_mode must be one of {MARGIN_MODES}, got {self.margin_mode!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.t_max < 1:
            raise ValidationError("batch_size, epochs and t_max must be positive")
        if not (self.lr_max >= self.lr_min > 0):
            raise ValidationError(f"need lr_max >= lr_min > 0, got {self.lr_max} / {self.lr_min}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        if not (0 <= self.seed < 2**64):
            raise ValidationError("seed must fit in 64 unsigned bits")
        if self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive (use inf to disable)")

    def to_json(self) -> str:
        payload = {f.name: getattr(self, f.name) for f in fields(self)}
        if payload["grad_clip"] == float("inf"):
            payload["grad_clip"] = "inf"
        return _canonical_dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> Hyperparams:
        obj = _parse_object(text, "Hyperparams")
        return cls.from_dict(obj)

    @classmethod
    def from_dict(cls, obj: dict) -> Hyperparams:
        known = {f.name for f in fields(cls)}
        _reject_unknown_keys(obj, known, "Hyperparams")
        if obj.get("grad_clip") == "inf":
            obj = dict(obj)
            obj["grad_clip"] = float("inf")
        return cls(**obj)


def _canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _parse_object(text: str, what: str) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{what} JSON must be an object")
    return obj


def _reject_unknown_keys(obj: dict, known: set[str], what: str) -> None:
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ValidationError(f"unknown {what} keys: {', '.join(unknown)}")
