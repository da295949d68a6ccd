"""Semantics-preserving augmentations used to build positive pairs.

Order is fixed: entity replacement (when spans exist), then token deletion,
then character typo noise. Each function takes an explicit RNG; identical
(input, config, seed) triples give identical outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import Example, ValidationError

log = logging.getLogger(__name__)

TYPO_OPS = ("swap_adjacent", "substitute", "insert", "delete")


@dataclass(frozen=True)
class AugmentConfig:
    deletion_prob: float = 0.15
    typo_rate: float = 0.05
    typo_ops: tuple[str, ...] = TYPO_OPS
    enable_entity_replacement: bool = True

    def __post_init__(self):
        for name in ("deletion_prob", "typo_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0,1], got {v}")
        ops = tuple(self.typo_ops)
        if not ops:
            raise ValidationError("typo_ops must enable at least one operation")
        for op in ops:
            if op not in TYPO_OPS:
                raise ValidationError(f"unknown typo op {op!r}")
        object.__setattr__(self, "typo_ops", ops)


def random_deletion(text: str, p: float, rng: np.random.Generator) -> str:
    """Drop each whitespace token with probability p, keeping at least one."""
    if not (0.0 <= p <= 1.0):
        raise ValidationError(f"deletion probability must be in [0,1], got {p}")
    tokens = text.split()
    if not tokens:
        return text
    keep = rng.random(len(tokens)) >= p
    if not keep.any():
        keep[rng.integers(len(tokens))] = True
    return " ".join(t for t, k in zip(tokens, keep) if k)


def typo_noise(text: str, rate: float, rng: np.random.Generator, ops: tuple[str, ...] = TYPO_OPS) -> str:
    """Perturb characters: swap/substitute/insert/delete at the given rate.

    Positions are selected independently; operations apply left to right on
    the original indices. Substitution and insertion draw from the input's
    own character set, so the text stays in-script. Never returns empty.
    """
    if not (0.0 <= rate <= 1.0):
        raise ValidationError(f"typo rate must be in [0,1], got {rate}")
    if not text or rate == 0.0:
        return text
    chars = list(text)
    alphabet = sorted(set(chars))
    selected = rng.random(len(chars)) < rate
    out: list[str] = []
    skip_next = False
    for i, ch in enumerate(chars):
        if skip_next:
            skip_next = False
            continue
        if not selected[i]:
            out.append(ch)
            continue
        op = ops[rng.integers(len(ops))]
        if op == "swap_adjacent":
            if i + 1 < len(chars):
                out.append(chars[i + 1])
                out.append(ch)
                skip_next = True
            else:
                out.append(ch)
        elif op == "substitute":
            out.append(alphabet[rng.integers(len(alphabet))])
        elif op == "insert":
            out.append(ch)
            out.append(alphabet[rng.integers(len(alphabet))])
        else:  # delete
            pass
    if not out:
        out = [chars[0]]
    return "".join(out)


def entity_replacement(ex: Example, pool: dict[str, list[str]], rng: np.random.Generator) -> Example:
    """Swap each tagged entity for a random same-type pool entry.

    Spans are rewritten right to left so earlier byte offsets stay valid
    while replacements happen; the returned example carries corrected spans.
    A span whose type is missing from the pool is left as-is.
    """
    if ex.entity_spans is None:
        raise ValidationError("entity_replacement needs an example with entity_spans")
    if not ex.entity_spans:
        return ex

    spans = sorted(ex.entity_spans, key=lambda s: s[0])
    raw = ex.text.encode("utf-8")
    new_surfaces: list[bytes] = [raw[s:e] for s, e, _ in spans]
    for j in range(len(spans) - 1, -1, -1):
        start, end, etype = spans[j]
        candidates = pool.get(etype)
        if not candidates:
            log.info("entity type %r not in pool; span left unchanged", etype)
            continue
        original = raw[start:end].decode("utf-8")
        usable = [c for c in candidates if c != original] or list(candidates)
        new_surfaces[j] = usable[rng.integers(len(usable))].encode("utf-8")

    pieces: list[bytes] = []
    new_spans: list[tuple[int, int, str]] = []
    cursor = 0
    offset = 0
    for (start, end, etype), surface in zip(spans, new_surfaces):
        pieces.append(raw[cursor:start])
        offset += start - cursor
        pieces.append(surface)
        new_spans.append((offset, offset + len(surface), etype))
        offset += len(surface)
        cursor = end
    pieces.append(raw[cursor:])
    text = b"".join(pieces).decode("utf-8")
    return Example(text=text, lang=ex.lang, in_domain=ex.in_domain, entity_spans=tuple(new_spans))


def make_positive_pair(
    ex: Example,
    cfg: AugmentConfig,
    pool: dict[str, list[str]] | None,
    rng: np.random.Generator,
) -> tuple[Example, Example]:
    """The original example plus an augmented view with the same labels."""
    view = ex
    if cfg.enable_entity_replacement and pool and ex.entity_spans:
        view = entity_replacement(view, pool, rng)
    text = random_deletion(view.text, cfg.deletion_prob, rng)
    text = typo_noise(text, cfg.typo_rate, rng, cfg.typo_ops)
    view_b = Example(text=text, lang=ex.lang, in_domain=ex.in_domain, entity_spans=None)
    return ex, view_b
