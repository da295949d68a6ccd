"""Corpus ingestion, subsampling protocol, synthetic generators, batching.

Corpus files are JSONL: one ``{"text": ..., "lang": ..., "entities": [...]}``
object per line, with an optional leading ``{"_header": {...}}`` line that
generated files use to record the generator version and seed. Entity offsets
are byte offsets into the UTF-8 encoding of the text.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import __version__
from .core import Example, LabelSpace, ValidationError, make_example, validate_label

log = logging.getLogger(__name__)

PLACEHOLDERS = ("SONG_NAME", "ARTIST_NAME")
_PLACEHOLDER_RE = re.compile(r"\[([A-Z_]+)\]")


@dataclass
class Corpus:
    examples: list[Example]
    label_space: LabelSpace
    provenance: str = ""

    def __post_init__(self):
        for i, ex in enumerate(self.examples):
            if not ex.text:
                raise ValidationError(f"example {i} has empty text")
            if ex.in_domain != (ex.lang in self.label_space.in_domain):
                raise ValidationError(f"example {i}: in_domain flag inconsistent with label space")

    def __len__(self):
        return len(self.examples)

    def label_indices(self) -> np.ndarray:
        """Per-example class index, -1 for OOD rows."""
        idx = {c: k for k, c in enumerate(self.label_space.in_domain)}
        return np.array([idx.get(ex.lang, -1) for ex in self.examples], dtype=np.int64)

    def in_domain_flags(self) -> np.ndarray:
        return np.array([ex.in_domain for ex in self.examples], dtype=bool)


@dataclass(frozen=True)
class TemplateSet:
    """Per-language utterance templates with optional entity placeholders."""

    templates: dict[str, tuple[str, ...]]

    def __post_init__(self):
        if not self.templates:
            raise ValidationError("template set is empty")
        clean = {}
        for lang, tpls in self.templates.items():
            validate_label(lang)
            tpls = tuple(tpls)
            if not tpls:
                raise ValidationError(f"language {lang!r} has no templates")
            for t in tpls:
                _validate_template(t)
            clean[lang] = tpls
        object.__setattr__(self, "templates", clean)

    @property
    def languages(self) -> tuple[str, ...]:
        return tuple(self.templates)


def _validate_template(template: str) -> None:
    depth_positions = [i for i, ch in enumerate(template) if ch in "[]"]
    open_pos = None
    for i in depth_positions:
        if template[i] == "[":
            if open_pos is not None:
                raise ValidationError(f"nested '[' in template: {template!r}")
            open_pos = i
        else:
            if open_pos is None:
                raise ValidationError(f"stray ']' in template: {template!r}")
            name = template[open_pos + 1 : i]
            if name not in PLACEHOLDERS:
                raise ValidationError(f"unknown placeholder [{name}] in template: {template!r}")
            open_pos = None
    if open_pos is not None:
        raise ValidationError(f"unclosed '[' in template: {template!r}")


@dataclass(frozen=True)
class BatchSpec:
    """Indices of one training batch of anchor examples."""

    indices: tuple[int, ...]


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------


def load_jsonl(path, label_space: LabelSpace) -> Corpus:
    """Read a corpus file; any language outside the space becomes the OOD
    bucket label. Fails on the first malformed line, reporting its number."""
    examples: list[Example] = []
    provenance = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            if lineno == 1 and "_header" in obj:
                provenance = str(obj["_header"].get("provenance", provenance))
                continue
            try:
                examples.append(_example_from_obj(obj, label_space))
            except (ValidationError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return Corpus(examples=examples, label_space=label_space, provenance=provenance)


def _example_from_obj(obj: dict, space: LabelSpace) -> Example:
    if "text" not in obj or "lang" not in obj:
        raise ValidationError("missing required field 'text' or 'lang'")
    text = obj["text"]
    lang = obj["lang"]
    if not isinstance(text, str) or not text:
        raise ValidationError("'text' must be a non-empty string")
    validate_label(lang)
    if lang not in space.in_domain:
        lang = space.ood_token
    spans = None
    if "entities" in obj:
        spans = tuple((int(e["start"]), int(e["end"]), str(e["type"])) for e in obj["entities"])
    return make_example(text, lang, space, spans)


def save_jsonl(corpus: Corpus, path, header: dict | None = None) -> None:
    """Write a corpus back out; round-trips field for field."""
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            meta = {"generator": "lidkit", "version": __version__, "provenance": corpus.provenance}
            meta.update(header)
            fh.write(json.dumps({"_header": meta}, sort_keys=True, ensure_ascii=False) + "\n")
        for ex in corpus.examples:
            obj: dict = {"text": ex.text, "lang": ex.lang}
            if ex.entity_spans is not None:
                obj["entities"] = [
                    {"start": s, "end": e, "type": t} for s, e, t in ex.entity_spans
                ]
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def load_entity_pool(path) -> dict[str, list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValidationError("entity pool must be a JSON object: type -> list of strings")
    for etype, entries in obj.items():
        if not isinstance(entries, list) or not all(isinstance(x, str) and x for x in entries):
            raise ValidationError(f"entity pool for {etype!r} must be a list of non-empty strings")
    return obj


def load_templates(path) -> TemplateSet:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValidationError("template file must be a JSON object: lang -> list of templates")
    return TemplateSet({lang: tuple(tpls) for lang, tpls in obj.items()})


def bundled_asset(name: str):
    """Path to one of the sample data files shipped with the package."""
    return resources.files("lidkit").joinpath("assets", name)


def bundled_templates() -> TemplateSet:
    return load_templates(bundled_asset("templates.json"))


def bundled_entity_pool() -> dict[str, list[str]]:
    return load_entity_pool(bundled_asset("entity_pool.json"))


# ---------------------------------------------------------------------------
# The OOD subsampling protocol
# ---------------------------------------------------------------------------


def subsample_ood(corpus: Corpus, target_ood_fraction: float, seed: int) -> Corpus:
    """Keep every in-domain example; sample OOD ones without replacement so
    they make up the target fraction of the result (capped at what exists)."""
    if not (0.0 < target_ood_fraction < 1.0):
        raise ValidationError(f"target_ood_fraction must be in (0,1), got {target_ood_fraction}")
    flags = corpus.in_domain_flags()
    in_count = int(flags.sum())
    ood_idx = np.flatnonzero(~flags)
    if in_count == 0 or len(ood_idx) == 0:
        raise ValidationError("subsample_ood needs both in-domain and OOD examples")

    f = target_ood_fraction
    want = round(f / (1.0 - f) * in_count)
    if want > len(ood_idx):
        log.warning(
            "wanted %d OOD examples for a %.0f%% share but only %d exist; keeping all",
            want, 100 * f, len(ood_idx),
        )
        want = len(ood_idx)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(ood_idx, size=want, replace=False).tolist())
    kept = [ex for i, ex in enumerate(corpus.examples) if flags[i] or i in chosen]
    return Corpus(examples=kept, label_space=corpus.label_space, provenance=corpus.provenance)


# ---------------------------------------------------------------------------
# Synthetic music-request corpus
# ---------------------------------------------------------------------------


def generate_song_corpus(
    templates: TemplateSet,
    pool: dict[str, list[str]],
    n_per_lang: int,
    seed: int,
) -> Corpus:
    """Fill per-language templates with sampled entities, recording spans."""
    if n_per_lang < 1:
        raise ValidationError("n_per_lang must be positive")
    space = LabelSpace(templates.languages)
    rng = np.random.default_rng(seed)
    examples: list[Example] = []
    for lang in templates.languages:
        tpls = templates.templates[lang]
        for _ in range(n_per_lang):
            template = tpls[rng.integers(len(tpls))]
            text, spans = _fill_template(template, pool, rng)
            examples.append(make_example(text, lang, space, spans))
    return Corpus(examples=examples, label_space=space, provenance=f"song-corpus seed={seed}")


def _fill_template(template: str, pool: dict[str, list[str]], rng) -> tuple[str, list]:
    pieces: list[str] = []
    spans: list[tuple[int, int, str]] = []
    offset = 0
    cursor = 0
    for m in _PLACEHOLDER_RE.finditer(template):
        name = m.group(1)
        entries = pool.get(name)
        if not entries:
            raise ValidationError(f"entity pool has no entries for placeholder [{name}]")
        literal = template[cursor : m.start()]
        pieces.append(literal)
        offset += len(literal.encode("utf-8"))
        surface = entries[rng.integers(len(entries))]
        pieces.append(surface)
        nbytes = len(surface.encode("utf-8"))
        spans.append((offset, offset + nbytes, name))
        offset += nbytes
        cursor = m.end()
    pieces.append(template[cursor:])
    return "".join(pieces), spans


# ---------------------------------------------------------------------------
# Synthetic confusable-language corpus
# ---------------------------------------------------------------------------

_CONFUSABLE_ALPHABET = "abcdefghijklmnopqrst"


def generate_confusable_corpus(
    k_languages: int,
    overlap: float,
    n_per_lang: int,
    seed: int,
) -> Corpus:
    """Character-trigram Markov languages; the first two share ``overlap``
    of their transition mass (0 = disjoint supports, 1 = identical)."""
    if k_languages < 2:
        raise ValidationError("need at least 2 synthetic languages")
    if not (0.0 <= overlap <= 1.0):
        raise ValidationError(f"overlap must be in [0,1], got {overlap}")
    if n_per_lang < 1:
        raise ValidationError("n_per_lang must be positive")

    rng = np.random.default_rng(seed)
    labels = tuple(f"l{i}" for i in range(k_languages))
    space = LabelSpace(labels)
    sources = _build_markov_sources(k_languages, overlap, rng)

    examples: list[Example] = []
    for li, lang in enumerate(labels):
        trans_cum, start_cum = sources[li]
        for _ in range(n_per_lang):
            n_words = int(rng.integers(3, 13))
            words = [_sample_word(trans_cum, start_cum, rng) for _ in range(n_words)]
            examples.append(make_example(" ".join(words), lang, space))
    return Corpus(
        examples=examples,
        label_space=space,
        provenance=f"confusable-corpus k={k_languages} overlap={overlap} seed={seed}",
    )


def confusable_transitions(k_languages: int, overlap: float, seed: int):
    """The raw per-language (transition, start) probability tables."""
    rng = np.random.default_rng(seed)
    return _build_markov_sources(k_languages, overlap, rng, cumulative=False)


def _build_markov_sources(k: int, overlap: float, rng, cumulative: bool = True):
    a = len(_CONFUSABLE_ALPHABET)
    half = a // 2

    def random_rows(shape, support):
        """Probability rows over the alphabet, nonzero only on ``support``."""
        rows = np.zeros(shape + (a,))
        raw = rng.uniform(0.05, 1.0, size=shape + (len(support),))
        rows[..., support] = raw / raw.sum(axis=-1, keepdims=True)
        return rows

    lo = np.arange(half)
    hi = np.arange(half, a)
    full = np.arange(a)

    sources = []
    base_trans = random_rows((a, a), lo)
    base_start = random_rows((), lo)
    donor_trans = random_rows((a, a), hi)
    donor_start = random_rows((), hi)
    for li in range(k):
        if li == 0:
            trans, start = base_trans, base_start
        elif li == 1:
            trans = overlap * base_trans + (1.0 - overlap) * donor_trans
            start = overlap * base_start + (1.0 - overlap) * donor_start
        else:
            trans = random_rows((a, a), full)
            start = random_rows((), full)
        if cumulative:
            sources.append((np.cumsum(trans, axis=-1), np.cumsum(start, axis=-1)))
        else:
            sources.append((trans, start))
    return sources


def _sample_word(trans_cum, start_cum, rng) -> str:
    last = len(_CONFUSABLE_ALPHABET) - 1  # cumsums may top out just below 1.0
    length = int(rng.integers(2, 9))
    first = min(int(np.searchsorted(start_cum, rng.random())), last)
    chars = [first]
    for _ in range(length - 1):
        prev2 = chars[-2] if len(chars) >= 2 else chars[-1]
        cum = trans_cum[prev2, chars[-1]]
        chars.append(min(int(np.searchsorted(cum, rng.random())), last))
    return "".join(_CONFUSABLE_ALPHABET[c] for c in chars)


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


def sample_batches(corpus: Corpus, hp, epoch: int) -> list[BatchSpec]:
    """One shuffled epoch pass, chunked; singleton in-domain classes are
    repaired by swapping in a same-class partner from a later batch when one
    exists. Every example appears exactly once."""
    if len(corpus) == 0:
        raise ValidationError("corpus is empty")
    if hp.batch_size < 4:
        raise ValidationError("batch_size must be at least 4 for the contrastive terms")
    rng = np.random.default_rng((hp.seed, epoch))
    order = rng.permutation(len(corpus)).tolist()
    size = hp.batch_size
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    labels = corpus.label_indices()

    for bi, chunk in enumerate(chunks):
        counts: dict[int, int] = {}
        for idx in chunk:
            y = int(labels[idx])
            if y >= 0:
                counts[y] = counts.get(y, 0) + 1
        for y in sorted(counts):
            if counts.get(y, 0) != 1:  # live count; earlier swaps may have changed it
                continue
            partner = _find_partner(chunks, labels, bi, y)
            if partner is None:
                continue
            victim = _pick_victim(chunk, labels, counts, y)
            if victim is None:
                continue
            pj, pk = partner
            chunk[victim], chunks[pj][pk] = chunks[pj][pk], chunk[victim]
            counts[y] += 1
            vy = int(labels[chunks[pj][pk]])
            if vy >= 0:
                counts[vy] -= 1
    return [BatchSpec(indices=tuple(c)) for c in chunks]


def _find_partner(chunks, labels, bi, y):
    for j in range(bi + 1, len(chunks)):
        for k, idx in enumerate(chunks[j]):
            if int(labels[idx]) == y:
                return (j, k)
    return None


def _pick_victim(chunk, labels, counts, y):
    """Slot to give up: prefer rich classes, then OOD, then other singletons."""
    fallback_ood = None
    fallback_single = None
    for pos, idx in enumerate(chunk):
        vy = int(labels[idx])
        if vy == y:
            continue
        if vy < 0:
            fallback_ood = fallback_ood if fallback_ood is not None else pos
        elif counts.get(vy, 0) >= 3:
            return pos
        elif counts.get(vy, 0) == 1 and fallback_single is None:
            fallback_single = pos
    if fallback_ood is not None:
        return fallback_ood
    return fallback_single
