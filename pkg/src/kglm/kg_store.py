"""Tab-separated KG ingestion: triples, cross-lingual links, vocab, splits.

File formats (see FORMATS.md):
  triples:  lang \t subject \t relation \t object
  xlinks:   lang_a \t entity_a \t lang_b \t entity_b
Lines starting with '#' are comments; text is NFC-normalized on read.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

# ISO 639-1 two-letter codes. Synthetic pseudo-languages use real codes
# ("aa"/"ab") so validation stays strict.
ISO_639_1 = frozenset("""
aa ab ae af ak am an ar as av ay az ba be bg bh bi bm bn bo br bs ca ce ch co
cr cs cu cv cy da de dv dz ee el en eo es et eu fa ff fi fj fo fr fy ga gd gl
gn gu gv ha he hi ho hr ht hu hy hz ia id ie ig ii ik io is it iu ja jv ka kg
ki kj kk kl km kn ko kr ks ku kv kw ky la lb lg li ln lo lt lu lv mg mh mi mk
ml mn mr ms mt my na nb nd ne ng nl nn no nr nv ny oc oj om or os pa pi pl ps
pt qu rm rn ro ru rw sa sc sd se sg si sk sl sm sn so sq sr ss st su sv sw ta
te tg th ti tk tl tn to tr ts tt tw ty ug uk ur uz ve vi vo wa wo xh yi yo za
zh zu
""".split())


@dataclass(frozen=True, order=True)
class Triple:
    lang: str
    subject: str
    relation: str
    object: str


@dataclass(frozen=True, order=True)
class XLink:
    lang_a: str
    entity_a: str
    lang_b: str
    entity_b: str


def check_lang(code: str, path: str = "", line: int = 0) -> str:
    if code not in ISO_639_1:
        raise ValidationError(
            f"{path}:{line}: unknown language code {code!r}" if line else f"unknown language code {code!r}"
        )
    return code


def _field(raw: str, name: str, path: str, line: int) -> str:
    value = unicodedata.normalize("NFC", raw).strip()
    if not value:
        raise ParseError(f"empty {name} field", path, line)
    return value


def parse_triples(path: str | Path) -> list[Triple]:
    """Parse a triple file; duplicates are counted but deduplicated."""
    path = Path(path)
    seen: dict[Triple, None] = {}
    n_dup = 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", str(path), line_no)
            lang = _field(parts[0], "lang", str(path), line_no)
            check_lang(lang, str(path), line_no)
            t = Triple(
                lang,
                _field(parts[1], "subject", str(path), line_no),
                _field(parts[2], "relation", str(path), line_no),
                _field(parts[3], "object", str(path), line_no),
            )
            if t in seen:
                n_dup += 1
            else:
                seen[t] = None
    if n_dup:
        log.info("parse_triples(%s): %d duplicate lines dropped", path, n_dup)
    return list(seen)


def parse_xlinks(path: str | Path) -> list[XLink]:
    """Parse a cross-lingual link file; no implicit symmetrization."""
    path = Path(path)
    seen: dict[XLink, None] = {}
    n_dup = 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", str(path), line_no)
            lang_a = check_lang(_field(parts[0], "lang_a", str(path), line_no), str(path), line_no)
            lang_b = check_lang(_field(parts[2], "lang_b", str(path), line_no), str(path), line_no)
            if lang_a == lang_b:
                raise ValidationError(f"{path}:{line_no}: cross-lingual link within one language {lang_a!r}")
            x = XLink(
                lang_a,
                _field(parts[1], "entity_a", str(path), line_no),
                lang_b,
                _field(parts[3], "entity_b", str(path), line_no),
            )
            if x in seen:
                n_dup += 1
            else:
                seen[x] = None
    if n_dup:
        log.info("parse_xlinks(%s): %d duplicate lines dropped", path, n_dup)
    return list(seen)


def write_triples(path: str | Path, triples: Iterable[Triple]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in triples:
            f.write(f"{t.lang}\t{t.subject}\t{t.relation}\t{t.object}\n")


def write_xlinks(path: str | Path, xlinks: Iterable[XLink]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x in xlinks:
            f.write(f"{x.lang_a}\t{x.entity_a}\t{x.lang_b}\t{x.entity_b}\n")


class KgVocab:
    """Per-language entity/relation inventories. Immutable once built."""

    def __init__(self, entities: Mapping[str, Iterable[str]], relations: Mapping[str, Iterable[str]]):
        self._entities = {lang: tuple(sorted(set(es))) for lang, es in entities.items()}
        self._relations = {lang: tuple(sorted(set(rs))) for lang, rs in relations.items()}
        self._entity_sets = {lang: frozenset(es) for lang, es in self._entities.items()}
        self.languages = tuple(sorted(set(self._entities) | set(self._relations)))

    def entities(self, lang: str) -> tuple[str, ...]:
        return self._entities.get(lang, ())

    def relations(self, lang: str) -> tuple[str, ...]:
        return self._relations.get(lang, ())

    def has_entity(self, lang: str, entity: str) -> bool:
        return entity in self._entity_sets.get(lang, frozenset())

    def all_surface_strings(self) -> list[str]:
        out: list[str] = []
        for lang in self.languages:
            out.extend(self._entities.get(lang, ()))
            out.extend(self._relations.get(lang, ()))
        return out

    def to_dict(self) -> dict:
        return {
            "entities": {lang: list(es) for lang, es in self._entities.items()},
            "relations": {lang: list(rs) for lang, rs in self._relations.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KgVocab":
        return cls(d["entities"], d["relations"])


def build_vocab(triples: Iterable[Triple], xlinks: Iterable[XLink] = ()) -> KgVocab:
    entities: dict[str, set[str]] = defaultdict(set)
    relations: dict[str, set[str]] = defaultdict(set)
    for t in triples:
        entities[t.lang].update((t.subject, t.object))
        relations[t.lang].add(t.relation)
    for x in xlinks:
        entities[x.lang_a].add(x.entity_a)
        entities[x.lang_b].add(x.entity_b)
    return KgVocab(entities, relations)


@dataclass(frozen=True)
class LpSplit:
    train: tuple[Triple, ...]
    test: tuple[Triple, ...]
    seed: int
    ratio: float
    removed: tuple[Triple, ...] = ()  # dropped from test by the inverse rule


def split_lp(triples: Sequence[Triple], ratio: float, seed: int) -> LpSplit:
    """Per-language stratified train/test split with redundant-inverse removal.

    A sampled test triple (e1, r1, e2) is dropped entirely when any train
    triple (e2, r2, e1) of the same language exists, for any r2.
    """
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must be in (0, 1), got {ratio}")
    uniq = list(dict.fromkeys(triples))  # dedupe, keep first-seen order
    by_lang: dict[str, list[int]] = defaultdict(list)
    for i, t in enumerate(uniq):
        by_lang[t.lang].append(i)

    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for lang in sorted(by_lang):
        idx = by_lang[lang]
        n_test = int(len(idx) * ratio)
        if n_test == 0:
            continue
        pick = rng.choice(len(idx), size=n_test, replace=False)
        test_idx.update(idx[p] for p in pick)

    train = tuple(t for i, t in enumerate(uniq) if i not in test_idx)
    test_sampled = [t for i, t in enumerate(uniq) if i in test_idx]
    train_pairs = {(t.lang, t.subject, t.object) for t in train}
    removed = tuple(t for t in test_sampled if (t.lang, t.object, t.subject) in train_pairs)
    test = tuple(t for t in test_sampled if (t.lang, t.object, t.subject) not in train_pairs)
    return LpSplit(train=train, test=test, seed=seed, ratio=ratio, removed=removed)


def write_split(out_dir: str | Path, split: LpSplit) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_triples(out_dir / "train.tsv", split.train)
    write_triples(out_dir / "test.tsv", split.test)
    manifest = {
        "seed": split.seed,
        "ratio": split.ratio,
        "stratification": "per-language",
        "n_train": len(split.train),
        "n_test": len(split.test),
        "n_inverse_removed": len(split.removed),
    }
    with open(out_dir / "split_manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_split(in_dir: str | Path) -> LpSplit:
    in_dir = Path(in_dir)
    with open(in_dir / "split_manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    return LpSplit(
        train=tuple(parse_triples(in_dir / "train.tsv")),
        test=tuple(parse_triples(in_dir / "test.tsv")),
        seed=manifest["seed"],
        ratio=manifest["ratio"],
    )


class FilteredCandidateIndex:
    """Filtered-setting candidate sets, shared by LM and KGE evaluation.

    For a query (subject, relation, lang) with true object `gold`, candidates
    are the language's full entity set minus every other object o' with
    (subject, relation, o') anywhere in the indexed triples.
    """

    def __init__(self, vocab: KgVocab, triples: Iterable[Triple]):
        self.vocab = vocab
        self._known: dict[tuple[str, str, str], set[str]] = defaultdict(set)
        for t in triples:
            self._known[(t.lang, t.subject, t.relation)].add(t.object)

    def candidates(self, subject: str, relation: str, lang: str, gold: str) -> list[str]:
        if not self.vocab.has_entity(lang, gold):
            raise ValidationError(f"gold entity {gold!r} not in {lang!r} entity vocabulary")
        corrupting = self._known.get((lang, subject, relation), frozenset())
        return [e for e in self.vocab.entities(lang) if e == gold or e not in corrupting]


def filtered_candidates(
    query: tuple[str, str, str],
    all_triples: Iterable[Triple],
    gold: str,
    vocab: KgVocab | None = None,
) -> list[str]:
    """One-shot filtered candidate list for query = (subject, relation, lang)."""
    subject, relation, lang = query
    triples = list(all_triples)
    if vocab is None:
        vocab = build_vocab(triples)
    return FilteredCandidateIndex(vocab, triples).candidates(subject, relation, lang, gold)
