"""Deterministic trainable BPE tokenizer with registered special tokens.

Word-initial characters carry a prepended U+2581 marker so decoding is an
exact inverse of encoding for any space pattern. Merge-pair frequency ties
break lexicographically, making training deterministic.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, ValidationError

WORD_MARK = "▁"

BOS = "<s>"
SEP = "</s>"
S_MARK = "[S]"
P_MARK = "[P]"
O_MARK = "[O]"
EOS = "[EOS]"
UNK = "[UNK]"
PAD = "[PAD]"
BASE_SPECIALS = (BOS, SEP, S_MARK, P_MARK, O_MARK, EOS, UNK, PAD)

FORMAT_HEADER = "kglm-bpe v1"


def lan_token(lang: str) -> str:
    return f"[LAN_{lang.upper()}]"


class Tokenizer:
    """Immutable after construction; encode/decode are thread-safe."""

    def __init__(self, alphabet: Sequence[str], merges: Sequence[tuple[str, str]], languages: Sequence[str]):
        self.languages = tuple(sorted(set(languages)))
        self.specials = BASE_SPECIALS + tuple(lan_token(l) for l in self.languages)
        self.alphabet = tuple(sorted(set(alphabet)))
        self.merges = tuple((a, b) for a, b in merges)

        symbols = list(self.specials) + list(self.alphabet)
        for a, b in self.merges:
            symbols.append(a + b)
        # distinct merge chains can yield the same surface symbol; ids stay dense
        self.vocab: dict[str, int] = {}
        for sym in symbols:
            if sym not in self.vocab:
                self.vocab[sym] = len(self.vocab)
        self.id_to_sym = {i: s for s, i in self.vocab.items()}
        self._special_ids = frozenset(self.vocab[s] for s in self.specials)
        self._merge_rank = {pair: i for i, pair in enumerate(self.merges)}
        self._word_cache: dict[str, tuple[int, ...]] = {}

        self.bos_id = self.vocab[BOS]
        self.sep_id = self.vocab[SEP]
        self.s_id = self.vocab[S_MARK]
        self.p_id = self.vocab[P_MARK]
        self.o_id = self.vocab[O_MARK]
        self.eos_id = self.vocab[EOS]
        self.unk_id = self.vocab[UNK]
        self.pad_id = self.vocab[PAD]

    def __len__(self) -> int:
        return len(self.vocab)

    def lan_id(self, lang: str) -> int:
        tok = lan_token(lang)
        if tok not in self.vocab:
            raise ValidationError(f"language {lang!r} not registered with this tokenizer")
        return self.vocab[tok]

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids

    def _encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        if word:
            syms = [WORD_MARK + word[0]] + list(word[1:])
        else:
            syms = [WORD_MARK]  # empty word: consecutive/leading space
        while len(syms) > 1:
            best = None
            best_rank = len(self._merge_rank)
            for i in range(len(syms) - 1):
                rank = self._merge_rank.get((syms[i], syms[i + 1]), -1)
                if rank >= 0 and rank < best_rank:
                    best, best_rank = (syms[i], syms[i + 1]), rank
            if best is None:
                break
            merged = best[0] + best[1]
            out: list[str] = []
            i = 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            syms = out
        ids = tuple(self.vocab.get(s, self.unk_id) for s in syms)
        self._word_cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        text = unicodedata.normalize("NFC", text)
        ids: list[int] = []
        for word in text.split(" "):
            ids.extend(self._encode_word(word))
        return ids if text else []

    def decode(self, ids: Iterable[int]) -> str:
        parts: list[str] = []
        for i in ids:
            sym = self.id_to_sym.get(int(i))
            if sym is None:
                raise ValidationError(f"token id {i} out of range (vocab size {len(self.vocab)})")
            parts.append(sym)
        text = "".join(parts).replace(WORD_MARK, " ")
        if text.startswith(" "):
            text = text[1:]
        return text

    def save(self, path: str | Path) -> None:
        lines = [FORMAT_HEADER]
        lines.append(f"languages\t{len(self.languages)}")
        lines.extend(self.languages)
        lines.append(f"alphabet\t{len(self.alphabet)}")
        lines.extend(json.dumps(sym, ensure_ascii=False) for sym in self.alphabet)
        lines.append(f"merges\t{len(self.merges)}")
        lines.extend(json.dumps([a, b], ensure_ascii=False) for a, b in self.merges)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != FORMAT_HEADER:
            raise DataError(f"{path}: not a {FORMAT_HEADER!r} file")
        pos = 1

        def section(name: str) -> int:
            nonlocal pos
            tag, _, count = lines[pos].partition("\t")
            if tag != name:
                raise DataError(f"{path}: expected section {name!r}, found {lines[pos]!r}")
            pos += 1
            return int(count)

        n = section("languages")
        languages = lines[pos : pos + n]
        pos += n
        n = section("alphabet")
        alphabet = [json.loads(l) for l in lines[pos : pos + n]]
        pos += n
        n = section("merges")
        merges = [tuple(json.loads(l)) for l in lines[pos : pos + n]]
        return cls(alphabet, merges, languages)

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(FORMAT_HEADER.encode())
        h.update(json.dumps([self.languages, self.alphabet, self.merges]).encode())
        return h.hexdigest()


def _word_counts(corpus: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for text in corpus:
        text = unicodedata.normalize("NFC", text)
        for word in text.split(" "):
            counts[word] += 1
    return counts


def train_bpe(corpus: Sequence[str], merges: int, languages: Iterable[str] = ()) -> Tokenizer:
    """Train a BPE tokenizer; deterministic given corpus order and merge count."""
    if not corpus:
        raise DataError("cannot train a tokenizer on an empty corpus")
    if merges < 0:
        raise ValidationError(f"merge count must be >= 0, got {merges}")

    word_counts = _word_counts(corpus)
    alphabet: set[str] = set()
    pieces: dict[str, list[str]] = {}
    for word in word_counts:
        if word:
            syms = [WORD_MARK + word[0]] + list(word[1:])
        else:
            syms = [WORD_MARK]
        pieces[word] = syms
        alphabet.update(syms)

    learned: list[tuple[str, str]] = []
    for _ in range(merges):
        pair_counts: Counter = Counter()
        for word, syms in pieces.items():
            freq = word_counts[word]
            for i in range(len(syms) - 1):
                pair_counts[(syms[i], syms[i + 1])] += freq
        if not pair_counts:
            break
        top = max(pair_counts.values())
        best = min(p for p, c in pair_counts.items() if c == top)
        learned.append(best)
        merged = best[0] + best[1]
        for word, syms in pieces.items():
            out: list[str] = []
            i = 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            pieces[word] = out

    return Tokenizer(sorted(alphabet), learned, languages)
