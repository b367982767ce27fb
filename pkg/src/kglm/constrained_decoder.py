"""Entity-trie constrained beam search plus an exhaustive scoring oracle.

Beam search proceeds in depth-synchronized rounds: every hypothesis at round
t has the same length, so each round is one batched forward pass. A sequence
that consumed [EOS] at a terminal node occupies its beam slot in the round it
was created and is not expanded afterwards. Completed entities keep their
accumulated loss; everything else scores infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention_lm import NEG_INF, ModelParams, build_mask, forward_batch, lm_loss, pad_batch
from .errors import DataError, LengthError, ValidationError
from .kg_store import Triple, XLink
from .linearizer import LinearizedFact, linearize_triple, linearize_xlink, query_prefix
from .tokenizer import Tokenizer


class TrieNode:
    __slots__ = ("children", "entity")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.entity: int | None = None  # candidate index, set on terminal nodes


class EntityTrie:
    """Prefix tree accepting exactly {encode(e) + [EOS] : e in candidates}."""

    def __init__(self, candidates: Sequence[str], tok: Tokenizer):
        if not candidates:
            raise DataError("cannot build an entity trie from an empty candidate set")
        self.entities = list(candidates)
        self.root = TrieNode()
        max_tokens = 0
        for idx, ent in enumerate(self.entities):
            ids = tok.encode(ent)
            max_tokens = max(max_tokens, len(ids))
            node = self.root
            for i in ids:
                node = node.children.setdefault(i, TrieNode())
            terminal = node.children.setdefault(tok.eos_id, TrieNode())
            if terminal.entity is not None:
                raise ValidationError(
                    f"candidates {self.entities[terminal.entity]!r} and {ent!r} share one tokenization"
                )
            terminal.entity = idx
        self.depth = max_tokens + 1  # +1 for the [EOS] step

    def accepts(self, ids: Sequence[int]) -> int | None:
        node = self.root
        for i in ids:
            node = node.children.get(i)
            if node is None:
                return None
        return node.entity


def build_trie(candidates: Sequence[str], tok: Tokenizer) -> EntityTrie:
    return EntityTrie(candidates, tok)


@dataclass
class BeamHypothesis:
    ids: tuple[int, ...]
    loss: float
    node: TrieNode


@dataclass
class ForwardCounter:
    """Counts sequences encoded, for the L*K efficiency bound."""

    count: int = 0


def _prefix_mask(total_len: int, object_start: int, mode: str) -> np.ndarray:
    m = np.zeros((total_len, total_len), dtype=np.float32)
    if mode == "paper_literal":
        for i in range(object_start + 1, total_len):
            m[i, i + 1 :] = NEG_INF
    else:
        m[:object_start, object_start:] = NEG_INF
        for i in range(object_start, total_len):
            m[i, i + 1 :] = NEG_INF
    return m


def _log_probs(logits_last: np.ndarray) -> np.ndarray:
    rows = logits_last.astype(np.float64)
    c = rows.max(axis=-1, keepdims=True)
    lse = c + np.log(np.exp(rows - c).sum(axis=-1, keepdims=True))
    return rows - lse


def beam_predict(
    params: ModelParams,
    tok: Tokenizer,
    subject: str,
    predicate: str | None,
    trie: EntityTrie,
    K: int = 50,
    xlink_langs: tuple[str, str] | None = None,
    counter: ForwardCounter | None = None,
) -> list[tuple[str, float]]:
    """Depth-synchronized constrained beam search over the entity trie.

    Returns every candidate entity with its accumulated loss (infinity when
    no completed path reached it), ascending, ties broken by candidate index.
    """
    if K < 1:
        raise ValidationError(f"beam width K must be >= 1, got {K}")
    prefix = query_prefix(subject, predicate, xlink_langs, tok)
    object_start = len(prefix) - 1  # index of [O]
    if len(prefix) >= params.cfg.l_max:
        raise LengthError(f"query prefix has {len(prefix)} tokens, l_max is {params.cfg.l_max}")
    mode = params.cfg.mask_mode

    hyps = [BeamHypothesis(ids=tuple(prefix), loss=0.0, node=trie.root)]
    completed: dict[int, float] = {}
    for _depth in range(1, trie.depth + 1):
        # a full fact ends with [EOS] + </s>; only expand while that still fits,
        # so beam and exhaustive_score agree on which entities are scoreable
        alive = [h for h in hyps if h.node.children and len(h.ids) + 2 <= params.cfg.l_max]
        if not alive:
            break
        cur_len = len(alive[0].ids)
        ids = np.asarray([h.ids for h in alive], dtype=np.int64)
        mask = _prefix_mask(cur_len, object_start, mode)
        if counter is not None:
            counter.count += len(alive)
        logits = forward_batch(params, ids, np.broadcast_to(mask, (len(alive), cur_len, cur_len)))
        logp = _log_probs(logits[:, -1, :])
        nxt: list[BeamHypothesis] = []
        for row, h in enumerate(alive):
            for token_id, child in h.node.children.items():
                nl = h.loss - float(logp[row, token_id])
                nxt.append(BeamHypothesis(ids=h.ids + (token_id,), loss=nl, node=child))
                if child.entity is not None:
                    completed[child.entity] = nl
        nxt.sort(key=lambda h: (h.loss, h.ids))
        hyps = nxt[:K]

    order = sorted(range(len(trie.entities)), key=lambda i: (completed.get(i, math.inf), i))
    return [(trie.entities[i], completed.get(i, math.inf)) for i in order]


def exhaustive_score(
    params: ModelParams,
    tok: Tokenizer,
    subject: str,
    predicate: str | None,
    candidates: Sequence[str],
    lang: str = "en",
    xlink_langs: tuple[str, str] | None = None,
    counter: ForwardCounter | None = None,
    batch_size: int = 256,
) -> list[tuple[str, float]]:
    """Score every candidate by the LM loss of its fully linearized fact."""
    facts: list[LinearizedFact | None] = []
    for cand in candidates:
        try:
            if xlink_langs is not None:
                fact = linearize_xlink(
                    XLink(xlink_langs[0], subject, xlink_langs[1], cand), tok, max_len=params.cfg.l_max + 1
                )
            else:
                fact = linearize_triple(
                    Triple(lang, subject, predicate, cand), tok, max_len=params.cfg.l_max + 1
                )
        except LengthError:
            fact = None  # overlong sequence: unreachable by the beam too
        facts.append(fact)

    losses = [math.inf] * len(candidates)
    live = [(i, f) for i, f in enumerate(facts) if f is not None]
    for start in range(0, len(live), batch_size):
        chunk = live[start : start + batch_size]
        ids, masks, _ = pad_batch([f for _, f in chunk], tok.pad_id, params.cfg.mask_mode)
        if counter is not None:
            counter.count += len(chunk)
        logits = forward_batch(params, ids, masks)
        for row, (i, f) in enumerate(chunk):
            losses[i] = lm_loss(logits[row], f)

    order = sorted(range(len(candidates)), key=lambda i: (losses[i], i))
    return [(candidates[i], losses[i]) for i in order]
