"""Render KG facts as role-labeled token sequences.

Monolingual triple:   <s> [S] X_s </s> </s> [P] X_p </s> </s> [O] X_o [EOS] </s>
Cross-lingual link:   <s> [S] X_s </s> </s> [P] [LAN_a] [LAN_b] </s> </s> [O] X_o [EOS] </s>

Only the object subtokens and [EOS] are loss targets; the trailing </s> is
attendable but never a target.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import LengthError
from .kg_store import Triple, XLink
from .tokenizer import Tokenizer

BOS_ROLE = "BOS"
SEP_ROLE = "SEP"
S_MARK_ROLE = "S_MARK"
S_TOK_ROLE = "S_TOK"
P_MARK_ROLE = "P_MARK"
P_TOK_ROLE = "P_TOK"
LAN_TOK_ROLE = "LAN_TOK"
O_MARK_ROLE = "O_MARK"
O_TOK_ROLE = "O_TOK"
EOS_ROLE = "EOS_TOK"

DEFAULT_MAX_LEN = 30


@dataclass(frozen=True)
class LinearizedFact:
    ids: tuple[int, ...]
    roles: tuple[str, ...]
    object_start: int  # index of the [O] marker
    kind: str  # "mono" | "xlink"

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def eos_index(self) -> int:
        return len(self.ids) - 2  # [EOS] sits just before the trailing </s>


def _assemble(
    kind: str,
    subject_ids: list[int],
    predicate: list[tuple[int, str]],
    object_ids: list[int],
    tok: Tokenizer,
    max_len: int,
) -> LinearizedFact:
    ids: list[int] = [tok.bos_id, tok.s_id]
    roles: list[str] = [BOS_ROLE, S_MARK_ROLE]
    ids += subject_ids
    roles += [S_TOK_ROLE] * len(subject_ids)
    ids += [tok.sep_id, tok.sep_id, tok.p_id]
    roles += [SEP_ROLE, SEP_ROLE, P_MARK_ROLE]
    for pid, prole in predicate:
        ids.append(pid)
        roles.append(prole)
    ids += [tok.sep_id, tok.sep_id]
    roles += [SEP_ROLE, SEP_ROLE]
    object_start = len(ids)
    ids.append(tok.o_id)
    roles.append(O_MARK_ROLE)
    ids += object_ids
    roles += [O_TOK_ROLE] * len(object_ids)
    ids += [tok.eos_id, tok.sep_id]
    roles += [EOS_ROLE, SEP_ROLE]
    if len(ids) >= max_len:
        raise LengthError(f"linearized fact has {len(ids)} tokens, limit is < {max_len}")
    return LinearizedFact(ids=tuple(ids), roles=tuple(roles), object_start=object_start, kind=kind)


def linearize_triple(t: Triple, tok: Tokenizer, max_len: int = DEFAULT_MAX_LEN) -> LinearizedFact:
    predicate = [(i, P_TOK_ROLE) for i in tok.encode(t.relation)]
    return _assemble("mono", tok.encode(t.subject), predicate, tok.encode(t.object), tok, max_len)


def linearize_xlink(x: XLink, tok: Tokenizer, max_len: int = DEFAULT_MAX_LEN) -> LinearizedFact:
    predicate = [(tok.lan_id(x.lang_a), LAN_TOK_ROLE), (tok.lan_id(x.lang_b), LAN_TOK_ROLE)]
    return _assemble("xlink", tok.encode(x.entity_a), predicate, tok.encode(x.entity_b), tok, max_len)


def object_region(f: LinearizedFact) -> range:
    """Loss-target positions: the object subtokens plus [EOS], a contiguous range."""
    return range(f.object_start + 1, f.eos_index + 1)


def query_prefix(subject: str, predicate, lang_pair: tuple[str, str] | None, tok: Tokenizer) -> list[int]:
    """Token prefix up to and including [O], for autoregressive object generation.

    `predicate` is a relation surface string for monolingual queries; pass
    `lang_pair=(lang_a, lang_b)` instead for cross-lingual link queries.
    """
    ids = [tok.bos_id, tok.s_id] + tok.encode(subject) + [tok.sep_id, tok.sep_id, tok.p_id]
    if lang_pair is not None:
        ids += [tok.lan_id(lang_pair[0]), tok.lan_id(lang_pair[1])]
    else:
        ids += tok.encode(predicate)
    ids += [tok.sep_id, tok.sep_id, tok.o_id]
    return ids


def debug_dump(f: LinearizedFact, tok: Tokenizer) -> str:
    """One-line `token/ROLE` rendering, e.g. `London/O_TOK`."""
    return " ".join(f"{tok.id_to_sym[i]}/{r}" for i, r in zip(f.ids, f.roles))
