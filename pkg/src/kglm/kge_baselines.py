"""TransE, ComplEx, and RotatE scorers and trainers.

Scorers are direct numpy formulas (oracle-checkable to 1e-10). Training runs
on the autodiff engine with uniform head/tail corruption, margin ranking loss
for the distance models, logistic loss for ComplEx, and optional
self-adversarial negative weighting. Complex values are stored as
[real || imag] halves of one float array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DataError, UnsupportedQueryError, ValidationError
from .kg_store import LpSplit, Triple
from .trainer import AdamState, adam_step

KINDS = ("transe", "complex", "rotate")


def transe_score(h: np.ndarray, r: np.ndarray, t: np.ndarray) -> float:
    """-||h + r - t||_2 (higher is better)."""
    return -float(np.linalg.norm(np.asarray(h) + np.asarray(r) - np.asarray(t)))


def complex_score(h: np.ndarray, r: np.ndarray, t: np.ndarray) -> float:
    """Re(sum_i h_i * r_i * conj(t_i)) over complex vectors."""
    h = np.asarray(h, dtype=np.complex128)
    r = np.asarray(r, dtype=np.complex128)
    t = np.asarray(t, dtype=np.complex128)
    return float(np.real(np.sum(h * r * np.conj(t))))


def rotate_score(h: np.ndarray, r: np.ndarray, t: np.ndarray, tol: float = 1e-6) -> float:
    """-||h o r - t|| with element-wise complex product; relation must be unit-modulus."""
    h = np.asarray(h, dtype=np.complex128)
    r = np.asarray(r, dtype=np.complex128)
    t = np.asarray(t, dtype=np.complex128)
    if np.max(np.abs(np.abs(r) - 1.0)) > tol:
        raise ValidationError("rotate relation has non-unit modulus entries")
    return -float(np.linalg.norm(h * r - t))


@dataclass
class KgeConfig:
    dim: int = 64
    epochs: int = 200
    negatives: int = 8
    lr: float = 0.05
    margin: float = 2.0
    batch: int = 128
    self_adversarial: bool = False
    adv_temperature: float = 1.0
    seed: int = 0


class KgeModel:
    """Entity/relation tables keyed by (lang, surface); unseen entities are
    unsupported at inference (contrast with the LM decoder)."""

    def __init__(
        self,
        kind: str,
        ent_keys: Sequence[tuple[str, str]],
        rel_keys: Sequence[tuple[str, str]],
        ent_emb: np.ndarray,
        rel_emb: np.ndarray,
        dim: int,
        margin: float,
    ):
        if kind not in KINDS:
            raise ValidationError(f"unknown KGE kind {kind!r}")
        self.kind = kind
        self.dim = dim
        self.margin = margin
        self.ent_index = {k: i for i, k in enumerate(ent_keys)}
        self.rel_index = {k: i for i, k in enumerate(rel_keys)}
        self.ent_emb = ent_emb
        self.rel_emb = rel_emb

    def _complex(self, arr: np.ndarray) -> np.ndarray:
        return arr[: self.dim] + 1j * arr[self.dim :]

    def entity_vector(self, lang: str, entity: str) -> np.ndarray:
        key = (lang, entity)
        if key not in self.ent_index:
            raise UnsupportedQueryError(f"entity {entity!r}@{lang} unseen in KGE training")
        row = self.ent_emb[self.ent_index[key]]
        return row if self.kind == "transe" else self._complex(row)

    def relation_vector(self, lang: str, relation: str) -> np.ndarray:
        key = (lang, relation)
        if key not in self.rel_index:
            raise UnsupportedQueryError(f"relation {relation!r}@{lang} unseen in KGE training")
        row = self.rel_emb[self.rel_index[key]]
        return row if self.kind == "transe" else self._complex(row)

    def score(self, triple: Triple) -> float:
        h = self.entity_vector(triple.lang, triple.subject)
        r = self.relation_vector(triple.lang, triple.relation)
        t = self.entity_vector(triple.lang, triple.object)
        if self.kind == "transe":
            return transe_score(h, r, t)
        if self.kind == "complex":
            return complex_score(h, r, t)
        return rotate_score(h, r, t)

    def rank(self, subject: str, relation: str, lang: str, candidates: Sequence[str]) -> list[tuple[str, float]]:
        """Candidates ranked by descending score; unknown candidates sink to the
        bottom with -inf. Unknown subject/relation raises UnsupportedQueryError."""
        self.entity_vector(lang, subject)
        self.relation_vector(lang, relation)
        scores = []
        for c in candidates:
            try:
                scores.append(self.score(Triple(lang, subject, relation, c)))
            except UnsupportedQueryError:
                scores.append(-math.inf)
        order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
        return [(candidates[i], scores[i]) for i in order]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            width = self.ent_emb.shape[1]
            f.write(f"kglm-kge v1\t{self.kind}\t{self.dim}\t{width}\t{self.margin!r}\n")
            f.write(f"entities\t{len(self.ent_index)}\n")
            for (lang, ent), i in self.ent_index.items():
                vals = " ".join(repr(float(x)) for x in self.ent_emb[i])
                f.write(f"{lang}\t{ent}\t{vals}\n")
            f.write(f"relations\t{len(self.rel_index)}\n")
            for (lang, rel), i in self.rel_index.items():
                vals = " ".join(repr(float(x)) for x in self.rel_emb[i])
                f.write(f"{lang}\t{rel}\t{vals}\n")

    @classmethod
    def load(cls, path: str | Path) -> "KgeModel":
        with open(path, encoding="utf-8") as f:
            head = f.readline().rstrip("\n").split("\t")
            if head[0] != "kglm-kge v1":
                raise DataError(f"{path}: not a kglm-kge v1 file")
            kind, dim, width, margin = head[1], int(head[2]), int(head[3]), float(head[4])

            def table(tag: str):
                label, count = f.readline().rstrip("\n").split("\t")
                if label != tag:
                    raise DataError(f"{path}: expected {tag!r} section")
                keys, rows = [], []
                for _ in range(int(count)):
                    lang, name, vals = f.readline().rstrip("\n").split("\t")
                    keys.append((lang, name))
                    rows.append([float(x) for x in vals.split(" ")])
                return keys, np.asarray(rows, dtype=np.float64).reshape(int(count), width)

            ent_keys, ent_emb = table("entities")
            rel_keys, rel_emb = table("relations")
        return cls(kind, ent_keys, rel_keys, ent_emb, rel_emb, dim, margin)


def _split_halves(x: Tensor, dim: int) -> tuple[Tensor, Tensor]:
    return x[..., :dim], x[..., dim:]


def _score_graph(kind: str, dim: int, h: Tensor, r: Tensor, t: Tensor) -> Tensor:
    """Batched scores on the graph; last axis is the embedding width."""
    if kind == "transe":
        d = h + r - t
        return -(((d * d).sum(axis=-1)) + 1e-12).sqrt()
    h_re, h_im = _split_halves(h, dim)
    r_re, r_im = _split_halves(r, dim)
    t_re, t_im = _split_halves(t, dim)
    hr_re = h_re * r_re - h_im * r_im
    hr_im = h_re * r_im + h_im * r_re
    if kind == "complex":
        return (hr_re * t_re + hr_im * t_im).sum(axis=-1)
    d_re = hr_re - t_re
    d_im = hr_im - t_im
    return -((d_re * d_re + d_im * d_im).sum(axis=-1) + 1e-12).sqrt()


def _softplus(x: Tensor) -> Tensor:
    # stable log(1 + exp(x))
    ax = x.relu() + (-x).relu()
    return x.relu() + ((-ax).exp() + 1.0).log()


def _project_rotate(rel_emb: np.ndarray, dim: int) -> None:
    re, im = rel_emb[:, :dim], rel_emb[:, dim:]
    mod = np.sqrt(re * re + im * im)
    rel_emb[:, :dim] = re / mod
    rel_emb[:, dim:] = im / mod


def init_kge(kind: str, split: LpSplit, cfg: KgeConfig) -> KgeModel:
    ent_keys = sorted({(t.lang, e) for t in split.train for e in (t.subject, t.object)})
    rel_keys = sorted({(t.lang, t.relation) for t in split.train})
    rng = np.random.default_rng(cfg.seed)
    width = cfg.dim if kind == "transe" else 2 * cfg.dim
    scale = 1.0 / math.sqrt(cfg.dim)
    ent_emb = rng.normal(0.0, scale, size=(len(ent_keys), width))
    if kind == "rotate":
        theta = rng.uniform(0.0, 2.0 * math.pi, size=(len(rel_keys), cfg.dim))
        rel_emb = np.concatenate([np.cos(theta), np.sin(theta)], axis=1)
    else:
        rel_emb = rng.normal(0.0, scale, size=(len(rel_keys), width))
    return KgeModel(kind, ent_keys, rel_keys, ent_emb, rel_emb, cfg.dim, cfg.margin)


def train_kge(kind: str, split: LpSplit, cfg: KgeConfig | None = None) -> KgeModel:
    """Negative-sampling training; deterministic under cfg.seed."""
    cfg = cfg or KgeConfig()
    if not split.train:
        raise DataError("KGE training needs a non-empty train set")
    model = init_kge(kind, split, cfg)
    rng = np.random.default_rng(cfg.seed + 1)

    ents_by_lang: dict[str, list[int]] = {}
    for (lang, _), i in model.ent_index.items():
        ents_by_lang.setdefault(lang, []).append(i)
    h_idx = np.asarray([model.ent_index[(t.lang, t.subject)] for t in split.train])
    r_idx = np.asarray([model.rel_index[(t.lang, t.relation)] for t in split.train])
    t_idx = np.asarray([model.ent_index[(t.lang, t.object)] for t in split.train])
    lang_pool = [np.asarray(ents_by_lang[t.lang]) for t in split.train]

    state = AdamState({"ent": model.ent_emb, "rel": model.rel_emb}, 0.9, 0.999, 1e-8)
    n = len(split.train)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            rows = order[start : start + cfg.batch]
            B = len(rows)
            neg_ent = np.empty((B, cfg.negatives), dtype=np.int64)
            for j, row in enumerate(rows):
                neg_ent[j] = rng.choice(lang_pool[row], size=cfg.negatives)
            corrupt_head = rng.random((B, cfg.negatives)) < 0.5

            ent = Tensor(model.ent_emb, requires_grad=True)
            rel = Tensor(model.rel_emb, requires_grad=True)
            h = ent[h_idx[rows]]
            r = rel[r_idx[rows]]
            t = ent[t_idx[rows]]
            s_pos = _score_graph(kind, cfg.dim, h, r, t)

            neg = ent[neg_ent]  # (B, N, width)
            mask_h = Tensor(corrupt_head[:, :, None].astype(np.float64))
            h_neg = neg * mask_h + h.reshape(B, 1, -1) * (1.0 - mask_h)
            t_neg = t.reshape(B, 1, -1) * mask_h + neg * (1.0 - mask_h)
            s_neg = _score_graph(kind, cfg.dim, h_neg, r.reshape(B, 1, -1), t_neg)  # (B, N)

            if kind == "complex":
                loss = (_softplus(-s_pos).sum() + _softplus(s_neg).mean(axis=1).sum()) / B
            else:
                viol = (s_neg - s_pos.reshape(B, 1) + cfg.margin).relu()
                if cfg.self_adversarial:
                    w = s_neg.data * cfg.adv_temperature
                    w = np.exp(w - w.max(axis=1, keepdims=True))
                    w /= w.sum(axis=1, keepdims=True)
                    loss = (viol * Tensor(w)).sum() / B
                else:
                    loss = viol.mean(axis=1).sum() / B
            loss.backward()
            adam_step({"ent": model.ent_emb, "rel": model.rel_emb}, {"ent": ent.grad, "rel": rel.grad}, state, cfg.lr)
            if kind == "rotate":
                _project_rotate(model.rel_emb, cfg.dim)
    return model
