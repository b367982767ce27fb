"""Entity embeddings: extraction, contrastive calibration, alignment, retrieval.

Entities are encoded as `<s> [S] X_s </s>` with full (unmasked) self-attention
and pooled either by averaging hidden rows or taking the first position.
Calibration is dropout-twin InfoNCE over in-batch negatives; alignment is
orthogonal Procrustes; retrieval supports cosine and CSLS.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention_lm import NEG_INF, ModelParams, forward_graph, wrap_params
from .autodiff import Tensor, log_softmax
from .errors import DataError, ValidationError
from .tokenizer import Tokenizer
from .trainer import AdamState, adam_step

POOLINGS = ("mean_over_tokens", "first_position")


def entity_token_ids(surface: str, tok: Tokenizer) -> list[int]:
    return [tok.bos_id, tok.s_id] + tok.encode(surface) + [tok.sep_id]


def _pool(hidden: Tensor, lengths: np.ndarray, pooling: str) -> Tensor:
    if pooling == "first_position":
        return hidden[(np.arange(hidden.shape[0]), np.zeros(hidden.shape[0], dtype=np.int64))]
    if pooling == "mean_over_tokens":
        B, L, _ = hidden.shape
        w = (np.arange(L)[None, :] < lengths[:, None]).astype(hidden.data.dtype)
        w = w / w.sum(axis=1, keepdims=True)
        return (hidden * Tensor(w[:, :, None])).sum(axis=1)
    raise ValidationError(f"unknown pooling {pooling!r}")


def _encode_graph(
    pt: dict,
    params_cfg,
    tok: Tokenizer,
    surfaces: Sequence[str],
    pooling: str,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    dropout_override: float | None = None,
) -> Tensor:
    seqs = [entity_token_ids(s, tok) for s in surfaces]
    lengths = np.asarray([len(s) for s in seqs])
    L = int(lengths.max())
    if L > params_cfg.l_max:
        raise ValidationError(f"entity string needs {L} tokens, l_max is {params_cfg.l_max}")
    B = len(seqs)
    ids = np.full((B, L), tok.pad_id, dtype=np.int64)
    masks = np.zeros((B, L, L), dtype=np.float32)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
        masks[b, :, len(s) :] = NEG_INF  # full attention over real positions only
    cfg = params_cfg
    if dropout_override is not None:
        from .attention_lm import ModelConfig

        cfg = ModelConfig.from_dict({**params_cfg.to_dict(), "dropout": dropout_override})
    hidden, _ = forward_graph(pt, cfg, ids, masks, train_mode=train_mode, rng=rng)
    return _pool(hidden, lengths, pooling)


def embed_entity(
    params: ModelParams, tok: Tokenizer, surface: str, pooling: str = "mean_over_tokens"
) -> np.ndarray:
    """Deterministic entity vector (dropout disabled)."""
    return embed_batch(params, tok, [surface], pooling)[0]


def embed_batch(
    params: ModelParams, tok: Tokenizer, surfaces: Sequence[str], pooling: str = "mean_over_tokens"
) -> np.ndarray:
    out = _encode_graph(wrap_params(params), params.cfg, tok, surfaces, pooling)
    return out.data


@dataclass
class MirrorConfig:
    epochs: int = 1
    batch: int = 128  # paper's reduced Mirror batch
    temperature: float = 0.04
    lr: float = 2e-4
    dropout: float = 0.1
    seed: int = 0
    pooling: str = "mean_over_tokens"


def info_nce_loss(
    pt: dict, params_cfg, tok: Tokenizer, batch: Sequence[str], cfg: MirrorConfig, rng: np.random.Generator
) -> Tensor:
    """Symmetric InfoNCE over a self-duplicated batch with dropout twin views."""
    z1 = _encode_graph(pt, params_cfg, tok, batch, cfg.pooling, True, rng, cfg.dropout)
    z2 = _encode_graph(pt, params_cfg, tok, batch, cfg.pooling, True, rng, cfg.dropout)

    def normalize(z: Tensor) -> Tensor:
        n = (z * z).sum(axis=-1, keepdims=True).sqrt()
        return z / n

    sims = (normalize(z1) @ normalize(z2).transpose(1, 0)) / cfg.temperature
    diag = (np.arange(len(batch)), np.arange(len(batch)))
    loss_12 = -log_softmax(sims, axis=1)[diag].mean()
    loss_21 = -log_softmax(sims, axis=0)[diag].mean()
    return (loss_12 + loss_21) * 0.5


def mirror_calibrate(
    params: ModelParams, tok: Tokenizer, strings: Sequence[str], cfg: MirrorConfig | None = None
) -> tuple[ModelParams, list[float]]:
    """Contrastive calibration; returns updated params and the loss trace."""
    cfg = cfg or MirrorConfig()
    if len(strings) < 2:
        raise DataError("calibration needs at least 2 strings")
    if cfg.batch > len(strings):
        raise DataError(f"batch size {cfg.batch} exceeds corpus size {len(strings)}")
    out = params.copy()
    state = AdamState(out.arrays, 0.9, 0.98, 1e-8)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(strings))
        for start in range(0, len(strings), cfg.batch):
            chunk = [strings[i] for i in order[start : start + cfg.batch]]
            if len(chunk) < 2:
                continue
            pt = wrap_params(out, requires_grad=True)
            loss = info_nce_loss(pt, out.cfg, tok, chunk, cfg, rng)
            loss.backward()
            adam_step(out, {k: t.grad for k, t in pt.items()}, state, cfg.lr)
            losses.append(float(loss.data))
    return out, losses


class EmbeddingSpace:
    """(lang, entity) -> vector table with extraction metadata."""

    def __init__(
        self,
        langs: Sequence[str],
        entities: Sequence[str],
        vectors: np.ndarray,
        pooling: str,
        checkpoint_hash: str = "",
    ):
        vectors = np.asarray(vectors)
        if not (len(langs) == len(entities) == vectors.shape[0]):
            raise ValidationError("langs/entities/vectors lengths disagree")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("embedding space contains non-finite vectors")
        pairs = list(zip(langs, entities))
        if len(set(pairs)) != len(pairs):
            raise ValidationError("duplicate (lang, entity) entries")
        self.langs = list(langs)
        self.entities = list(entities)
        self.vectors = vectors
        self.pooling = pooling
        self.checkpoint_hash = checkpoint_hash

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, lang: str) -> "EmbeddingSpace":
        keep = [i for i, l in enumerate(self.langs) if l == lang]
        return EmbeddingSpace(
            [self.langs[i] for i in keep],
            [self.entities[i] for i in keep],
            self.vectors[keep],
            self.pooling,
            self.checkpoint_hash,
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"kglm-emb v1\t{self.dim}\t{len(self)}\t{self.pooling}\t{self.checkpoint_hash}\n")
            for lang, ent, vec in zip(self.langs, self.entities, self.vectors):
                vals = " ".join(repr(float(x)) for x in vec)
                f.write(f"{lang}\t{ent}\t{vals}\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingSpace":
        with open(path, encoding="utf-8") as f:
            header = f.readline().rstrip("\n").split("\t")
            if header[0] != "kglm-emb v1":
                raise DataError(f"{path}: not a kglm-emb v1 file")
            dim, count, pooling, ckpt_hash = int(header[1]), int(header[2]), header[3], header[4]
            langs, ents, vecs = [], [], []
            for line in f:
                lang, ent, vals = line.rstrip("\n").split("\t")
                langs.append(lang)
                ents.append(ent)
                vecs.append([float(x) for x in vals.split(" ")])
        arr = np.asarray(vecs, dtype=np.float64)
        if arr.shape != (count, dim):
            raise DataError(f"{path}: header promises {count}x{dim}, file has {arr.shape}")
        return cls(langs, ents, arr, pooling, ckpt_hash)


def build_space(
    params: ModelParams,
    tok: Tokenizer,
    entries: Sequence[tuple[str, str]],
    pooling: str = "mean_over_tokens",
    checkpoint_hash: str = "",
    batch_size: int = 256,
) -> EmbeddingSpace:
    vecs = []
    surfaces = [e for _, e in entries]
    for start in range(0, len(surfaces), batch_size):
        vecs.append(embed_batch(params, tok, surfaces[start : start + batch_size], pooling))
    return EmbeddingSpace(
        [l for l, _ in entries], surfaces, np.concatenate(vecs, axis=0), pooling, checkpoint_hash
    )


def procrustes_align(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Orthogonal W minimizing ||X @ W - Y|| over paired rows."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        raise ValidationError(f"paired shapes disagree: {X.shape} vs {Y.shape}")
    if X.shape[0] < X.shape[1]:
        raise ValidationError(f"need at least dim={X.shape[1]} pairs, got {X.shape[0]}")
    m = X.T @ Y
    u, s, vt = np.linalg.svd(m)
    if s[-1] < 1e-10 * max(s[0], 1e-300):
        warnings.warn("rank-deficient cross-covariance; alignment is best-effort", stacklevel=2)
    return u @ vt


def _normalize_rows(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError(f"zero vector in {what}: cosine undefined")
    return m / norms


def csls(queries: np.ndarray, targets: np.ndarray, k: int = 10) -> np.ndarray:
    """csls(x, y) = 2 cos(x, y) - r_T(x) - r_S(y) with k-NN mean penalties."""
    qn = _normalize_rows(queries, "queries")
    tn = _normalize_rows(targets, "targets")
    if not 1 <= k <= tn.shape[0]:
        raise ValidationError(f"k must be in [1, {tn.shape[0]}], got {k}")
    cos = qn @ tn.T
    r_t = np.sort(cos, axis=1)[:, -k:].mean(axis=1)  # query -> k nearest targets
    ks = min(k, qn.shape[0])
    r_s = np.sort(cos, axis=0)[-ks:, :].mean(axis=0)  # target -> k nearest queries
    return 2.0 * cos - r_t[:, None] - r_s[None, :]


def retrieve(
    query_vectors: np.ndarray,
    space: EmbeddingSpace,
    metric: str = "cosine",
    top_n: int = 10,
    lang: str | None = None,
    csls_k: int = 10,
) -> list[list[tuple[str, float]]]:
    """Rank space entries per query, descending similarity, index tie-break."""
    pool = space if lang is None else space.subset(lang)
    if len(pool) == 0:
        raise DataError("cannot retrieve from an empty embedding space")
    q = np.atleast_2d(np.asarray(query_vectors, dtype=np.float64))
    if metric == "cosine":
        sims = _normalize_rows(q, "queries") @ _normalize_rows(pool.vectors, "space").T
    elif metric == "csls":
        sims = csls(q, pool.vectors, k=min(csls_k, len(pool)))
    else:
        raise ValidationError(f"unknown metric {metric!r}")
    results = []
    for row in sims:
        order = sorted(range(len(pool)), key=lambda i: (-row[i], i))[:top_n]
        results.append([(pool.entities[i], float(row[i])) for i in order])
    return results
