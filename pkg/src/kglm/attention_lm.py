"""Small pre-LN transformer LM with additive object-causal attention masks.

Two mask realizations are supported:
  paper_literal: non-object rows attend everywhere; object-region rows
                 (object subtokens + [EOS]) attend causally.
  strict_prefix: prefix rows additionally stay inside the prefix, closing
                 the two-hop leak paper_literal has with >= 2 layers.

The LM loss sums -log P over the object region only; batch loss is the mean
of per-fact sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, log_softmax, softmax
from .errors import LengthError, ValidationError
from .linearizer import LinearizedFact, object_region

NEG_INF = float("-inf")
MASK_MODES = ("strict_prefix", "paper_literal")


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    ffn_dim: int = 256
    l_max: int = 30
    dropout: float = 0.1
    mask_mode: str = "strict_prefix"
    tie_output: bool = False
    dtype: str = "float32"  # float64 for gradient-check builds

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValidationError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.mask_mode not in MASK_MODES:
            raise ValidationError(f"unknown mask mode {self.mask_mode!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelParams:
    """Named parameter tensors. Ordering is fixed by `names` for checkpoints."""

    def __init__(self, cfg: ModelConfig, arrays: dict[str, np.ndarray]):
        self.cfg = cfg
        self.arrays = arrays
        missing = set(param_names(cfg)) - set(arrays)
        if missing:
            raise ValidationError(f"missing parameter tensors: {sorted(missing)}")

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
        a: dict[str, np.ndarray] = {}

        def normal(*shape):
            return (rng.normal(0.0, 0.02, size=shape)).astype(dt)

        a["tok_emb"] = normal(v, d)
        a["pos_emb"] = normal(cfg.l_max, d)
        for i in range(cfg.layers):
            p = f"L{i}."
            a[p + "ln1_g"] = np.ones(d, dt)
            a[p + "ln1_b"] = np.zeros(d, dt)
            for w in ("wq", "wk", "wv", "wo"):
                a[p + w] = normal(d, d)
            for b in ("bq", "bk", "bv", "bo"):
                a[p + b] = np.zeros(d, dt)
            a[p + "ln2_g"] = np.ones(d, dt)
            a[p + "ln2_b"] = np.zeros(d, dt)
            a[p + "w1"] = normal(d, f)
            a[p + "b1"] = np.zeros(f, dt)
            a[p + "w2"] = normal(f, d)
            a[p + "b2"] = np.zeros(d, dt)
        a["lnf_g"] = np.ones(d, dt)
        a["lnf_b"] = np.zeros(d, dt)
        if not cfg.tie_output:
            a["out_w"] = normal(d, v)
        return cls(cfg, a)

    @property
    def names(self) -> list[str]:
        return param_names(self.cfg)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype: str) -> "ModelParams":
        cfg = ModelConfig.from_dict({**self.cfg.to_dict(), "dtype": dtype})
        return ModelParams(cfg, {k: v.astype(dtype) for k, v in self.arrays.items()})


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.layers):
        p = f"L{i}."
        names += [p + n for n in (
            "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
        )]
    names += ["lnf_g", "lnf_b"]
    if not cfg.tie_output:
        names.append("out_w")
    return names


@dataclass
class AttentionMask:
    m: np.ndarray  # (l, l) additive, entries in {0, -inf}
    mode: str


def build_mask(f: LinearizedFact, mode: str = "strict_prefix") -> AttentionMask:
    if mode not in MASK_MODES:
        raise ValidationError(f"unknown mask mode {mode!r}")
    n = len(f)
    m = np.zeros((n, n), dtype=np.float32)
    region = object_region(f)
    if mode == "paper_literal":
        for i in region:
            m[i, i + 1 :] = NEG_INF
    else:
        start = f.object_start
        m[:start, start:] = NEG_INF  # prefix rows stay inside the prefix
        for i in range(start, n):
            m[i, i + 1 :] = NEG_INF  # causal region from [O] onward
    return AttentionMask(m=m, mode=mode)


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * g + b


def _gelu(x: Tensor) -> Tensor:
    # tanh approximation
    inner = (x + x * x * x * 0.044715) * 0.7978845608028654
    return x * (inner.tanh() + 1.0) * 0.5


def _dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValidationError("train-mode dropout needs an RNG")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * Tensor(keep)


def forward_graph(
    pt: dict[str, Tensor],
    cfg: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Batched forward on the autodiff graph.

    ids: (B, l) int; mask: (B, l, l) or (l, l) additive. Returns final hidden
    states (B, l, d) and logits (B, l, V).
    """
    B, l = ids.shape
    if l > cfg.l_max:
        raise LengthError(f"sequence length {l} exceeds l_max {cfg.l_max}")
    if mask.ndim == 2:
        mask = mask[None, :, :]
    mask_t = Tensor(mask[:, None, :, :])  # broadcast over heads

    x = pt["tok_emb"][ids] + pt["pos_emb"][:l]
    x = _dropout(x, cfg.dropout, train_mode, rng)
    nh, dh = cfg.heads, cfg.d_model // cfg.heads
    scale = 1.0 / np.sqrt(dh)

    for i in range(cfg.layers):
        p = f"L{i}."
        h = _layer_norm(x, pt[p + "ln1_g"], pt[p + "ln1_b"])

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, l, nh, dh).transpose(0, 2, 1, 3)

        q = heads(h @ pt[p + "wq"] + pt[p + "bq"])
        k = heads(h @ pt[p + "wk"] + pt[p + "bk"])
        v = heads(h @ pt[p + "wv"] + pt[p + "bv"])
        scores = q @ k.transpose(0, 1, 3, 2) * scale + mask_t
        att = softmax(scores, axis=-1)
        att = _dropout(att, cfg.dropout, train_mode, rng)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, l, cfg.d_model)
        out = ctx @ pt[p + "wo"] + pt[p + "bo"]
        x = x + _dropout(out, cfg.dropout, train_mode, rng)

        h = _layer_norm(x, pt[p + "ln2_g"], pt[p + "ln2_b"])
        f = _gelu(h @ pt[p + "w1"] + pt[p + "b1"]) @ pt[p + "w2"] + pt[p + "b2"]
        x = x + _dropout(f, cfg.dropout, train_mode, rng)

    hidden = _layer_norm(x, pt["lnf_g"], pt["lnf_b"])
    out_w = pt["tok_emb"].transpose(1, 0) if cfg.tie_output else pt["out_w"]
    logits = hidden @ out_w
    return hidden, logits


def wrap_params(params: ModelParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.arrays.items()}


def forward(
    params: ModelParams,
    ids: Sequence[int],
    mask: AttentionMask | np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-sequence forward: returns (hidden (l, d), logits (l, V))."""
    m = mask.m if isinstance(mask, AttentionMask) else np.asarray(mask)
    ids_arr = np.asarray(ids, dtype=np.int64)[None, :]
    hidden, logits = forward_graph(wrap_params(params), params.cfg, ids_arr, m, train_mode, rng)
    return hidden.data[0], logits.data[0]


def forward_batch(
    params: ModelParams,
    ids: np.ndarray,
    masks: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Batched forward returning logits (B, l, V)."""
    _, logits = forward_graph(wrap_params(params), params.cfg, ids, masks, train_mode, rng)
    return logits.data


def _logsumexp(row: np.ndarray) -> float:
    c = row.max()
    return float(c + np.log(np.exp(row - c).sum()))


def lm_loss(logits: np.ndarray, f: LinearizedFact) -> float:
    """Sum of -log P(x_t | x_{<t}) over the fact's object region (no averaging)."""
    region = object_region(f)
    if len(region) == 0:
        raise ValidationError("fact has an empty object region")
    total = 0.0
    for t in region:
        row = np.asarray(logits[t - 1], dtype=np.float64)
        total += _logsumexp(row) - float(row[f.ids[t]])
    return total


def pad_batch(
    facts: Sequence[LinearizedFact],
    pad_id: int,
    mode: str,
) -> tuple[np.ndarray, np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Pad facts to a common length; returns ids, masks, and target indices.

    Padded key positions are -inf for every query; padded query rows attend
    only to themselves (kept finite, excluded from the loss). Target indices
    are (batch_row, position, token_id) triplets covering each fact's object
    region.
    """
    B = len(facts)
    L = max(len(f) for f in facts)
    ids = np.full((B, L), pad_id, dtype=np.int64)
    masks = np.full((B, L, L), NEG_INF, dtype=np.float32)
    rows_b: list[int] = []
    rows_t: list[int] = []
    targets: list[int] = []
    for b, f in enumerate(facts):
        n = len(f)
        ids[b, :n] = f.ids
        masks[b, :n, :n] = build_mask(f, mode).m
        masks[b, n:, :] = NEG_INF
        for i in range(n, L):
            masks[b, i, i] = 0.0
        for t in object_region(f):
            rows_b.append(b)
            rows_t.append(t - 1)
            targets.append(f.ids[t])
    return ids, masks, (np.asarray(rows_b), np.asarray(rows_t), np.asarray(targets))


def batch_loss_graph(
    pt: dict[str, Tensor],
    cfg: ModelConfig,
    facts: Sequence[LinearizedFact],
    pad_id: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean over facts of per-fact object-region loss sums, on the graph."""
    ids, masks, (rb, rt, tgt) = pad_batch(facts, pad_id, cfg.mask_mode)
    _, logits = forward_graph(pt, cfg, ids, masks, train_mode, rng)
    rows = logits[(rb, rt)]  # (n_targets, V)
    logp = log_softmax(rows, axis=-1)
    picked = logp[(np.arange(len(tgt)), tgt)]
    return -picked.sum() / float(len(facts))


def grad(
    params: ModelParams,
    facts: Sequence[LinearizedFact],
    pad_id: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Exact gradients of the mean LM loss w.r.t. every parameter tensor."""
    if not facts:
        raise ValidationError("cannot compute gradients for an empty batch")
    pt = wrap_params(params, requires_grad=True)
    loss = batch_loss_graph(pt, params.cfg, facts, pad_id, train_mode, rng)
    loss.backward()
    return float(loss.data), {k: t.grad for k, t in pt.items()}
