"""Link-prediction metrics, filtered evaluation, transfer/unseen experiments.

A predictor is `callable(subject, relation, lang, candidates) -> ranked list`
(entities, or (entity, score) pairs). Adapters wrap the LM decoder and KGE
models so every path ranks through the identical filtered candidate index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention_lm import ModelConfig, ModelParams
from .constrained_decoder import ForwardCounter, beam_predict, build_trie, exhaustive_score
from .errors import DataError, UnsupportedQueryError, ValidationError
from .kg_store import FilteredCandidateIndex, KgVocab, LpSplit, Triple, build_vocab
from .kge_baselines import KgeModel
from .linearizer import linearize_triple, linearize_xlink
from .tokenizer import Tokenizer, train_bpe
from .trainer import TrainConfig, train
from .synthetic import make_bilingual_kg

log = logging.getLogger(__name__)

Predictor = Callable[[str, str, str, Sequence[str]], Sequence]
DEFAULT_KS = (1, 3, 10)


def _names(ranked: Sequence) -> list[str]:
    return [item[0] if isinstance(item, tuple) else item for item in ranked]


def hits_at_k(ranked_lists: Sequence[Sequence], golds: Sequence[str], ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    if len(ranked_lists) != len(golds):
        raise ValidationError("ranked lists and golds have different lengths")
    if any(k <= 0 for k in ks):
        raise ValidationError(f"ks must be positive, got {tuple(ks)}")
    if not ranked_lists:
        return {k: 0.0 for k in ks}
    out = {}
    for k in ks:
        hit = sum(1 for ranked, gold in zip(ranked_lists, golds) if gold in _names(ranked)[:k])
        out[k] = hit / len(golds)
    return out


def mrr(ranked_lists: Sequence[Sequence], golds: Sequence[str]) -> float:
    """Mean reciprocal rank; a missing gold contributes 0."""
    if not ranked_lists:
        return 0.0
    total = 0.0
    for ranked, gold in zip(ranked_lists, golds):
        names = _names(ranked)
        if gold in names:
            total += 1.0 / (names.index(gold) + 1)
    return total / len(golds)


def lm_beam_predictor(
    params: ModelParams, tok: Tokenizer, K: int = 50, counter: ForwardCounter | None = None
) -> Predictor:
    def predict(subject: str, relation: str, lang: str, candidates: Sequence[str]):
        trie = build_trie(list(candidates), tok)
        return beam_predict(params, tok, subject, relation, trie, K=K, counter=counter)

    return predict


def lm_exhaustive_predictor(
    params: ModelParams, tok: Tokenizer, counter: ForwardCounter | None = None
) -> Predictor:
    def predict(subject: str, relation: str, lang: str, candidates: Sequence[str]):
        return exhaustive_score(params, tok, subject, relation, list(candidates), lang=lang, counter=counter)

    return predict


def kge_predictor(model: KgeModel) -> Predictor:
    return model.rank


@dataclass
class LpReport:
    model: str
    ks: tuple[int, ...]
    per_lang: dict[str, dict]
    averages: dict[int, float]
    n_queries: int
    n_unsupported: int = 0

    def hits(self, k: int, lang: str | None = None) -> float:
        if lang is None:
            return self.averages[k]
        return self.per_lang[lang]["hits"][k]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "ks": list(self.ks),
            "per_lang": {
                lang: {"n": d["n"], "hits": {str(k): v for k, v in d["hits"].items()}}
                for lang, d in self.per_lang.items()
            },
            "averages": {str(k): v for k, v in self.averages.items()},
            "n_queries": self.n_queries,
            "n_unsupported": self.n_unsupported,
        }


def aggregate_report(
    model: str,
    per_query: Sequence[tuple[str, Sequence, str]],
    ks: Sequence[int] = DEFAULT_KS,
    n_unsupported: int = 0,
) -> LpReport:
    """per_query: (lang, ranked, gold) records; micro per language, macro avg."""
    by_lang: dict[str, list[tuple[Sequence, str]]] = {}
    for lang, ranked, gold in per_query:
        by_lang.setdefault(lang, []).append((ranked, gold))
    per_lang = {}
    for lang in sorted(by_lang):
        pairs = by_lang[lang]
        per_lang[lang] = {
            "n": len(pairs),
            "hits": hits_at_k([r for r, _ in pairs], [g for _, g in pairs], ks),
        }
    averages = {
        k: (sum(d["hits"][k] for d in per_lang.values()) / len(per_lang)) if per_lang else 0.0
        for k in ks
    }
    return LpReport(
        model=model,
        ks=tuple(ks),
        per_lang=per_lang,
        averages=averages,
        n_queries=len(per_query),
        n_unsupported=n_unsupported,
    )


def lp_evaluate(
    predictor: Predictor,
    split: LpSplit,
    vocab: KgVocab | None = None,
    filtered: bool = True,
    ks: Sequence[int] = DEFAULT_KS,
    model_name: str = "model",
) -> LpReport:
    """Rank each test triple's gold object among (filtered) candidates."""
    if vocab is None:
        vocab = build_vocab(list(split.train) + list(split.test))
    index = FilteredCandidateIndex(vocab, list(split.train) + list(split.test)) if filtered else None
    records: list[tuple[str, Sequence, str]] = []
    n_unsupported = 0
    for t in split.test:
        if index is not None:
            candidates = index.candidates(t.subject, t.relation, t.lang, t.object)
        else:
            candidates = list(vocab.entities(t.lang))
        try:
            ranked = predictor(t.subject, t.relation, t.lang, candidates)
        except UnsupportedQueryError:
            n_unsupported += 1
            continue
        records.append((t.lang, ranked, t.object))
    return aggregate_report(model_name, records, ks, n_unsupported)


def unseen_eval(
    params: ModelParams,
    tok: Tokenizer,
    test_triples: Sequence[Triple],
    vocab: KgVocab,
    K: int = 50,
    ks: Sequence[int] = DEFAULT_KS,
    model_name: str = "lm-unseen",
) -> LpReport:
    """Beam prediction over each language's full entity set (novel subjects)."""
    predictor = lm_beam_predictor(params, tok, K=K)
    records = []
    for t in test_triples:
        candidates = list(vocab.entities(t.lang))
        records.append((t.lang, predictor(t.subject, t.relation, t.lang, candidates), t.object))
    return aggregate_report(model_name, records, ks)


@dataclass
class TransferConfig:
    n_entities: int = 60
    n_relations: int = 4
    withhold: float = 0.3
    langs: tuple[str, str] = ("aa", "ab")
    merges: int = 64
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 2e-3
    dropout: float = 0.0
    beam_k: int = 50
    noise_band: float = 0.05
    model: dict = field(default_factory=dict)  # ModelConfig overrides


@dataclass
class TransferReport:
    seeds: tuple[int, ...]
    withhold: float
    noise_band: float
    per_seed: list[dict]
    mean_delta_hits1: float

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "withhold": self.withhold,
            "noise_band": self.noise_band,
            "mean_delta_hits1": self.mean_delta_hits1,
            "per_seed": [
                {
                    "seed": d["seed"],
                    "delta_hits1": d["delta_hits1"],
                    "all": d["all"].to_dict(),
                    "single": d["single"].to_dict(),
                }
                for d in self.per_seed
            ],
        }


def _train_lm(cfg: TransferConfig, facts, tok: Tokenizer, seed: int) -> ModelParams:
    tcfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        base_lr=cfg.base_lr,
        dropout=cfg.dropout,
        seed=seed,
        checkpoint_every=0,
    )
    mcfg = ModelConfig(vocab_size=len(tok), **cfg.model)
    return train(tcfg, mcfg, facts, tok.pad_id).params


def transfer_experiment(cfg: TransferConfig, seeds: Sequence[int]) -> TransferReport:
    """All-languages vs single-language training, evaluated on withheld
    target-language triples (a control arm uses withhold=0 and evaluates on
    triples both conditions saw)."""
    if not seeds:
        raise ValidationError("need at least one seed")
    lang_b = cfg.langs[1]
    per_seed = []
    for seed in seeds:
        triples_a, triples_b, xlinks = make_bilingual_kg(cfg.n_entities, cfg.n_relations, cfg.langs)
        rng = np.random.default_rng(seed)
        n_eval = int(round(len(triples_b) * (cfg.withhold if cfg.withhold > 0 else 0.3)))
        if n_eval == 0:
            raise DataError("degenerate transfer fixture: no held-out triples")
        eval_rows = set(rng.choice(len(triples_b), size=n_eval, replace=False).tolist())
        eval_set = [t for i, t in enumerate(triples_b) if i in eval_rows]
        if cfg.withhold > 0:
            b_train = [t for i, t in enumerate(triples_b) if i not in eval_rows]
        else:
            b_train = list(triples_b)  # control arm: nothing withheld

        surfaces = sorted({s for t in triples_a + triples_b for s in (t.subject, t.relation, t.object)})
        tok = train_bpe(surfaces, merges=cfg.merges, languages=list(cfg.langs))

        all_facts = (
            [linearize_triple(t, tok) for t in triples_a + b_train]
            + [linearize_xlink(x, tok) for x in xlinks]
        )
        single_facts = [linearize_triple(t, tok) for t in b_train]

        vocab_b = build_vocab(triples_b)
        split_b = LpSplit(train=tuple(b_train), test=tuple(eval_set), seed=seed, ratio=cfg.withhold)

        reports = {}
        for name, facts in (("all", all_facts), ("single", single_facts)):
            params = _train_lm(cfg, facts, tok, seed)
            predictor = lm_beam_predictor(params, tok, K=cfg.beam_k)
            reports[name] = lp_evaluate(
                predictor, split_b, vocab_b, filtered=True, model_name=f"lm-{name}"
            )
        delta = reports["all"].averages[1] - reports["single"].averages[1]
        log.info("transfer seed %d: all=%.3f single=%.3f delta=%.3f",
                 seed, reports["all"].averages[1], reports["single"].averages[1], delta)
        per_seed.append({"seed": seed, "all": reports["all"], "single": reports["single"], "delta_hits1": delta})

    mean_delta = sum(d["delta_hits1"] for d in per_seed) / len(per_seed)
    return TransferReport(
        seeds=tuple(seeds),
        withhold=cfg.withhold,
        noise_band=cfg.noise_band,
        per_seed=per_seed,
        mean_delta_hits1=mean_delta,
    )


def render_table(reports: Sequence[LpReport], ks: Sequence[int] = DEFAULT_KS) -> str:
    """Fixed-width text table: one row per model per metric, languages + avg."""
    langs = sorted({lang for r in reports for lang in r.per_lang})
    name_w = max([len(r.model) for r in reports] + [8]) + 2
    col_w = 7
    lines = []
    header = "metric".ljust(9) + "model".ljust(name_w)
    header += "".join(lang.rjust(col_w) for lang in langs) + "avg(macro)".rjust(12)
    lines.append(header)
    lines.append("-" * len(header))
    for k in ks:
        for r in reports:
            row = f"Hits@{k}".ljust(9) + r.model.ljust(name_w)
            for lang in langs:
                if lang in r.per_lang:
                    row += f"{100 * r.per_lang[lang]['hits'][k]:.1f}".rjust(col_w)
                else:
                    row += "-".rjust(col_w)
            row += f"{100 * r.averages[k]:.1f}".rjust(12)
            lines.append(row)
    return "\n".join(lines)


def write_report_jsonl(path, reports: Sequence[LpReport]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
