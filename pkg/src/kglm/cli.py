"""Command-line entry point wiring all modules.

Subcommands: ingest, tokenize, train, predict, eval-lp, calibrate, align,
retrieve, baseline, transfer-exp. Every run writes a reproducibility manifest
(config hash, seed, versions). Config precedence: CLI > config file > defaults.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention_lm import ModelConfig
from .constrained_decoder import ForwardCounter, beam_predict, build_trie
from .embedding_space import (
    EmbeddingSpace,
    MirrorConfig,
    build_space,
    mirror_calibrate,
    procrustes_align,
    retrieve,
)
from .errors import DataError, NumericError
from .eval_harness import (
    TransferConfig,
    kge_predictor,
    lm_beam_predictor,
    lm_exhaustive_predictor,
    lp_evaluate,
    render_table,
    transfer_experiment,
    write_report_jsonl,
)
from .kg_store import (
    build_vocab,
    FilteredCandidateIndex,
    KgVocab,
    parse_triples,
    parse_xlinks,
    read_split,
    split_lp,
    write_split,
)
from .kge_baselines import KgeConfig, train_kge
from .linearizer import linearize_triple, linearize_xlink
from .tokenizer import Tokenizer, train_bpe
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise SystemExit((EXIT_USAGE, f"error: {message}"))


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: config file must hold a JSON object")
    return cfg


def _merged(args: argparse.Namespace, file_cfg: dict, keys: list[str], defaults: dict) -> dict:
    """CLI > config file > defaults."""
    out = {}
    for k in keys:
        cli_val = getattr(args, k, None)
        if cli_val is not None:
            out[k] = cli_val
        elif k in file_cfg:
            out[k] = file_cfg[k]
        else:
            out[k] = defaults[k]
    return out


def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(config, sort_keys=True)
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(payload.encode()).hexdigest(),
        "kglm_version": __version__,
        "numpy_version": np.__version__,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_model(args) -> tuple[Checkpoint, Tokenizer]:
    tok = Tokenizer.load(args.tokenizer)
    ckpt = load_checkpoint(args.checkpoint, expected_tokenizer_sha256=tok.sha256())
    return ckpt, tok


def _collect_facts(triples_path, xlinks_path, tok, max_len: int):
    facts = []
    n_skipped = 0
    if triples_path:
        for t in parse_triples(triples_path):
            try:
                facts.append(linearize_triple(t, tok, max_len=max_len))
            except DataError:
                n_skipped += 1
    if xlinks_path:
        for x in parse_xlinks(xlinks_path):
            try:
                facts.append(linearize_xlink(x, tok, max_len=max_len))
            except DataError:
                n_skipped += 1
    return facts, n_skipped


def cmd_ingest(args, file_cfg) -> int:
    out_dir = Path(args.out_dir)
    cfg = _merged(args, file_cfg, ["ratio", "seed"], {"ratio": 0.1, "seed": 0})
    triples = parse_triples(args.triples)
    xlinks = parse_xlinks(args.xlinks) if args.xlinks else []
    split = split_lp(triples, cfg["ratio"], cfg["seed"])
    write_split(out_dir, split)
    vocab = build_vocab(triples, xlinks)
    with open(out_dir / "vocab.json", "w", encoding="utf-8") as f:
        json.dump(vocab.to_dict(), f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    _write_manifest(out_dir, "ingest", {**cfg, "triples": str(args.triples), "xlinks": str(args.xlinks or "")})
    print(f"ingested {len(triples)} triples, {len(xlinks)} xlinks -> "
          f"{len(split.train)} train / {len(split.test)} test ({len(split.removed)} inverse-removed)")
    return EXIT_OK


def cmd_tokenize(args, file_cfg) -> int:
    cfg = _merged(args, file_cfg, ["merges"], {"merges": 2000})
    triples = parse_triples(args.triples) if args.triples else []
    xlinks = parse_xlinks(args.xlinks) if args.xlinks else []
    if not triples and not xlinks:
        raise DataError("tokenize needs --triples and/or --xlinks")
    vocab = build_vocab(triples, xlinks)
    tok = train_bpe(vocab.all_surface_strings(), merges=cfg["merges"], languages=vocab.languages)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tok.save(out)
    _write_manifest(out.parent, "tokenize", {**cfg, "out": str(out)})
    print(f"tokenizer: {len(tok)} symbols ({cfg['merges']} requested merges), sha256 {tok.sha256()[:12]}")
    return EXIT_OK


def cmd_train(args, file_cfg) -> int:
    tok = Tokenizer.load(args.tokenizer)
    keys = ["epochs", "batch_size", "base_lr", "dropout", "seed", "max_len", "mask_mode", "checkpoint_every"]
    defaults = {k: getattr(TrainConfig(), k) for k in keys}
    tcfg = TrainConfig(**_merged(args, file_cfg, keys, defaults))
    mkeys = ["layers", "heads", "d_model", "ffn_dim"]
    mdefaults = {k: getattr(ModelConfig(vocab_size=1), k) for k in mkeys}
    mcfg = ModelConfig(vocab_size=len(tok), l_max=tcfg.max_len, **_merged(args, file_cfg, mkeys, mdefaults))
    facts, n_skipped = _collect_facts(args.triples, args.xlinks, tok, tcfg.max_len)
    if not facts:
        raise DataError("no trainable facts after linearization")
    out_dir = Path(args.out_dir)
    result = train(tcfg, mcfg, facts, tok.pad_id, tokenizer_sha256=tok.sha256(), out_dir=out_dir)
    _write_manifest(out_dir, "train", {**tcfg.to_dict(), **{k: getattr(mcfg, k) for k in mkeys},
                                       "triples": str(args.triples or ""), "xlinks": str(args.xlinks or ""),
                                       "n_facts": len(facts), "n_overlong_skipped": n_skipped})
    print(f"trained {len(facts)} facts for {tcfg.epochs} epochs; "
          f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}; "
          f"checkpoints: {', '.join(p.name for p in result.checkpoint_paths)}")
    return EXIT_OK


def cmd_predict(args, file_cfg) -> int:
    cfg = _merged(args, file_cfg, ["k"], {"k": 50})
    ckpt, tok = _load_model(args)
    if args.candidates:
        candidates = [l.strip() for l in Path(args.candidates).read_text(encoding="utf-8").splitlines() if l.strip()]
    elif args.split_dir:
        split = read_split(args.split_dir)
        index = FilteredCandidateIndex(build_vocab(list(split.train) + list(split.test)),
                                       list(split.train) + list(split.test))
        candidates = index.vocab.entities(args.lang)
    else:
        raise DataError("predict needs --candidates or --split-dir")
    if not candidates:
        raise DataError(f"no candidate entities for language {args.lang!r}")
    counter = ForwardCounter()
    trie = build_trie(list(candidates), tok)
    ranked = beam_predict(ckpt.params, tok, args.subject, args.relation, trie, K=cfg["k"], counter=counter)
    top = [r for r in ranked[: args.top_n] ]
    record = {
        "subject": args.subject,
        "relation": args.relation,
        "lang": args.lang,
        "ranked": [[e, l] for e, l in top],
        "forward_count": counter.count,
    }
    print(json.dumps(record, ensure_ascii=False))
    return EXIT_OK


def cmd_eval_lp(args, file_cfg) -> int:
    cfg = _merged(args, file_cfg, ["k"], {"k": 50})
    ckpt, tok = _load_model(args)
    split = read_split(args.split_dir)
    vocab = build_vocab(list(split.train) + list(split.test))
    if args.decoder == "beam":
        predictor = lm_beam_predictor(ckpt.params, tok, K=cfg["k"])
    else:
        predictor = lm_exhaustive_predictor(ckpt.params, tok)
    report = lp_evaluate(predictor, split, vocab, filtered=not args.unfiltered,
                         model_name=f"lm-{args.decoder}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_jsonl(out_dir / "lp_report.jsonl", [report])
    (out_dir / "lp_table.txt").write_text(render_table([report]) + "\n", encoding="utf-8")
    _write_manifest(out_dir, "eval-lp", {**cfg, "decoder": args.decoder, "filtered": not args.unfiltered,
                                         "split_dir": str(args.split_dir)})
    print(render_table([report]))
    return EXIT_OK


def cmd_calibrate(args, file_cfg) -> int:
    cfg = _merged(args, file_cfg, ["epochs", "batch", "temperature", "lr", "seed"],
                  {"epochs": 1, "batch": 128, "temperature": 0.04, "lr": 2e-4, "seed": 0})
    ckpt, tok = _load_model(args)
    strings = [l.strip() for l in Path(args.strings).read_text(encoding="utf-8").splitlines() if l.strip()]
    mcfg = MirrorConfig(epochs=cfg["epochs"], batch=cfg["batch"], temperature=cfg["temperature"],
                        lr=cfg["lr"], seed=cfg["seed"])
    params, losses = mirror_calibrate(ckpt.params, tok, strings, mcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint(params=params, train_config=ckpt.train_config, step=ckpt.step,
                               rng_state=None, tokenizer_sha256=tok.sha256()), out)
    _write_manifest(out.parent, "calibrate", {**cfg, "strings": str(args.strings), "n_strings": len(strings)})
    first = losses[0] if losses else float("nan")
    last = losses[-1] if losses else float("nan")
    print(f"calibrated on {len(strings)} strings; contrastive loss {first:.4f} -> {last:.4f}")
    return EXIT_OK


def cmd_align(args, file_cfg) -> int:
    src = EmbeddingSpace.load(args.source_space)
    tgt = EmbeddingSpace.load(args.target_space)
    pairs = []
    for line in Path(args.pairs).read_text(encoding="utf-8").splitlines():
        if line.strip():
            a, b = line.split("\t")
            pairs.append((a, b))
    src_ix = {e: i for i, e in enumerate(src.entities)}
    tgt_ix = {e: i for i, e in enumerate(tgt.entities)}
    keep = [(src_ix[a], tgt_ix[b]) for a, b in pairs if a in src_ix and b in tgt_ix]
    if len(keep) < src.dim:
        raise DataError(f"need >= {src.dim} usable pairs, found {len(keep)}")
    X = src.vectors[[i for i, _ in keep]]
    Y = tgt.vectors[[j for _, j in keep]]
    W = procrustes_align(X, Y)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, W)
    _write_manifest(out.parent, "align", {"pairs": str(args.pairs), "n_pairs": len(keep)})
    print(f"aligned {len(keep)} pairs; wrote {W.shape[0]}x{W.shape[1]} map to {out}")
    return EXIT_OK


def cmd_retrieve(args, file_cfg) -> int:
    cfg = _merged(args, file_cfg, ["metric", "top_n"], {"metric": "csls", "top_n": 10})
    space = EmbeddingSpace.load(args.space)
    ckpt, tok = _load_model(args)
    queries = [l.strip() for l in Path(args.queries).read_text(encoding="utf-8").splitlines() if l.strip()]
    from .embedding_space import embed_batch

    qvecs = embed_batch(ckpt.params, tok, queries, space.pooling)
    if args.map:
        qvecs = qvecs @ np.loadtxt(args.map)
    results = retrieve(qvecs, space, metric=cfg["metric"], top_n=cfg["top_n"], lang=args.lang)
    for q, ranked in zip(queries, results):
        print(json.dumps({"query": q, "ranked": [[e, s] for e, s in ranked]}, ensure_ascii=False))
    return EXIT_OK


def cmd_baseline(args, file_cfg) -> int:
    keys = ["dim", "epochs", "negatives", "lr", "margin", "seed"]
    defaults = {k: getattr(KgeConfig(), k) for k in keys}
    cfg_d = _merged(args, file_cfg, keys, defaults)
    kcfg = KgeConfig(**cfg_d, self_adversarial=(args.kind == "rotate"))
    split = read_split(args.split_dir)
    model = train_kge(args.kind, split, kcfg)
    vocab = build_vocab(list(split.train) + list(split.test))
    report = lp_evaluate(kge_predictor(model), split, vocab, filtered=not args.unfiltered,
                         model_name=args.kind)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / f"{args.kind}.emb")
    write_report_jsonl(out_dir / "lp_report.jsonl", [report])
    (out_dir / "lp_table.txt").write_text(render_table([report]) + "\n", encoding="utf-8")
    _write_manifest(out_dir, "baseline", {**cfg_d, "kind": args.kind, "split_dir": str(args.split_dir)})
    print(render_table([report]))
    if report.n_unsupported:
        print(f"unsupported queries (unseen entities): {report.n_unsupported}")
    return EXIT_OK


def cmd_transfer_exp(args, file_cfg) -> int:
    keys = ["n_entities", "n_relations", "withhold", "epochs", "merges"]
    defaults = {k: getattr(TransferConfig(), k) for k in keys}
    cfg = TransferConfig(**_merged(args, file_cfg, keys, defaults))
    seeds = [int(s) for s in args.seeds.split(",")]
    report = transfer_experiment(cfg, seeds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "transfer_report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    tables = []
    for d in report.per_seed:
        tables.append(f"seed {d['seed']}:\n" + render_table([d["all"], d["single"]]))
    (out_dir / "transfer_tables.txt").write_text("\n\n".join(tables) + "\n", encoding="utf-8")
    _write_manifest(out_dir, "transfer-exp",
                    {k: getattr(cfg, k) for k in keys} | {"seeds": seeds})
    print("\n\n".join(tables))
    print(f"\nmean Hits@1 delta (all - single): {report.mean_delta_hits1:+.4f}")
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="kglm", description=__doc__)
    p.add_argument("--config", help="JSON config file (CLI flags override it)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="parse triples/xlinks, build vocab, write an LP split")
    sp.add_argument("--triples", required=True)
    sp.add_argument("--xlinks")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_ingest)

    sp = sub.add_parser("tokenize", help="train the BPE tokenizer on KG surface strings")
    sp.add_argument("--triples")
    sp.add_argument("--xlinks")
    sp.add_argument("--out", required=True)
    sp.add_argument("--merges", type=int)
    sp.set_defaults(fn=cmd_tokenize)

    sp = sub.add_parser("train", help="train the LM on linearized facts")
    sp.add_argument("--triples")
    sp.add_argument("--xlinks")
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--out-dir", required=True)
    for k, t in (("epochs", int), ("batch_size", int), ("base_lr", float), ("dropout", float),
                 ("seed", int), ("max_len", int), ("checkpoint_every", int),
                 ("layers", int), ("heads", int), ("d_model", int), ("ffn_dim", int)):
        sp.add_argument(f"--{k.replace('_', '-')}", dest=k, type=t)
    sp.add_argument("--mask-mode", dest="mask_mode", choices=["strict_prefix", "paper_literal"])
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("predict", help="trie-constrained beam prediction for one query")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--subject", required=True)
    sp.add_argument("--relation", required=True)
    sp.add_argument("--lang", required=True)
    sp.add_argument("--candidates", help="file with one candidate entity per line")
    sp.add_argument("--split-dir", help="use the split's entity vocabulary as candidates")
    sp.add_argument("--k", type=int)
    sp.add_argument("--top-n", type=int, default=10)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("eval-lp", help="filtered link-prediction evaluation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--split-dir", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--decoder", choices=["beam", "exhaustive"], default="beam")
    sp.add_argument("--unfiltered", action="store_true")
    sp.add_argument("--k", type=int)
    sp.set_defaults(fn=cmd_eval_lp)

    sp = sub.add_parser("calibrate", help="contrastive (Mirror-style) calibration")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--strings", required=True, help="file with one string per line")
    sp.add_argument("--out", required=True)
    for k, t in (("epochs", int), ("batch", int), ("temperature", float), ("lr", float), ("seed", int)):
        sp.add_argument(f"--{k}", type=t)
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("align", help="orthogonal Procrustes map between embedding spaces")
    sp.add_argument("--source-space", required=True)
    sp.add_argument("--target-space", required=True)
    sp.add_argument("--pairs", required=True, help="tab-separated entity pairs")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_align)

    sp = sub.add_parser("retrieve", help="nearest-neighbor retrieval in an embedding space")
    sp.add_argument("--space", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tokenizer", required=True)
    sp.add_argument("--queries", required=True, help="file with one query string per line")
    sp.add_argument("--lang", help="restrict targets to one language")
    sp.add_argument("--map", help="optional alignment map from `align`")
    sp.add_argument("--metric", choices=["cosine", "csls"])
    sp.add_argument("--top-n", dest="top_n", type=int)
    sp.set_defaults(fn=cmd_retrieve)

    sp = sub.add_parser("baseline", help="train and evaluate a KGE baseline")
    sp.add_argument("--kind", choices=["transe", "complex", "rotate"], required=True)
    sp.add_argument("--split-dir", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--unfiltered", action="store_true")
    for k, t in (("dim", int), ("epochs", int), ("negatives", int), ("lr", float),
                 ("margin", float), ("seed", int)):
        sp.add_argument(f"--{k}", type=t)
    sp.set_defaults(fn=cmd_baseline)

    sp = sub.add_parser("transfer-exp", help="All-vs-Single cross-lingual transfer experiment")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seeds", default="0,1,2")
    for k, t in (("n_entities", int), ("n_relations", int), ("withhold", float),
                 ("epochs", int), ("merges", int)):
        sp.add_argument(f"--{k.replace('_', '-')}", dest=k, type=t)
    sp.set_defaults(fn=cmd_transfer_exp)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        file_cfg = _load_config_file(args.config)
        return args.fn(args, file_cfg)
    except SystemExit as e:
        if isinstance(e.code, tuple):
            code, msg = e.code
            print(msg, file=sys.stderr)
            return code
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
