"""Command-line front end.

Pipeline: build-vocab -> train-base -> sample-drafts -> train-delib
(optionally with visual features) -> degrade / translate / refine ->
evaluate / stats / inspect. All output is line-oriented key=value records;
the env var MMT_SEED overrides the configured seed.

Exit codes: 2 for configuration errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .corpus import (
    Vocabulary,
    build_vocab,
    corpus_blank_stats,
    degrade_corpus,
    extract_ambiguous,
    load_word_list,
    read_token_lines,
    write_lines,
    PosLexicon,
)
from .deliberation import init_from_base, load_draft_cache, sample_drafts, save_draft_cache
from .errors import ConfigError, DelibmtError
from .metrics import bleu, paired_bootstrap
from .model import TransformerMT
from .training import (
    TrainSettings,
    log_kv,
    memory_for,
    refine_translate,
    train_base,
    train_deliberation,
    visual_keys_for,
)
from .visual import FeatureStore, ObjectVocabulary
from .decoding import model_step_fn, beam_search
from .tensor import no_grad
from .model import EOS


def _settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(
        lr_base=cfg.lr_base, warmup=cfg.warmup, patience=cfg.patience,
        max_epochs=cfg.max_epochs, batch_size=cfg.batch_size,
        seed=cfg.seed, beam=cfg.beam, draft_n=cfg.draft_n, log_every=1,
    )


def _load_cfg(path: str) -> RunConfig:
    cfg = load_config(path)
    env_seed = os.environ.get("MMT_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"MMT_SEED must be an integer, got {env_seed!r}",
                              key="seed") from exc
    return cfg


def _load_vocabs(cfg: RunConfig) -> tuple[Vocabulary, Vocabulary]:
    if not cfg.vocab_src or not cfg.vocab_tgt:
        raise ConfigError("vocab_src and vocab_tgt paths are required",
                          key="vocab_src")
    return Vocabulary.load(cfg.vocab_src), Vocabulary.load(cfg.vocab_tgt)


def _encode_corpus(lines, vocab: Vocabulary):
    return [vocab.encode(tokens) for tokens in lines]


def _feature_store(cfg: RunConfig) -> FeatureStore | None:
    if cfg.visual == "none":
        return None
    with open(cfg.image_ids, encoding="utf-8") as fh:
        image_ids = [line.strip() for line in fh]
    detections = None
    vocab = None
    if cfg.visual in ("sum", "obj"):
        from .visual import load_detections

        detections = load_detections(cfg.detections)
        vocab = ObjectVocabulary.load(
            cfg.object_vocab,
            cfg.object_embeddings if cfg.visual == "obj" else None,
        )
    return FeatureStore(
        mode=cfg.visual, image_ids=image_ids, detections=detections,
        vocab=vocab, spatial_path=cfg.spatial_features or None,
    )


def _pairs(cfg: RunConfig, svoc, tvoc, split: str):
    src_path = getattr(cfg, f"{split}_src")
    tgt_path = getattr(cfg, f"{split}_tgt")
    src, tgt = corpus_mod.read_bitext(src_path, tgt_path)
    return list(zip(_encode_corpus(src, svoc), _encode_corpus(tgt, tvoc)))


# ------------------------------------------------------------- subcommands


def cmd_build_vocab(args) -> int:
    cfg = _load_cfg(args.config)
    path = cfg.train_src if args.side == "src" else cfg.train_tgt
    if not path:
        raise ConfigError(f"train_{args.side} path missing", key=f"train_{args.side}")
    vocab = build_vocab(read_token_lines(path), min_freq=cfg.min_freq)
    vocab.save(args.out)
    log_kv(command="build-vocab", side=args.side, size=len(vocab), out=args.out)
    return 0


def cmd_train_base(args) -> int:
    cfg = _load_cfg(args.config)
    svoc, tvoc = _load_vocabs(cfg)
    train_pairs = _pairs(cfg, svoc, tvoc, "train")
    val_pairs = _pairs(cfg, svoc, tvoc, "val")
    features = _feature_store(cfg)
    spatial_channels = None
    if cfg.visual == "att" and features is not None and features.image_ids:
        spatial_channels = features.features_for(0).data.shape[1]
    mcfg = cfg.model_config(len(svoc), len(tvoc), spatial_channels)
    model = TransformerMT(mcfg, seed=cfg.seed, visual=cfg.visual)
    ckpt = train_base(model, train_pairs, val_pairs, _settings(cfg),
                      features=features)
    save_checkpoint(ckpt, args.out)
    log_kv(command="train-base", best_val_bleu=ckpt.meta["best_val_bleu"],
           steps=ckpt.meta["step"], out=args.out)
    return 0


def cmd_sample_drafts(args) -> int:
    cfg = _load_cfg(args.config)
    svoc, _ = _load_vocabs(cfg)
    ckpt = load_checkpoint(args.model)
    model = ckpt.build_model()
    src_path = args.src or cfg.train_src
    sources = _encode_corpus(read_token_lines(src_path), svoc)
    draft_sets = []
    for i, src in enumerate(sources):
        draft_sets.append(sample_drafts(model, src, beam=cfg.beam, n=cfg.draft_n))
    save_draft_cache(args.out, draft_sets)
    log_kv(command="sample-drafts", sentences=len(draft_sets),
           beam=cfg.beam, n=cfg.draft_n, out=args.out)
    return 0


def cmd_train_delib(args) -> int:
    cfg = _load_cfg(args.config)
    svoc, tvoc = _load_vocabs(cfg)
    train_pairs = _pairs(cfg, svoc, tvoc, "train")
    val_pairs = _pairs(cfg, svoc, tvoc, "val")
    features = _feature_store(cfg)
    base_ckpt = load_checkpoint(args.base)
    base = base_ckpt.build_model()
    spatial_channels = base.cfg.spatial_channels
    model = init_from_base(base, seed=cfg.seed, visual=cfg.visual)
    draft_sets = load_draft_cache(args.drafts)
    ckpt = train_deliberation(model, train_pairs, val_pairs, draft_sets,
                              _settings(cfg), features=features)
    save_checkpoint(ckpt, args.out)
    log_kv(command="train-delib", best_val_bleu=ckpt.meta["best_val_bleu"],
           steps=ckpt.meta["step"], out=args.out)
    return 0


def cmd_degrade(args) -> int:
    lexicon = PosLexicon.load(args.lexicon) if args.lexicon else None
    word_list = load_word_list(args.word_list) if args.word_list else None
    if args.strategy == "AMB" and word_list is None:
        if not (args.mine_src and args.mine_tgt):
            raise ConfigError(
                "AMB needs --word-list or --mine-src/--mine-tgt to mine one",
                key="amb_list",
            )
        src, tgt = corpus_mod.read_bitext(args.mine_src, args.mine_tgt)
        word_list = set(extract_ambiguous(
            src, tgt, min_count=args.min_count, min_ratio=args.min_ratio
        ))
        log_kv(command="degrade", mined_ambiguous=len(word_list))
    lines = read_token_lines(args.infile)
    out = degrade_corpus(lines, args.strategy, lexicon=lexicon,
                         word_list=word_list, rate=args.rate, seed=args.seed)
    write_lines(args.out, out.lines())
    if args.audit:
        write_lines(args.audit, out.audit_lines())
    log_kv(command="degrade", strategy=args.strategy,
           sentences=out.stats.sentences,
           pct_sentences=f"{out.stats.pct_sentences:.2f}",
           avg_blanks=f"{out.stats.avg_blanks:.4f}", out=args.out)
    return 0


def cmd_translate(args) -> int:
    cfg = _load_cfg(args.config)
    svoc, tvoc = _load_vocabs(cfg)
    ckpt = load_checkpoint(args.model)
    model = ckpt.build_model()
    features = _feature_store(cfg)
    sources = _encode_corpus(read_token_lines(args.infile), svoc)
    out_lines = []
    for i, src in enumerate(sources):
        feats = features.features_for(i) if features is not None else None
        with no_grad():
            mem = memory_for(model, src, feats, train=False)
            vk = visual_keys_for(model, feats)
            hyps = beam_search(
                model_step_fn(model, mem, visual_keys=vk),
                vocab_size=model.cfg.tgt_vocab, beam=cfg.beam,
                max_len=model.cfg.max_len,
            )
        ids = [t for t in hyps[0].ids.tolist()[1:] if t != EOS]
        out_lines.append(" ".join(tvoc.decode(ids)))
    write_lines(args.out, out_lines)
    log_kv(command="translate", sentences=len(out_lines), beam=cfg.beam,
           out=args.out)
    return 0


def cmd_refine(args) -> int:
    cfg = _load_cfg(args.config)
    svoc, tvoc = _load_vocabs(cfg)
    ckpt = load_checkpoint(args.model)
    if ckpt.system != "delib":
        raise ConfigError("refine needs a deliberation checkpoint", key="system")
    model = ckpt.build_model()
    features = _feature_store(cfg)
    sources = _encode_corpus(read_token_lines(args.infile), svoc)
    cached = None
    if args.drafts:
        cached = load_draft_cache(args.drafts)
        if len(cached) != len(sources):
            raise ConfigError(
                f"draft cache covers {len(cached)} sentences, input has "
                f"{len(sources)}", key="drafts",
            )
    out_lines = []
    for i, src in enumerate(sources):
        feats = features.features_for(i) if features is not None else None
        draft_tokens = cached[i][0][1] if cached is not None else None
        _, refined = refine_translate(model, src, feats, beam=cfg.beam,
                                      draft_tokens=draft_tokens)
        out_lines.append(" ".join(tvoc.decode(refined)))
    write_lines(args.out, out_lines)
    log_kv(command="refine", sentences=len(out_lines), beam=cfg.beam,
           out=args.out)
    return 0


def cmd_evaluate(args) -> int:
    hyp = read_token_lines(args.hyp)
    ref = read_token_lines(args.ref)
    report = bleu(hyp, ref)
    log_kv(command="evaluate", bleu=f"{report.score:.4f}",
           bp=f"{report.brevity_penalty:.4f}",
           hyp_len=report.hyp_len, ref_len=report.ref_len)
    if args.baseline:
        base = read_token_lines(args.baseline)
        p = paired_bootstrap(hyp, base, ref, samples=args.samples,
                             seed=args.seed)
        log_kv(command="evaluate", baseline_bleu=f"{bleu(base, ref).score:.4f}",
               p_value=f"{p:.4f}", samples=args.samples)
    return 0


def cmd_stats(args) -> int:
    stats = corpus_blank_stats(read_token_lines(args.infile))
    log_kv(command="stats", sentences=stats.sentences,
           sentences_with_blank=stats.sentences_with_blank,
           total_blanks=stats.total_blanks,
           pct_sentences=f"{stats.pct_sentences:.2f}",
           avg_blanks=f"{stats.avg_blanks:.4f}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.model)
    params = sum(int(np.prod(a.shape)) for a in ckpt.tensors.values())
    log_kv(command="inspect", system=ckpt.system, visual=ckpt.visual,
           parameters=params, tensors=len(ckpt.tensors))
    for name in sorted(ckpt.meta):
        log_kv(command="inspect", **{f"meta.{name}": ckpt.meta[name]})
    from dataclasses import fields as dc_fields

    for f in dc_fields(ckpt.config):
        log_kv(command="inspect", **{f"config.{f.name}": getattr(ckpt.config, f.name)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="delibmt",
        description="translate-and-refine multimodal machine translation",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="run config file")

    sp = sub.add_parser("build-vocab", help="build a vocabulary from the training corpus")
    with_config(sp)
    sp.add_argument("--side", choices=("src", "tgt"), required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_vocab)

    sp = sub.add_parser("train-base", help="train the base transformer")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("sample-drafts", help="cache n-best first-pass drafts")
    with_config(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--src", default=None, help="source file (default: train_src)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample_drafts)

    sp = sub.add_parser("train-delib", help="jointly train the deliberation model")
    with_config(sp)
    sp.add_argument("--base", required=True, help="base checkpoint")
    sp.add_argument("--drafts", required=True, help="draft cache from sample-drafts")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_delib)

    sp = sub.add_parser("degrade", help="mask source words with BLANK")
    sp.add_argument("--strategy", choices=("RND", "AMB", "PERS"), required=True)
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--audit", default=None, help="sidecar audit file")
    sp.add_argument("--lexicon", default=None, help="POS lexicon (RND)")
    sp.add_argument("--word-list", default=None, help="word list (AMB/PERS)")
    sp.add_argument("--rate", type=float, default=0.15)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mine-src", default=None, help="bitext source for AMB mining")
    sp.add_argument("--mine-tgt", default=None, help="bitext target for AMB mining")
    sp.add_argument("--min-count", type=int, default=10)
    sp.add_argument("--min-ratio", type=float, default=0.2)
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("translate", help="first-pass translation")
    with_config(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("refine", help="second-pass refinement")
    with_config(sp)
    sp.add_argument("--model", required=True, help="deliberation checkpoint")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--drafts", default=None,
                    help="draft cache; when absent drafts come from the first pass")
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("evaluate", help="corpus BLEU and optional significance")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--baseline", default=None,
                    help="second hypothesis file for paired bootstrap")
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("stats", help="blank statistics of a degraded corpus")
    sp.add_argument("--in", dest="infile", required=True)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("inspect", help="describe a checkpoint")
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_inspect)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error=config detail={exc}", file=sys.stderr)
        return 2
    except DelibmtError as exc:
        print(f"error=runtime detail={exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error=io detail={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
