"""Command-line entry point: ``waco <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Errors are reported as one line on stderr: ``error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from .config import METHODS, ConfigError, RunConfig, load_config
from .corpus.bpe import BpeError, BpeVocab
from .corpus.io import CorpusError, load_manifest, save_split
from .corpus.ops import SeqKDError, seqkd_expand
from .corpus.synth import generate_corpus
from .model import InputError, load_checkpoint, save_checkpoint
from .training import NumericError

log = logging.getLogger("waco")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class DataError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------

def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path: Optional[str], what: str) -> Path:
    if path is None:
        raise DataError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} {p} does not exist")
    return p


def _splits(corpus: Path):
    from .pipeline import load_corpus

    splits = load_corpus(corpus)
    if not splits:
        raise DataError(f"no manifests found in {corpus}")
    return splits


def _vocab(path: str) -> BpeVocab:
    return BpeVocab.load(_need(path, "BPE model"))


def _model(path: str):
    return load_checkpoint(_need(path, "checkpoint")).eval()


def _check_vocab(model, vocab: BpeVocab) -> None:
    if model.cfg.vocab_size != vocab.n_text:
        raise DataError(f"checkpoint vocabulary ({model.cfg.vocab_size}) does not match BPE model ({vocab.n_text})")


def _read_texts(path: Path):
    """(ids or None, sentences) from a manifest, an ``id<TAB>text`` file, or plain lines."""
    lines = path.read_text(encoding="utf-8").splitlines()
    if lines and lines[0].split("\t")[:2] == ["id", "features"]:
        utts = load_manifest(path, with_alignments=False)
        if any(u.translation is None for u in utts):
            raise DataError(f"{path} has rows without a translation")
        return [u.id for u in utts], [" ".join(u.translation) for u in utts]
    if lines and all("\t" in l for l in lines):
        pairs = [l.split("\t", 1) for l in lines]
        return [p[0] for p in pairs], [p[1] for p in pairs]
    return None, lines


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    if args.seed is not None:
        cfg.corpus.seed = args.seed
    cfg.corpus.validate()
    generate_corpus(cfg.corpus, _out(args))
    print(f"wrote corpus (seed {cfg.corpus.seed}) to {args.out}")


def cmd_train_bpe(args) -> None:
    from .pipeline import build_vocab

    cfg = _config(args)
    splits = _splits(_need(args.corpus, "corpus directory"))
    vocab = build_vocab(splits, args.vocab_size or cfg.pipeline.bpe_vocab_size)
    vocab.save(_out(args) / "bpe.model")
    print(f"vocabulary of {len(vocab)} symbols, {len(vocab.merges)} merges")


def cmd_pretrain_mt(args) -> None:
    from .pipeline import train_mt_model

    cfg = _config(args)
    splits = _splits(_need(args.corpus, "corpus directory"))
    vocab = _vocab(args.bpe)
    out = _out(args)
    train_mt_model(cfg, vocab, splits, args.seed, out)
    print(f"wrote {out / 'best.waco'}")


def cmd_pretrain_waco(args) -> None:
    from .pipeline import stage_pretrain

    cfg = _config(args)
    splits = _splits(_need(args.corpus, "corpus directory"))
    vocab = _vocab(args.bpe)
    model = _model(args.init)
    _check_vocab(model, vocab)
    out = _out(args)
    method = args.method or cfg.pipeline.method
    model, _ = stage_pretrain(cfg, model, vocab, splits, args.seed, method, out)
    if method == "base":
        save_checkpoint(out / "best.waco", model)
    print(f"wrote {out / 'best.waco'} ({method})")


def cmd_finetune(args) -> None:
    from .eval.decode import DecodeConfig, ModelTranslator
    from .pipeline import stage_finetune

    cfg = _config(args)
    splits = _splits(_need(args.corpus, "corpus directory"))
    vocab = _vocab(args.bpe)
    model = _model(args.init)
    _check_vocab(model, vocab)
    translator = None
    if cfg.pipeline.seqkd:
        mt = _model(args.mt)
        translator = ModelTranslator(mt, vocab, DecodeConfig(beam_size=cfg.decode.beam_size, length_penalty_alpha=0.6))
    out = _out(args)
    stage_finetune(cfg, model, vocab, splits, args.seed, out, translator)
    print(f"wrote {out / 'final.waco'}")


def cmd_translate(args) -> None:
    from .data import prepare
    from .eval.decode import beam_decode
    from .pipeline import write_translations

    cfg = _config(args)
    vocab = _vocab(args.bpe)
    model = _model(args.model)
    _check_vocab(model, vocab)
    utts = load_manifest(_need(args.input, "input manifest"), with_alignments=False)
    if args.source == "speech" and any(u.features is None for u in utts):
        raise DataError("speech decoding needs feature files for every row")
    exs = prepare(utts, vocab, with_spans=False)
    hyps = beam_decode(model, vocab, exs, args.source, args.target, cfg.decode)
    path = _out(args) / "translations.tsv"
    write_translations(path, [u.id for u in utts], hyps)
    print(f"wrote {len(hyps)} hypotheses to {path}")


def cmd_evaluate(args) -> None:
    from .eval.metrics import bleu, wer

    h_ids, hyps = _read_texts(_need(args.hyp, "hypothesis file"))
    r_ids, refs = _read_texts(_need(args.ref, "reference file"))
    if h_ids is not None and r_ids is not None:
        table = dict(zip(h_ids, hyps))
        missing = [i for i in r_ids if i not in table]
        if missing or len(table) != len(r_ids):
            raise DataError(f"hypothesis ids do not match reference ids (e.g. {missing[:1] or h_ids[:1]})")
        hyps = [table[i] for i in r_ids]
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    print(f"bleu={bleu(hyps, refs):.2f}")
    if args.wer:
        print(f"wer={wer(hyps, refs):.4f}")


def cmd_analyze(args) -> None:
    from .data import prepare
    from .eval.analysis import alignment_matrix, diagonal_margin, similarity_report, write_matrix_tsv
    from .plotting import plot_matrix

    vocab = _vocab(args.bpe)
    model = _model(args.model)
    _check_vocab(model, vocab)
    utts = load_manifest(_need(args.input, "input manifest"))
    exs = [e for e in prepare(utts, vocab, model.enc_length) if e.spans]
    if not exs:
        raise DataError("no utterance in the input has usable word alignments")
    out = _out(args)
    rep = similarity_report(model, vocab, exs)
    mats = [alignment_matrix(model, vocab, e) for e in exs]
    diag, off, margin = diagonal_margin(mats)
    summary = dict(rep.to_dict(), diag_mean=diag, offdiag_mean=off, diag_margin=margin)
    (out / "similarity.tsv").write_text(
        "metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in summary.items()), encoding="utf-8")
    for m in mats[: args.n_plots]:
        write_matrix_tsv(out / f"{m.id}.words.tsv", m.word_level, m.words, m.words)
        write_matrix_tsv(out / f"{m.id}.frames.tsv", m.token_to_frame, m.words)
        plot_matrix(out / f"{m.id}.words.png", m.word_level, m.words, m.words,
                    f"{m.id}: word-level cosine", "speech word", "text word")
        plot_matrix(out / f"{m.id}.frames.png", m.token_to_frame, m.words, None,
                    f"{m.id}: word-to-frame cosine", "speech frame", "text word")
    print(f"word_sim={rep.word_level_mean_cosine:.4f} sent_sim={rep.sentence_level_mean_cosine:.4f} "
          f"diag_margin={margin:.4f}")


def _int_list(text: str) -> List[Optional[int]]:
    out = []
    for part in text.split(","):
        part = part.strip()
        out.append(None if part in ("all", "") else int(part))
    return out


def cmd_sweep(args) -> None:
    from .pipeline import budget_sweep, write_sweep_csv
    from .plotting import plot_sweep

    cfg = _config(args)
    methods = [m.strip() for m in args.methods.split(",")]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError([f"unknown method {m}" for m in bad])
    try:
        asr_budgets = _int_list(args.asr_budgets)
        st_budgets = [b for b in _int_list(args.st_budgets) if b is not None]
    except ValueError as e:
        raise ConfigError([f"bad budget list: {e}"]) from None
    corpus = _need(args.corpus, "corpus directory")
    out = _out(args)
    rows = budget_sweep(cfg, corpus, args.seed, methods, asr_budgets, st_budgets)
    write_sweep_csv(out / "sweep.csv", rows)
    plot_sweep(out / "sweep.png", rows)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")


def cmd_seqkd(args) -> None:
    from .eval.decode import ModelTranslator

    cfg = _config(args)
    vocab = _vocab(args.bpe)
    model = _model(args.model)
    _check_vocab(model, vocab)
    utts = load_manifest(_need(args.input, "input manifest"))
    translator = ModelTranslator(model, vocab, cfg.decode)
    pseudo = seqkd_expand(utts, translator)
    save_split(_out(args), args.name, pseudo)
    print(f"wrote {len(pseudo)} pseudo-triplets to {Path(args.out) / (args.name + '.tsv')}")


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="waco", description="Word-aligned contrastive pre-training for toy speech translation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="<command>")

    def add(name, fn, help, seed="optional", out=True, seed_help="random seed"):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", help="JSON run configuration (defaults apply to missing keys)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set finetune.max_steps=200 (repeatable)")
        if seed == "required":
            sp.add_argument("--seed", type=int, required=True, help="random seed for this run (mandatory)")
        elif seed == "optional":
            sp.add_argument("--seed", type=int, help=seed_help)
        if out:
            sp.add_argument("--out", required=True, help="output directory (created if missing)")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the synthetic corpus", seed_help="corpus seed; overrides corpus.seed")

    sp = add("train-bpe", cmd_train_bpe, "learn a BPE vocabulary from the corpus text splits")
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--vocab-size", type=int, help="total vocabulary size (default: pipeline.bpe_vocab_size)")

    sp = add("pretrain-mt", cmd_pretrain_mt, "pre-train the text embedding and joint Transformer on MT pairs",
             seed="required")
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--bpe", required=True, help="BPE model file")

    sp = add("pretrain-waco", cmd_pretrain_waco, "cross-modal pre-training on ASR pairs", seed="required")
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--bpe", required=True, help="BPE model file")
    sp.add_argument("--init", required=True, help="checkpoint to start from (usually the MT model)")
    sp.add_argument("--method", choices=METHODS, help="pre-training objective (default: pipeline.method)")

    sp = add("finetune", cmd_finetune, "multi-task fine-tuning on ST triplets", seed="required")
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--bpe", required=True, help="BPE model file")
    sp.add_argument("--init", required=True, help="checkpoint to start from")
    sp.add_argument("--mt", help="MT checkpoint for SeqKD expansion (when pipeline.seqkd is true)")

    sp = add("translate", cmd_translate, "beam-decode a manifest; writes translations.tsv", seed=None)
    sp.add_argument("--model", required=True, help="checkpoint")
    sp.add_argument("--bpe", required=True, help="BPE model file")
    sp.add_argument("--input", required=True, help="manifest to decode")
    sp.add_argument("--source", choices=("speech", "text"), default="speech", help="input modality")
    sp.add_argument("--target", choices=("translation", "transcript"), default="translation",
                    help="output language")

    sp = add("evaluate", cmd_evaluate, "score hypotheses against references; prints bleu=<score>",
             seed=None, out=False)
    sp.add_argument("--hyp", required=True, help="hypotheses: id<TAB>text lines or plain lines")
    sp.add_argument("--ref", required=True, help="references: manifest, id<TAB>text lines, or plain lines")
    sp.add_argument("--wer", action="store_true", help="also print the word error rate")

    sp = add("analyze", cmd_analyze, "similarity report plus word-level and word-to-frame matrices (TSV + PNG)",
             seed=None)
    sp.add_argument("--model", required=True, help="checkpoint")
    sp.add_argument("--bpe", required=True, help="BPE model file")
    sp.add_argument("--input", required=True, help="manifest with alignments, e.g. asr_dev.tsv")
    sp.add_argument("--n-plots", type=int, default=4, help="number of utterances to render")

    sp = add("sweep", cmd_sweep, "full pipeline over a grid of ASR/ST budgets and methods (CSV + PNG)",
             seed="required")
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--methods", default="waco", help="comma-separated methods")
    sp.add_argument("--asr-budgets", default="all", help="comma-separated ASR frame budgets ('all' = whole split)")
    sp.add_argument("--st-budgets", default="100", help="comma-separated ST utterance counts")

    sp = add("seqkd", cmd_seqkd, "translate ASR transcripts with an MT model into pseudo ST triplets", seed=None)
    sp.add_argument("--model", required=True, help="MT checkpoint")
    sp.add_argument("--bpe", required=True, help="BPE model file")
    sp.add_argument("--input", required=True, help="ASR manifest")
    sp.add_argument("--name", default="st_kd", help="output split name")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    threads = os.environ.get("WACO_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"error[config]: {'; '.join(e.problems)}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"error[numeric]: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, BpeError, InputError, SeqKDError, FileNotFoundError) as e:
        print(f"error[data]: {str(e).splitlines()[0] if str(e) else type(e).__name__}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error[data]: {str(e).splitlines()[0]}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
