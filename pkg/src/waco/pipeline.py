"""End-to-end recipe: BPE -> MT pre-training -> cross-modal pre-training -> fine-tuning -> evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .config import RunConfig
from .corpus.bpe import BpeVocab, train_bpe
from .corpus.io import Utterance, load_manifest, save_split
from .corpus.ops import seqkd_expand, subset_budget, take_utterances
from .corpus.synth import ALL_SPLITS
from .data import Example, prepare
from .eval.analysis import SimilarityReport, alignment_matrix, diagonal_margin, similarity_report
from .eval.decode import DecodeConfig, ModelTranslator, beam_decode
from .eval.metrics import bleu, wer
from .model import ModelConfig, WacoModel, load_checkpoint, save_checkpoint
from .training import finetune, pretrain_crossmodal, pretrain_mt

log = logging.getLogger(__name__)


def load_corpus(corpus_dir: str | Path, splits: Sequence[str] = ALL_SPLITS) -> Dict[str, List[Utterance]]:
    root = Path(corpus_dir)
    return {s: load_manifest(root / f"{s}.tsv") for s in splits if (root / f"{s}.tsv").exists()}


def bpe_training_text(splits: Dict[str, List[Utterance]]) -> List[List[str]]:
    texts = []
    for name in ("mt_train", "st_train", "asr_train"):
        for u in splits.get(name, []):
            texts.append(u.transcript)
            if u.translation is not None:
                texts.append(u.translation)
    return texts


def build_vocab(splits: Dict[str, List[Utterance]], size: int) -> BpeVocab:
    return train_bpe(bpe_training_text(splits), size)


def feature_dim(splits: Dict[str, List[Utterance]]) -> Optional[int]:
    """Frame width of the corpus on disk (None if no split carries features)."""
    for utts in splits.values():
        for u in utts:
            if u.features is not None:
                return int(u.features.shape[1])
    return None


def check_features(model: WacoModel, splits: Dict[str, List[Utterance]]) -> None:
    dim = feature_dim(splits)
    if dim is not None and dim != model.cfg.feat_dim:
        raise ValueError(f"model expects {model.cfg.feat_dim}-dim frames but the corpus has {dim}")


def new_model(cfg: RunConfig, vocab: BpeVocab, seed: int, feat_dim: Optional[int] = None) -> WacoModel:
    mc = copy.deepcopy(cfg.model)
    mc.vocab_size = vocab.n_text
    if feat_dim is not None:
        mc.feat_dim = feat_dim
    torch.manual_seed(seed)
    return WacoModel(mc)


def model_from_state(cfg: ModelConfig, state) -> WacoModel:
    m = WacoModel(cfg)
    m.load_state_dict(state)
    return m


@dataclass
class PipelineResult:
    method: str
    seed: int
    bleu: float
    word_sim: float
    sent_sim: float
    diag_margin: float
    wer: Optional[float] = None
    stage_steps: Dict[str, int] = field(default_factory=dict)
    model: Optional[WacoModel] = None

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "model"}
        return d


def train_mt_model(cfg: RunConfig, vocab: BpeVocab, splits: Dict[str, List[Utterance]], seed: int,
                   out_dir: Optional[Path] = None) -> WacoModel:
    cfg = cfg.with_seed(seed)
    model = new_model(cfg, vocab, seed, feature_dim(splits))
    train = prepare(splits["mt_train"], vocab, with_spans=False)
    dev = prepare(splits["mt_dev"], vocab, with_spans=False)
    res = pretrain_mt(model, vocab, train, dev, cfg.mt, out_dir)
    log.info("MT pre-training: best dev BLEU %.2f at step %d", res.best_metric, res.best_step)
    if out_dir is not None:
        save_checkpoint(out_dir / "best.waco", res.model)
    return res.model


def evaluate_model(model: WacoModel, vocab: BpeVocab, test: Sequence[Example], dev_aligned: Sequence[Example],
                   dcfg: DecodeConfig, with_wer: bool = False) -> dict:
    hyps = beam_decode(model, vocab, test, "speech", "translation", dcfg)
    refs = [" ".join(e.utt.translation) for e in test]
    rep: SimilarityReport = similarity_report(model, vocab, dev_aligned)
    mats = [alignment_matrix(model, vocab, e) for e in dev_aligned if e.spans]
    margin = diagonal_margin(mats)[2]
    out = {"bleu": bleu(hyps, refs), "word_sim": rep.word_level_mean_cosine,
           "sent_sim": rep.sentence_level_mean_cosine, "diag_margin": margin, "hypotheses": hyps}
    if with_wer:
        asr_h = beam_decode(model, vocab, test, "speech", "transcript", dcfg)
        out["wer"] = wer(asr_h, [" ".join(e.utt.transcript) for e in test])
    return out


def stage_pretrain(cfg: RunConfig, model: WacoModel, vocab: BpeVocab, splits: Dict[str, List[Utterance]],
                   seed: int, method: str, out: Optional[Path] = None):
    """Cross-modal pre-training on (a budgeted subset of) the ASR split; "base" returns ``model`` untouched."""
    if method == "base":
        return model, 0
    check_features(model, splits)
    cfg = cfg.with_seed(seed)
    enc_len = model.enc_length
    asr = splits["asr_train"]
    if cfg.pipeline.asr_frames:
        asr = subset_budget(asr, cfg.pipeline.asr_frames, seed)
    spans = method == "waco"
    asr_ex = prepare(asr, vocab, enc_len, with_spans=spans)
    asr_dev = prepare(splits["asr_dev"][: cfg.pipeline.dev_size], vocab, enc_len, with_spans=spans)
    res = pretrain_crossmodal(model, vocab, asr_ex, asr_dev, cfg.pretrain, method, out)
    if out is not None:
        save_checkpoint(out / "best.waco", res.model)
    return res.model, res.best_step


def stage_finetune(cfg: RunConfig, model: WacoModel, vocab: BpeVocab, splits: Dict[str, List[Utterance]],
                   seed: int, out: Optional[Path] = None, translator=None):
    """Multi-task fine-tuning on ``st_size`` ST triplets (plus SeqKD pseudo-triplets when enabled)."""
    check_features(model, splits)
    cfg = cfg.with_seed(seed)
    enc_len = model.enc_length
    st = take_utterances(splits["st_train"], cfg.pipeline.st_size, seed)
    if cfg.pipeline.seqkd:
        if translator is None:
            raise ValueError("seqkd needs an MT model")
        st = list(st) + seqkd_expand(splits["asr_train"], translator, id_suffix="-kd")
    st_ex = prepare(st, vocab, enc_len, with_spans=cfg.finetune.lam > 0)
    st_dev = prepare(splits["st_dev"][: cfg.pipeline.dev_size], vocab, enc_len, with_spans=False)
    res = finetune(model, vocab, st_ex, st_dev, cfg.finetune, out)
    if out is not None:
        save_checkpoint(out / "final.waco", res.model)
    return res.model, res.best_step


def run_pipeline(cfg: RunConfig, corpus_dir: str | Path, seed: int, out_dir: Optional[str | Path] = None,
                 method: Optional[str] = None, mt_model: Optional[WacoModel] = None,
                 splits: Optional[Dict[str, List[Utterance]]] = None, vocab: Optional[BpeVocab] = None,
                 with_wer: bool = False, keep_model: bool = False) -> PipelineResult:
    """Run the full recipe for one method and seed and evaluate the final model.

    ``mt_model`` (already MT-pre-trained, same vocabulary) skips the MT stage;
    it is copied, never modified.
    """
    method = method or cfg.pipeline.method
    cfg = cfg.with_seed(seed)
    out = Path(out_dir) if out_dir is not None else None
    splits = splits if splits is not None else load_corpus(corpus_dir)
    vocab = vocab or build_vocab(splits, cfg.pipeline.bpe_vocab_size)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / "bpe.model")

    if mt_model is None:
        mt_model = train_mt_model(cfg, vocab, splits, seed, out / "mt" if out else None)
    model = copy.deepcopy(mt_model)
    steps = {}
    model, steps_pt = stage_pretrain(cfg, model, vocab, splits, seed, method, out / "pretrain" if out else None)
    if method != "base":
        steps["pretrain"] = steps_pt
    translator = None
    if cfg.pipeline.seqkd:
        translator = ModelTranslator(mt_model, vocab, DecodeConfig(beam_size=cfg.decode.beam_size,
                                                                   length_penalty_alpha=0.6))
    model, steps["finetune"] = stage_finetune(cfg, model, vocab, splits, seed,
                                              out / "finetune" if out else None, translator)
    if out is not None:
        save_checkpoint(out / "final.waco", model)

    enc_len = model.enc_length
    test = prepare(splits["st_test"], vocab, enc_len, with_spans=False)
    dev_aligned = prepare(splits["asr_dev"], vocab, enc_len)
    ev = evaluate_model(model, vocab, test, dev_aligned, cfg.decode, with_wer)
    result = PipelineResult(method, seed, ev["bleu"], ev["word_sim"], ev["sent_sim"], ev["diag_margin"],
                            ev.get("wer"), steps, model if keep_model else None)
    if out is not None:
        write_translations(out / "translations.tsv", [e.id for e in test], ev["hypotheses"])
        (out / "results.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return result


def write_translations(path: str | Path, ids: Sequence[str], hyps: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{i}\t{h}\n" for i, h in zip(ids, hyps)), encoding="utf-8")


SWEEP_HEADER = ("method", "asr_budget", "st_budget", "bleu", "word_sim", "sent_sim", "seed")


def budget_sweep(cfg: RunConfig, corpus_dir: str | Path, seed: int, methods: Sequence[str],
                 asr_budgets: Sequence[Optional[int]], st_budgets: Sequence[int],
                 out_dir: Optional[str | Path] = None, mt_model: Optional[WacoModel] = None,
                 splits: Optional[Dict[str, List[Utterance]]] = None,
                 vocab: Optional[BpeVocab] = None) -> List[dict]:
    """One full pipeline run per (method, ASR budget, ST budget) cell, all with the same seed.

    An ASR budget of ``None`` means the whole ASR split. The MT model is
    trained once and shared by every cell. Writes ``sweep.csv`` when
    ``out_dir`` is given.
    """
    splits = splits if splits is not None else load_corpus(corpus_dir)
    vocab = vocab or build_vocab(splits, cfg.pipeline.bpe_vocab_size)
    if mt_model is None:
        mt_model = train_mt_model(cfg, vocab, splits, seed)
    rows = []
    for method in methods:
        for asr_budget in asr_budgets:
            for st_budget in st_budgets:
                cell = copy.deepcopy(cfg)
                cell.pipeline.asr_frames = asr_budget
                cell.pipeline.st_size = st_budget
                r = run_pipeline(cell, corpus_dir, seed, method=method, mt_model=mt_model, splits=splits,
                                 vocab=vocab)
                rows.append({"method": method, "asr_budget": asr_budget if asr_budget else "all",
                             "st_budget": st_budget, "bleu": r.bleu, "word_sim": r.word_sim,
                             "sent_sim": r.sent_sim, "seed": seed})
                log.info("sweep cell %s", rows[-1])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(out / "sweep.csv", rows)
    return rows


def write_sweep_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
