"""Batched beam search over the joint decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
from torch import Tensor

from ..corpus.bpe import BpeVocab, decode as bpe_decode, encode
from ..corpus.io import Utterance
from ..data import Example, collate
from ..model import WacoModel, lengths_to_mask


@dataclass
class DecodeConfig:
    beam_size: int = 10
    length_penalty_alpha: float = 1.0
    max_len: int = 40
    batch_size: int = 64

    def validate(self) -> None:
        if self.beam_size < 1 or self.max_len < 1:
            raise ValueError("beam_size and max_len must be >= 1")


def _normalized(score: float, length: int, alpha: float) -> float:
    return score / (max(length, 1) ** alpha) if alpha else score


@torch.no_grad()
def beam_search(step_fn, batch_size: int, prefix: Sequence[int], eos: int, cfg: DecodeConfig) -> List[List[int]]:
    """Generic beam search.

    ``step_fn(rows, tokens)`` returns next-token log-probabilities ``(N, V)``
    for decoder inputs ``tokens`` (N, t) belonging to batch rows ``rows``.
    A hypothesis is ranked by its summed log-probability divided by
    ``len ** alpha`` (``len`` counts generated tokens, EOS included). Ties go
    to the earlier-finished hypothesis, then to the smaller token sequence.
    """
    K = cfg.beam_size
    alpha = cfg.length_penalty_alpha
    beams: List[List[Tuple[float, List[int]]]] = [[(0.0, [])] for _ in range(batch_size)]
    finished: List[List[Tuple[float, int, List[int], float]]] = [[] for _ in range(batch_size)]
    active = list(range(batch_size))
    for t in range(cfg.max_len):
        if not active:
            break
        rows, toks = [], []
        for b in active:
            for _, seq in beams[b]:
                rows.append(b)
                toks.append(list(prefix) + seq)
        logp = step_fn(torch.tensor(rows), torch.tensor(toks, dtype=torch.long)).double()
        V = logp.shape[-1]
        still = []
        r = 0
        for b in active:
            nb = len(beams[b])
            base = torch.tensor([s for s, _ in beams[b]], dtype=torch.float64)
            cand = (base[:, None] + logp[r:r + nb]).reshape(-1)
            r += nb
            order = torch.sort(cand, descending=True, stable=True).indices.tolist()
            nxt = []
            for idx in order:
                k, v = divmod(idx, V)
                score = float(cand[idx])
                if score == float("-inf"):
                    break
                seq = beams[b][k][1] + [v]
                if v == eos:
                    finished[b].append((_normalized(score, len(seq), alpha), t, seq[:-1], score))
                else:
                    nxt.append((score, seq))
                if len(nxt) == K or len(finished[b]) >= K:
                    break
            beams[b] = nxt
            done = len(finished[b]) >= K or not nxt
            if not done and alpha == 0 and finished[b]:
                # scores only fall with length, so nothing active can overtake
                done = max(f[0] for f in finished[b]) >= max(s for s, _ in nxt)
            if not done:
                still.append(b)
        active = still
    for b in active:
        for score, seq in beams[b]:
            finished[b].append((_normalized(score, len(seq), alpha), cfg.max_len, seq, score))
    out = []
    for b in range(batch_size):
        best = min(finished[b], key=lambda f: (-f[0], f[1], f[2]))
        out.append(best[2])
    return out


def _memory_step_fn(model: WacoModel, enc: Tensor, enc_mask: Tensor):
    def step(rows: Tensor, toks: Tensor) -> Tensor:
        logits = model.decode(enc[rows], enc_mask[rows], toks)[:, -1]
        logits = logits.clone()
        return torch.log_softmax(logits, dim=-1)
    return step


@torch.no_grad()
def decode_batch(model: WacoModel, vocab: BpeVocab, examples: Sequence[Example], source: str,
                 tag: int, cfg: DecodeConfig) -> List[List[int]]:
    """Decode token ids for each example from ``source`` in {"speech", "text"}."""
    b = collate(examples, vocab, with_translation=False, with_transcript_target=False)
    if source == "speech":
        out, lens = model.s_enc(b.feats, b.n_frames)
        mask = lengths_to_mask(lens, out.shape[1])
        enc = model.joint_encode(model.speech_memory(out), mask)
    else:
        mask = b.src_mask
        enc = model.joint_encode(model.text_memory(b.src), mask)
    step = _memory_step_fn(model, enc, mask)
    return beam_search(step, len(examples), [vocab.bos_id, tag], vocab.eos_id, cfg)


def beam_decode(model: WacoModel, vocab: BpeVocab, examples: Sequence[Example], source: str = "speech",
                target: str = "translation", cfg: DecodeConfig | None = None) -> List[str]:
    """Detokenised hypotheses; ``target`` is "translation" or "transcript"."""
    cfg = cfg or DecodeConfig()
    cfg.validate()
    tag = vocab.tgt_tag_id if target == "translation" else vocab.src_tag_id
    was_training = model.training
    model.eval()
    hyps: List[str] = []
    try:
        for i in range(0, len(examples), cfg.batch_size):
            chunk = examples[i:i + cfg.batch_size]
            hyps += [bpe_decode(vocab, ids) for ids in decode_batch(model, vocab, chunk, source, tag, cfg)]
    finally:
        model.train(was_training)
    return hyps


class ModelTranslator:
    """Text-to-text translator backed by a trained joint model (for SeqKD and cascades)."""

    def __init__(self, model: WacoModel, vocab: BpeVocab, cfg: DecodeConfig | None = None):
        self.model, self.vocab, self.cfg = model, vocab, cfg or DecodeConfig()

    def translate(self, words: Sequence[str]) -> List[str]:
        return self.translate_many([list(words)])[0]

    def translate_many(self, sentences: Sequence[Sequence[str]]) -> List[List[str]]:
        exs = [Example(str(i), None, encode(self.vocab, s), None, None, Utterance(str(i), None, list(s)))
               for i, s in enumerate(sentences)]
        return [h.split() for h in beam_decode(self.model, self.vocab, exs, "text", "translation", self.cfg)]


class ModelTranscriber:
    """Speech-to-transcript decoding with the joint model (the ASR half of a cascade)."""

    def __init__(self, model: WacoModel, vocab: BpeVocab, cfg: DecodeConfig | None = None):
        self.model, self.vocab, self.cfg = model, vocab, cfg or DecodeConfig()

    def transcribe_many(self, examples: Sequence[Example]) -> List[List[str]]:
        return [h.split() for h in beam_decode(self.model, self.vocab, examples, "speech", "transcript", self.cfg)]


def cascade_translate(asr, mt, examples: Sequence[Example]) -> List[str]:
    """Transcribe speech with ``asr`` then translate the transcripts with ``mt``.

    ``asr`` needs ``transcribe_many(examples)``; ``mt`` needs ``translate(words)``
    and may offer a batched ``translate_many``.
    """
    transcripts = asr.transcribe_many(examples)
    if hasattr(mt, "translate_many"):
        outs = mt.translate_many(transcripts)
    else:
        outs = [mt.translate(t) for t in transcripts]
    return [" ".join(o) for o in outs]


def cascade_eval(asr, mt, examples: Sequence[Example]) -> float:
    """Cascade BLEU against each example's reference translation."""
    from .metrics import bleu

    hyps = cascade_translate(asr, mt, examples)
    return bleu(hyps, [" ".join(e.utt.translation) for e in examples])
