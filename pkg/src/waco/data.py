"""Tokenised, span-annotated utterances and their collation into padded tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import Tensor

from .alignment import Skip, build_spans
from .corpus.bpe import BpeVocab, encode
from .corpus.io import Utterance


@dataclass
class Example:
    id: str
    features: Optional[Tensor]
    src: List[int]
    tgt: Optional[List[int]]
    spans: object  # list of WordSpan or Skip
    utt: Utterance

    @property
    def n_frames(self) -> int:
        return 0 if self.features is None else self.features.shape[0]

    @property
    def length(self) -> int:
        """Batching length: frames for speech, tokens for text-only rows."""
        return self.n_frames if self.features is not None else max(len(self.src), len(self.tgt or []))


def prepare(utts: Sequence[Utterance], vocab: BpeVocab, enc_length=None,
            with_spans: bool = True) -> List[Example]:
    """Tokenise every utterance and, where possible, attach word spans.

    ``enc_length`` maps a raw frame count to the speech-encoder length.
    """
    out = []
    for u in utts:
        src = encode(vocab, u.transcript)
        tgt = encode(vocab, u.translation) if u.translation is not None else None
        feats = torch.from_numpy(u.features) if u.features is not None else None
        spans = Skip("no speech")
        if with_spans and feats is not None and enc_length is not None:
            spans = build_spans(u, vocab, enc_length(u.n_frames), src)
        out.append(Example(u.id, feats, src, tgt, spans, u))
    return out


@dataclass
class Batch:
    ids: List[str]
    feats: Optional[Tensor]
    n_frames: Optional[Tensor]
    src: Tensor
    src_mask: Tensor
    spans: list
    src_lists: List[List[int]]
    st_in: Optional[Tensor] = None
    st_out: Optional[Tensor] = None
    asr_in: Optional[Tensor] = None
    asr_out: Optional[Tensor] = None

    def __len__(self):
        return len(self.ids)


def _pad(seqs: Sequence[Sequence[int]], pad: int) -> Tensor:
    n = max(1, max(len(s) for s in seqs))
    out = torch.full((len(seqs), n), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def decoder_io(seqs: Sequence[Sequence[int]], tag: int, vocab: BpeVocab):
    """Teacher-forcing pair: input ``<s> tag t1..tn``, output ``<pad> t1..tn </s>``."""
    ins = [[vocab.bos_id, tag] + list(s) for s in seqs]
    outs = [[vocab.pad_id] + list(s) + [vocab.eos_id] for s in seqs]
    return _pad(ins, vocab.pad_id), _pad(outs, vocab.pad_id)


def collate(examples: Sequence[Example], vocab: BpeVocab, with_translation: bool = True,
            with_transcript_target: bool = True) -> Batch:
    feats = n_frames = None
    if all(e.features is not None for e in examples):
        T = max(e.n_frames for e in examples)
        F = examples[0].features.shape[1]
        feats = torch.zeros(len(examples), T, F)
        for i, e in enumerate(examples):
            feats[i, :e.n_frames] = e.features
        n_frames = torch.tensor([e.n_frames for e in examples], dtype=torch.long)
    src = _pad([e.src for e in examples], vocab.pad_id)
    b = Batch(
        ids=[e.id for e in examples],
        feats=feats,
        n_frames=n_frames,
        src=src,
        src_mask=src != vocab.pad_id,
        spans=[e.spans for e in examples],
        src_lists=[e.src for e in examples],
    )
    if with_translation and all(e.tgt is not None for e in examples):
        b.st_in, b.st_out = decoder_io([e.tgt for e in examples], vocab.tgt_tag_id, vocab)
    if with_transcript_target:
        b.asr_in, b.asr_out = decoder_io([e.src for e in examples], vocab.src_tag_id, vocab)
    return b
