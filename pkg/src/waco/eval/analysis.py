"""Speech/text representation analyses: similarity reports and alignment matrices."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from ..corpus.bpe import BpeVocab
from ..data import Example, collate
from ..losses import cosine_matrix, masked_mean, pool_word
from ..model import WacoModel, lengths_to_mask


@dataclass
class SimilarityReport:
    word_level_mean_cosine: float
    sentence_level_mean_cosine: float
    n_words: int
    n_sentences: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AlignmentMatrices:
    id: str
    words: List[str]
    token_to_frame: np.ndarray  # m x enc_len
    word_level: np.ndarray  # m x m, rows text words, columns speech words


def _encode(model: WacoModel, vocab: BpeVocab, examples: Sequence[Example]):
    b = collate(examples, vocab, with_translation=False, with_transcript_target=False)
    speech, lens = model.s_enc(b.feats, b.n_frames)
    text = model.t_emb(b.src)
    return b, speech, lens, text


@torch.no_grad()
def similarity_report(model: WacoModel, vocab: BpeVocab, examples: Sequence[Example],
                      batch_size: int = 64) -> SimilarityReport:
    """Mean word-level and sentence-level speech/transcript cosine similarity.

    Word level pools each aligned span of the speech-encoder output and of
    the raw embedding rows; sentence level mean-pools all real frames and
    all transcript tokens. Utterances without spans count only at the
    sentence level.
    """
    was = model.training
    model.eval()
    word_sims: List[float] = []
    sent_sims: List[float] = []
    try:
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            b, speech, lens, text = _encode(model, vocab, chunk)
            fs_sent = masked_mean(speech, lengths_to_mask(lens, speech.shape[1]))
            ft_sent = masked_mean(text, b.src_mask)
            sent_sims += torch.nn.functional.cosine_similarity(fs_sent, ft_sent, dim=-1).tolist()
            for j, spans in enumerate(b.spans):
                if not spans:
                    continue
                fs = torch.stack([pool_word(speech[j], s.enc_frame_range) for s in spans])
                ft = torch.stack([pool_word(text[j], s.token_range) for s in spans])
                word_sims += torch.nn.functional.cosine_similarity(fs, ft, dim=-1).tolist()
    finally:
        model.train(was)
    return SimilarityReport(
        float(np.mean(word_sims)) if word_sims else float("nan"),
        float(np.mean(sent_sims)) if sent_sims else float("nan"),
        len(word_sims),
        len(sent_sims),
    )


@torch.no_grad()
def alignment_matrix(model: WacoModel, vocab: BpeVocab, example: Example) -> AlignmentMatrices:
    """Token-to-frame and word-to-word cosine matrices for one aligned utterance."""
    if not example.spans:
        raise ValueError(f"utterance {example.id} has no word spans")
    was = model.training
    model.eval()
    try:
        _, speech, lens, text = _encode(model, vocab, [example])
    finally:
        model.train(was)
    frames = speech[0, : int(lens[0])]
    spans = example.spans
    ft = torch.stack([pool_word(text[0], s.token_range) for s in spans])
    fs = torch.stack([pool_word(frames, s.enc_frame_range) for s in spans])
    return AlignmentMatrices(
        example.id,
        [s.word for s in spans],
        cosine_matrix(ft, frames).double().numpy(),
        cosine_matrix(ft, fs).double().numpy(),
    )


def diagonal_margin(matrices: Sequence[AlignmentMatrices]) -> Tuple[float, float, float]:
    """(mean diagonal, mean off-diagonal, difference) over word-level matrices with m >= 2."""
    diag, off = [], []
    for m in matrices:
        w = m.word_level
        if w.shape[0] < 2:
            continue
        mask = np.eye(w.shape[0], dtype=bool)
        diag.extend(w[mask].tolist())
        off.extend(w[~mask].tolist())
    d, o = float(np.mean(diag)), float(np.mean(off))
    return d, o, d - o


def write_matrix_tsv(path: str | Path, matrix: np.ndarray, row_labels: Optional[Sequence[str]] = None,
                     col_labels: Optional[Sequence[str]] = None) -> None:
    lines = []
    if col_labels is not None:
        lines.append("\t".join([""] + list(col_labels)))
    for i, row in enumerate(matrix):
        cells = [f"{x:.6f}" for x in row]
        if row_labels is not None:
            cells = [row_labels[i]] + cells
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
