from __future__ import annotations

from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np

from .io import CorpusError, Utterance


def total_frames(corpus: Sequence[Utterance]) -> int:
    return sum(u.n_frames for u in corpus)


def subset_budget(corpus: Sequence[Utterance], frame_budget: int, seed: int) -> List[Utterance]:
    """Random utterances, drawn without replacement, until ``frame_budget`` frames are covered.

    Draws follow one seeded permutation, so for a fixed seed a larger budget
    always returns a superset of a smaller one.
    """
    if frame_budget <= 0:
        raise CorpusError("frame budget must be positive")
    if frame_budget > total_frames(corpus):
        raise CorpusError(f"budget {frame_budget} exceeds corpus size {total_frames(corpus)} frames")
    order = np.random.default_rng(seed).permutation(len(corpus))
    out, acc = [], 0
    for i in order:
        if acc >= frame_budget:
            break
        out.append(corpus[int(i)])
        acc += corpus[int(i)].n_frames
    return out


def take_utterances(corpus: Sequence[Utterance], n: int, seed: int) -> List[Utterance]:
    """Seeded sample of ``n`` utterances (count budget instead of frame budget)."""
    if not 0 < n <= len(corpus):
        raise CorpusError(f"cannot take {n} of {len(corpus)} utterances")
    order = np.random.default_rng(seed).permutation(len(corpus))
    return [corpus[int(i)] for i in order[:n]]


class Translator(Protocol):
    def translate(self, words: Sequence[str]) -> List[str]: ...


class DictionaryTranslator:
    """Word-by-word oracle translator, optionally swapping adjacent output pairs."""

    def __init__(self, table: Dict[str, str], swap_adjacent: bool = False):
        self.table = table
        self.swap_adjacent = swap_adjacent

    def translate(self, words: Sequence[str]) -> List[str]:
        out = [self.table[w] for w in words]
        if self.swap_adjacent:
            for i in range(0, len(out) - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
        return out


class SeqKDError(RuntimeError):
    pass


def seqkd_expand(asr_corpus: Sequence[Utterance], mt_model: Translator,
                 id_suffix: Optional[str] = None) -> List[Utterance]:
    """Attach a machine translation of each transcript, producing pseudo ST triplets."""
    out = []
    for u in asr_corpus:
        if not u.transcript:
            raise SeqKDError(f"utterance {u.id} has no transcript")
        try:
            hyp = mt_model.translate(u.transcript)
        except Exception as e:
            raise SeqKDError(f"translation failed for utterance {u.id}: {e}") from e
        v = u.with_translation(hyp)
        if id_suffix:
            v.id = f"{u.id}{id_suffix}"
        out.append(v)
    return out
