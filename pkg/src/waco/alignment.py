"""Word spans linking BPE token ranges to speech-encoder frame ranges.

All ranges here are 1-based and inclusive. Raw alignment intervals from the
corpus are 0-based half-open ``[start, end)``; ``start + 1 .. end`` is the
same span in 1-based form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .corpus.bpe import BpeVocab, encode, group_words, is_punct_word, word_strings
from .corpus.io import Interval, Utterance

Range = Tuple[int, int]


@dataclass(frozen=True)
class WordSpan:
    word: str
    token_range: Range
    raw_frame_range: Range
    enc_frame_range: Optional[Range] = None


class Skip:
    """Marker for an utterance excluded from contrastive batches."""

    def __init__(self, reason: str):
        self.reason = reason

    def __bool__(self):
        return False

    def __repr__(self):
        return f"Skip({self.reason!r})"


def match_words(intervals: Optional[Sequence[Interval]], grouped: Sequence[Tuple[str, Range]]):
    """Pair interval words with token words by position.

    Punctuation-only words on the token side are dropped first, unless the
    aligner gave punctuation intervals of its own. Any count or
    (case-insensitive) string mismatch yields a :class:`Skip`.
    """
    if not intervals:
        return Skip("no word intervals")
    if any(is_punct_word(w) for w, _, _ in intervals):
        words = list(grouped)
    else:
        words = [(w, r) for w, r in grouped if not is_punct_word(w)]
    if len(words) != len(intervals):
        return Skip(f"{len(intervals)} intervals vs {len(words)} words")
    spans = []
    for (iw, start, end), (tw, trange) in zip(intervals, words):
        if iw.lower() != tw.lower():
            return Skip(f"word mismatch {iw!r} / {tw!r}")
        if end - start < 2:
            return Skip(f"interval for {iw!r} is a single frame")
        spans.append(WordSpan(tw, trange, (start + 1, end)))
    return spans


def rescale_interval(l: int, r: int, n_frames: int, enc_len: int) -> Range:
    """Map a raw 1-based frame range onto a shortened encoder sequence.

    The left edge is floored and the right edge ceiled, both clamped, and the
    result is never empty.
    """
    if not (1 <= l < r <= n_frames) or enc_len < 1:
        raise ValueError(f"invalid interval ({l}, {r}) for n_frames={n_frames}, enc_len={enc_len}")
    # Integer arithmetic keeps the floor/ceil exact.
    lt = max(1, (l * enc_len) // n_frames + 1)
    rt = min(enc_len, -((-r * enc_len) // n_frames))
    rt = max(rt, 1)
    return (min(lt, rt), rt)


def build_spans(utt: Utterance, vocab: BpeVocab, enc_len: int, tokens: Optional[Sequence[int]] = None):
    """WordSpans for ``utt`` with encoder ranges filled in, or a :class:`Skip`."""
    if not utt.word_intervals:
        return Skip("no word intervals")
    toks = encode(vocab, utt.transcript) if tokens is None else tokens
    ranges = group_words(vocab, toks)
    grouped = list(zip(word_strings(vocab, toks), ranges))
    spans = match_words(utt.word_intervals, grouped)
    if not spans:
        return spans
    return [
        WordSpan(s.word, s.token_range, s.raw_frame_range,
                 rescale_interval(*s.raw_frame_range, utt.n_frames, enc_len))
        for s in spans
    ]
