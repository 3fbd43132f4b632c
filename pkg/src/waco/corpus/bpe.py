"""Deterministic greedy byte-pair encoding with SentencePiece-style word markers.

The word-boundary marker ``▁`` is a symbol of its own in the base alphabet and
is fused onto the following characters only through learned merges, so a
word-initial token is any token that starts with the marker.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

MARKER = "▁"
PAD, BOS, EOS, SRC_TAG, TGT_TAG, BLANK = "<pad>", "<s>", "</s>", "<2src>", "<2tgt>", "<blank>"
SPECIALS = (PAD, BOS, EOS, SRC_TAG, TGT_TAG)
MERGES_HEADER = "#MERGES"

_PUNCT = set(string.punctuation)


class BpeError(ValueError):
    pass


def split_words(text: str | Sequence[str]) -> List[str]:
    """Whitespace split with every punctuation character made its own word."""
    raw = text.split() if isinstance(text, str) else list(text)
    words: List[str] = []
    for w in raw:
        buf = ""
        for ch in w:
            if ch in _PUNCT:
                if buf:
                    words.append(buf)
                    buf = ""
                words.append(ch)
            else:
                buf += ch
        if buf:
            words.append(buf)
    return words


def is_punct_word(word: str) -> bool:
    return bool(word) and all(ch in _PUNCT for ch in word)


def _apply_merge(symbols: List[str], left: str, right: str) -> List[str]:
    out: List[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


@dataclass
class BpeVocab:
    """Token inventory plus ordered merge rules.

    Ids are dense: specials first, then the base alphabet, then merged
    symbols in merge order, and the CTC blank last. The blank is never
    produced by :func:`encode`; ``n_text`` counts every id except it.
    """

    tokens: List[str]
    merges: List[Tuple[str, str]]
    _index: Dict[str, int] = field(init=False, repr=False)
    _cache: Dict[str, List[int]] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise BpeError("duplicate tokens in vocabulary")
        for sp in SPECIALS + (BLANK,):
            if sp not in self._index:
                raise BpeError(f"vocabulary lacks special token {sp!r}")
        if self.tokens[-1] != BLANK:
            raise BpeError("blank must be the last id")

    def __len__(self):
        return len(self.tokens)

    @property
    def n_text(self) -> int:
        return len(self.tokens) - 1

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def src_tag_id(self) -> int:
        return self._index[SRC_TAG]

    @property
    def tgt_tag_id(self) -> int:
        return self._index[TGT_TAG]

    @property
    def blank_id(self) -> int:
        return self._index[BLANK]

    def id_of(self, token: str) -> int:
        return self._index[token]

    def is_word_start(self, token_id: int) -> bool:
        return self.tokens[token_id].startswith(MARKER)

    def save(self, path: str | Path) -> None:
        lines = list(self.tokens) + [MERGES_HEADER] + [f"{a}\t{b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if MERGES_HEADER not in lines:
            raise BpeError(f"{path}: missing {MERGES_HEADER} separator")
        cut = lines.index(MERGES_HEADER)
        merges = []
        for ln, line in enumerate(lines[cut + 1:], start=cut + 2):
            parts = line.split("\t")
            if len(parts) != 2:
                raise BpeError(f"{path}:{ln}: malformed merge rule")
            merges.append((parts[0], parts[1]))
        return cls(lines[:cut], merges)


def _word_symbols(word: str) -> List[str]:
    return [MARKER] + list(word)


def train_bpe(texts: Iterable[str | Sequence[str]], vocab_size: int) -> BpeVocab:
    """Learn merges until ``vocab_size`` ids exist (specials and blank included).

    Each round merges the most frequent adjacent pair; ties go to the
    lexicographically smallest merged string.
    """
    freqs: Counter = Counter()
    for text in texts:
        freqs.update(split_words(text))
    alphabet = sorted({MARKER} | {ch for w in freqs for ch in w})
    n_fixed = len(SPECIALS) + len(alphabet) + 1
    if vocab_size < n_fixed:
        raise BpeError(f"vocab_size {vocab_size} < alphabet+specials ({n_fixed})")

    words = {w: _word_symbols(w) for w in sorted(freqs)}
    known = set(alphabet)
    merges: List[Tuple[str, str]] = []
    merged_tokens: List[str] = []
    while len(merged_tokens) < vocab_size - n_fixed:
        pairs: Counter = Counter()
        for w, syms in words.items():
            f = freqs[w]
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += f
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0][0] + kv[0][1], kv[0]))[0]
        merges.append(best)
        new = best[0] + best[1]
        if new not in known:
            known.add(new)
            merged_tokens.append(new)
        for w in words:
            if best[0] in words[w] and best[1] in words[w]:
                words[w] = _apply_merge(words[w], *best)
    return BpeVocab(list(SPECIALS) + alphabet + merged_tokens + [BLANK], merges)


def encode_word(vocab: BpeVocab, word: str) -> List[int]:
    cached = vocab._cache.get(word)
    if cached is not None:
        return list(cached)
    for ch in word:
        if ch not in vocab._index or ch == MARKER:
            raise BpeError(f"character {ch!r} in {word!r} is not in the BPE alphabet")
    syms = _word_symbols(word)
    for a, b in vocab.merges:
        if len(syms) == 1:
            break
        syms = _apply_merge(syms, a, b)
    ids = [vocab.id_of(s) for s in syms]
    vocab._cache[word] = ids
    return list(ids)


def encode(vocab: BpeVocab, text: str | Sequence[str]) -> List[int]:
    """Token ids of ``text``; raises :class:`BpeError` on unknown characters."""
    out: List[int] = []
    for w in split_words(text):
        out.extend(encode_word(vocab, w))
    return out


def decode(vocab: BpeVocab, ids: Iterable[int]) -> str:
    special = {vocab.id_of(s) for s in SPECIALS} | {vocab.blank_id}
    text = "".join(vocab.tokens[i] for i in ids if i not in special)
    return " ".join(text.replace(MARKER, " ").split())


def group_words(vocab: BpeVocab, tokens: Sequence[int]) -> List[Tuple[int, int]]:
    """1-based inclusive token ranges, one per word-initial token."""
    if not tokens:
        return []
    if not vocab.is_word_start(tokens[0]):
        raise BpeError("first token does not carry the word-boundary marker")
    starts = [i for i, t in enumerate(tokens) if vocab.is_word_start(t)]
    ends = starts[1:] + [len(tokens)]
    return [(s + 1, e) for s, e in zip(starts, ends)]


def word_strings(vocab: BpeVocab, tokens: Sequence[int]) -> List[str]:
    return [
        "".join(vocab.tokens[t] for t in tokens[l - 1:r]).lstrip(MARKER)
        for l, r in group_words(vocab, tokens)
    ]
