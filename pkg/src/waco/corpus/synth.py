"""Synthetic paired speech/text corpora with exact word alignments.

Every source word owns a fixed random prototype vector. An utterance's
"speech" is, per word, ``duration`` copies of that prototype plus Gaussian
noise, with zero-mean silence blocks before, between and after the words.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .io import CorpusError, Utterance, save_split

TRANSLATION_RULES = ("identity_dictionary", "adjacent_swap_dictionary")
SPEECH_SPLITS = ("asr_train", "asr_dev", "st_train", "st_dev", "st_test")
TEXT_SPLITS = ("mt_train", "mt_dev")
ALL_SPLITS = SPEECH_SPLITS + TEXT_SPLITS


def _default_sizes() -> Dict[str, int]:
    return {
        "asr_train": 2000,
        "asr_dev": 200,
        "st_train": 400,
        "st_dev": 100,
        "st_test": 200,
        "mt_train": 6000,
        "mt_dev": 200,
    }


@dataclass
class CorpusSpec:
    n_source_words: int = 100
    feat_dim: int = 16
    frames_per_word: Tuple[int, int] = (10, 18)
    silence_frames: Tuple[int, int] = (1, 3)
    words_per_utterance: Tuple[int, int] = (3, 7)
    word_length: Tuple[int, int] = (2, 6)
    noise_sigma: float = 0.3
    translation_rule: str = "adjacent_swap_dictionary"
    sizes: Dict[str, int] = field(default_factory=_default_sizes)
    seed: int = 0

    def validate(self) -> None:
        errs = []
        for name in ("n_source_words", "feat_dim"):
            if getattr(self, name) <= 0:
                errs.append(f"{name} must be positive")
        for name in ("frames_per_word", "silence_frames", "words_per_utterance", "word_length"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                errs.append(f"{name} must be an ordered non-negative range")
        if self.frames_per_word[0] < 2:
            errs.append("frames_per_word must start at 2 or more")
        if self.words_per_utterance[0] < 1 or self.word_length[0] < 1:
            errs.append("words_per_utterance and word_length must start at 1 or more")
        if self.noise_sigma < 0:
            errs.append("noise_sigma must be >= 0")
        if self.translation_rule not in TRANSLATION_RULES:
            errs.append(f"translation_rule must be one of {TRANSLATION_RULES}")
        for k, v in self.sizes.items():
            if k not in ALL_SPLITS:
                errs.append(f"unknown split {k!r}")
            elif v <= 0:
                errs.append(f"split {k!r} has size {v}; every split needs at least one utterance")
        if 26 ** self.word_length[1] < 2 * self.n_source_words:
            errs.append("word_length range too small for the requested lexicon")
        if errs:
            raise CorpusError("; ".join(errs))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frames_per_word"] = list(self.frames_per_word)
        d["silence_frames"] = list(self.silence_frames)
        d["words_per_utterance"] = list(self.words_per_utterance)
        d["word_length"] = list(self.word_length)
        return d


@dataclass
class Lexicon:
    source: List[str]
    target: List[str]
    prototypes: np.ndarray

    def translate(self, words: List[str], rule: str) -> List[str]:
        idx = {w: i for i, w in enumerate(self.source)}
        out = [self.target[idx[w]] for w in words]
        if rule == "adjacent_swap_dictionary":
            for i in range(0, len(out) - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
        return out


def make_lexicon(spec: CorpusSpec) -> Lexicon:
    rng = np.random.default_rng([spec.seed, 0])
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    seen = set()
    words: List[str] = []
    while len(words) < 2 * spec.n_source_words:
        n = int(rng.integers(spec.word_length[0], spec.word_length[1] + 1))
        w = "".join(rng.choice(letters, size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    protos = rng.standard_normal((spec.n_source_words, spec.feat_dim))
    return Lexicon(words[: spec.n_source_words], words[spec.n_source_words:], protos)


def synthesize(spec: CorpusSpec, lex: Lexicon, rng: np.random.Generator, word_ids: List[int]):
    """Frames and exact ``[start, end)`` intervals for one word sequence."""
    blocks = []
    intervals = []
    t = 0

    def silence():
        nonlocal t
        n = int(rng.integers(spec.silence_frames[0], spec.silence_frames[1] + 1))
        if n:
            blocks.append(spec.noise_sigma * rng.standard_normal((n, spec.feat_dim)))
            t += n

    silence()
    for wid in word_ids:
        dur = int(rng.integers(spec.frames_per_word[0], spec.frames_per_word[1] + 1))
        noise = spec.noise_sigma * rng.standard_normal((dur, spec.feat_dim))
        blocks.append(lex.prototypes[wid][None, :] + noise)
        intervals.append((lex.source[wid], t, t + dur))
        t += dur
        silence()
    return np.concatenate(blocks, axis=0).astype(np.float32), intervals


def generate_split(spec: CorpusSpec, lex: Lexicon, split: str) -> List[Utterance]:
    rng = np.random.default_rng([spec.seed, 1 + ALL_SPLITS.index(split)])
    n = spec.sizes[split]
    utts = []
    for i in range(n):
        n_words = int(rng.integers(spec.words_per_utterance[0], spec.words_per_utterance[1] + 1))
        ids = [int(x) for x in rng.integers(0, spec.n_source_words, size=n_words)]
        words = [lex.source[j] for j in ids]
        translation = lex.translate(words, spec.translation_rule)
        uid = f"{split}-{i:06d}"
        if split in TEXT_SPLITS:
            utts.append(Utterance(uid, None, words, translation))
            continue
        feats, intervals = synthesize(spec, lex, rng, ids)
        utts.append(Utterance(
            uid, feats, words,
            None if split.startswith("asr") else translation,
            intervals,
        ))
    return utts


def generate_corpus(spec: CorpusSpec, out_dir: str | Path) -> Dict[str, Path]:
    """Write every split of ``spec`` under ``out_dir``; returns manifest paths by split."""
    spec.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise CorpusError(f"{out} is not writable")
    lex = make_lexicon(spec)
    manifests = {}
    for split in ALL_SPLITS:
        if split not in spec.sizes:
            continue
        manifests[split] = save_split(out, split, generate_split(spec, lex, split))
    lines = [f"{s}\t{t}\n" for s, t in zip(lex.source, lex.target)]
    (out / "lexicon.tsv").write_text("".join(lines), encoding="utf-8")
    return manifests


def load_lexicon(path: str | Path) -> Dict[str, str]:
    pairs = [ln.split("\t") for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
    return {s: t for s, t in pairs}
