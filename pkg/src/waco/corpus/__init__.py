from .bpe import BpeError, BpeVocab, decode, encode, group_words, split_words, train_bpe
from .io import (
    CorpusError,
    Utterance,
    load_alignment,
    load_manifest,
    read_features,
    save_split,
    write_alignment,
    write_features,
    write_manifest,
)
from .ops import DictionaryTranslator, SeqKDError, seqkd_expand, subset_budget, take_utterances, total_frames
from .synth import CorpusSpec, generate_corpus, load_lexicon, make_lexicon

__all__ = [
    "BpeError", "BpeVocab", "CorpusError", "CorpusSpec", "DictionaryTranslator", "SeqKDError",
    "Utterance", "decode", "encode", "generate_corpus", "group_words", "load_alignment",
    "load_lexicon", "load_manifest", "make_lexicon", "read_features", "save_split", "seqkd_expand",
    "split_words", "subset_budget", "take_utterances", "total_frames", "train_bpe",
    "write_alignment", "write_features", "write_manifest",
]
