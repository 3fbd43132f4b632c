from .analysis import (
    AlignmentMatrices,
    SimilarityReport,
    alignment_matrix,
    diagonal_margin,
    similarity_report,
    write_matrix_tsv,
)
from .decode import (
    DecodeConfig,
    ModelTranscriber,
    ModelTranslator,
    beam_decode,
    beam_search,
    cascade_eval,
    cascade_translate,
)
from .metrics import bleu, edit_distance, tokenize_13a, wer

__all__ = [
    "AlignmentMatrices", "DecodeConfig", "ModelTranscriber", "ModelTranslator", "SimilarityReport", "alignment_matrix",
    "beam_decode", "beam_search", "bleu", "cascade_eval", "cascade_translate", "diagonal_margin", "edit_distance", "similarity_report",
    "tokenize_13a", "wer", "write_matrix_tsv",
]
