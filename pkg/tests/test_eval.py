import functools
import itertools
import math
import random

import numpy as np
import pytest
import torch

from waco.corpus import DictionaryTranslator, Utterance, load_lexicon, train_bpe
from waco.data import prepare
from waco.eval import (
    DecodeConfig,
    alignment_matrix,
    beam_search,
    bleu,
    cascade_eval,
    diagonal_margin,
    edit_distance,
    similarity_report,
    wer,
    write_matrix_tsv,
)
from waco.losses import pool_word
from waco.model import ModelConfig, WacoModel

# Recorded once from sacrebleu 2.6.0 (13a tokenisation, exp smoothing).
FIXTURE_HYPS = ["the cat sat on the mat .", "a quick brown fox jumps", "hello there , general kenobi !"]
FIXTURE_REFS = ["the cat is sitting on the mat .", "the quick brown fox jumped over", "hello there , general kenobi ."]
FIXTURE_BLEU = 48.517488640530466


# -- BLEU ---------------------------------------------------------------------------

def test_bleu_identity_and_empty():
    refs = ["a b c d e", "f g h i"]
    assert bleu(refs, refs) == pytest.approx(100.0)
    assert bleu(["", ""], refs) == 0.0
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu(["a"], ["a", "b"])


def test_bleu_fixture():
    assert bleu(FIXTURE_HYPS, FIXTURE_REFS) == pytest.approx(FIXTURE_BLEU, abs=0.01)


def test_bleu_sentence_order_invariant():
    perm = [2, 0, 1]
    assert bleu([FIXTURE_HYPS[i] for i in perm], [FIXTURE_REFS[i] for i in perm]) == pytest.approx(
        bleu(FIXTURE_HYPS, FIXTURE_REFS), abs=1e-9)


def test_bleu_matches_reference_on_random_corpora():
    sacrebleu = pytest.importorskip("sacrebleu")
    rng = random.Random(0)
    words = "a b c d e f g , . !".split()
    for _ in range(40):
        n = rng.randint(1, 5)
        refs = [" ".join(rng.choice(words) for _ in range(rng.randint(1, 9))) for _ in range(n)]
        hyps = [" ".join(rng.choice(words) for _ in range(rng.randint(0, 9))) for _ in range(n)]
        expect = sacrebleu.corpus_bleu(hyps, [refs], smooth_method="exp", tokenize="13a").score
        assert bleu(hyps, refs) == pytest.approx(expect, abs=1e-6)


# -- WER --------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _lev(a: tuple, b: tuple) -> int:
    # Plain recursive definition, independent of the iterative table.
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(_lev(a[1:], b) + 1, _lev(a, b[1:]) + 1, _lev(a[1:], b[1:]) + (a[0] != b[0]))


def test_wer_examples():
    assert wer(["a b c"], ["a b c"]) == 0.0
    assert wer(["a b x d e"], ["a b c d e"]) == pytest.approx(0.2)
    assert wer(["a", "b c"], ["a x", "b c"]) == pytest.approx(1 / 4)


def test_edit_distance_matches_recursive_oracle():
    rng = random.Random(1)
    for _ in range(300):
        a = tuple(rng.choice("xyz") for _ in range(rng.randint(0, 8)))
        b = tuple(rng.choice("xyz") for _ in range(rng.randint(0, 8)))
        assert edit_distance(a, b) == _lev(a, b)


# -- beam search --------------------------------------------------------------------

def table_step_fn(table):
    """``table(prefix_tuple) -> log-prob vector``; prefix excludes the decoder prompt."""
    def step(rows, toks):
        return torch.stack([table(tuple(t[2:].tolist())) for t in toks])
    return step


def random_table(V, seed):
    cache = {}

    def table(prefix):
        if prefix not in cache:
            g = torch.Generator().manual_seed(hash((seed,) + prefix) % (2 ** 31))
            cache[prefix] = torch.log_softmax(torch.randn(V, generator=g, dtype=torch.float64) * 2, -1)
        return cache[prefix]
    return table


def exhaustive_best(table, V, eos, max_len, alpha):
    best = None
    for L in range(1, max_len + 1):
        for seq in itertools.product(range(V), repeat=L):
            if eos in seq[:-1]:
                continue
            score = sum(table(seq[:i])[t].item() for i, t in enumerate(seq))
            norm = score / (L ** alpha)
            out = list(seq[:-1]) if seq[-1] == eos else list(seq)
            if L < max_len and seq[-1] != eos:
                continue
            if best is None or norm > best[0]:
                best = (norm, out)
    return best


def test_beam_one_is_greedy():
    V, eos = 4, 0
    table = random_table(V, 3)
    got = beam_search(table_step_fn(table), 1, [1, 2], eos, DecodeConfig(beam_size=1, max_len=5))[0]
    prefix = []
    for _ in range(5):
        t = int(table(tuple(prefix)).argmax())
        if t == eos:
            break
        prefix.append(t)
    assert got == prefix


def test_beam_finds_better_total_than_greedy():
    # First step: token 1 looks best (0.6 vs 0.4), but every continuation
    # after it is flat, whereas token 2 is followed by a near-certain EOS.
    lp = lambda *p: torch.log(torch.tensor(p, dtype=torch.float64))

    def table(prefix):
        if prefix == ():
            return lp(1e-9, 0.6, 0.4 - 1e-9)
        if prefix == (1,):
            return lp(0.34, 0.33, 0.33)
        return lp(0.98, 0.01, 0.01)

    cfg = dict(max_len=2, length_penalty_alpha=0.0)
    greedy = beam_search(table_step_fn(table), 1, [1, 2], 0, DecodeConfig(beam_size=1, **cfg))[0]
    beam = beam_search(table_step_fn(table), 1, [1, 2], 0, DecodeConfig(beam_size=2, **cfg))[0]
    assert greedy == [1] and beam == [2]
    # exhaustive check over all length-2 outcomes
    assert exhaustive_best(table, 3, 0, 2, 0.0)[1] == [2]


@pytest.mark.parametrize("seed", range(8))
def test_beam_alpha_zero_matches_exhaustive(seed):
    for V in (2, 3, 4):
        for max_len in (1, 2, 3):
            table = random_table(V, seed * 10 + V)
            full = V ** max_len
            got = beam_search(table_step_fn(table), 1, [1, 2], 0,
                              DecodeConfig(beam_size=full, max_len=max_len, length_penalty_alpha=0.0))[0]
            best_score, best_seq = exhaustive_best(table, V, 0, max_len, 0.0)
            assert got == best_seq
            # no smaller beam can beat the exhaustive optimum
            for k in range(1, full):
                small = beam_search(table_step_fn(table), 1, [1, 2], 0,
                                    DecodeConfig(beam_size=k, max_len=max_len, length_penalty_alpha=0.0))[0]
                ending = small + ([0] if len(small) < max_len else [])
                sc = sum(table(tuple(ending[:i]))[t].item() for i, t in enumerate(ending))
                assert sc <= best_score + 1e-12


def test_beam_batched_equals_individual():
    V = 4
    tables = [random_table(V, s) for s in (11, 12, 13)]

    def step(rows, toks):
        return torch.stack([tables[r](tuple(t[2:].tolist())) for r, t in zip(rows.tolist(), toks)])

    cfg = DecodeConfig(beam_size=3, max_len=4, length_penalty_alpha=1.0)
    batched = beam_search(step, 3, [1, 2], 0, cfg)
    for i, tab in enumerate(tables):
        assert batched[i] == beam_search(table_step_fn(tab), 1, [1, 2], 0, cfg)[0]


# -- similarity analyses ------------------------------------------------------------------

class ForcedSpeech(WacoModel):
    """Test double: the speech encoder returns the pooled text rows on every span."""

    def set_examples(self, examples):
        self._examples = examples

    def s_enc(self, feats, n_frames):
        lens = n_frames.clone()
        out = torch.randn(feats.shape[0], feats.shape[1], self.cfg.d_model)
        for j, ex in enumerate(self._examples):
            text = self.t_emb(torch.tensor(ex.src))
            for s in ex.spans:
                l, r = s.enc_frame_range
                out[j, l - 1:r] = pool_word(text, s.token_range)
        return out, lens


@pytest.fixture(scope="module")
def aligned(small_corpus):
    _, _, splits = small_corpus
    texts = [u.transcript for u in splits["mt_train"]] + [u.transcript for u in splits["asr_train"]]
    vocab = train_bpe(texts, 60)
    cfg = ModelConfig(feat_dim=8, d_model=16, n_heads=2, ffn_dim=24, downsample=[(1, 1)], vocab_size=vocab.n_text)
    torch.manual_seed(0)
    model = ForcedSpeech(cfg).eval()
    exs = [e for e in prepare(splits["asr_train"], vocab, lambda n: n) if e.spans][:12]
    model.set_examples(exs)
    return vocab, model, exs


def test_forced_double_gives_unit_similarity(aligned):
    vocab, model, exs = aligned
    rep = similarity_report(model, vocab, exs, batch_size=len(exs))
    assert rep.word_level_mean_cosine == pytest.approx(1.0, abs=1e-6)
    assert rep.n_words == sum(len(e.spans) for e in exs) and rep.n_sentences == len(exs)
    assert -1 <= rep.sentence_level_mean_cosine <= 1


def test_forced_double_identity_pattern(aligned, tmp_path):
    vocab, model, exs = aligned
    ex = next(e for e in exs if len({s.word for s in e.spans}) == len(e.spans) >= 3)
    model.set_examples([ex])
    mats = alignment_matrix(model, vocab, ex)
    model.set_examples(exs)
    m = len(ex.spans)
    assert mats.token_to_frame.shape == (m, ex.n_frames)
    assert np.allclose(np.diag(mats.word_level), 1.0, atol=1e-6)
    off = mats.word_level[~np.eye(m, dtype=bool)]
    assert np.all(np.abs(off) < 1)
    d, o, diff = diagonal_margin([mats])
    assert d == pytest.approx(1.0, abs=1e-6) and diff == pytest.approx(d - o)
    write_matrix_tsv(tmp_path / "m.tsv", mats.word_level, mats.words, mats.words)
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert len(lines) == m + 1 and lines[0].split("\t")[1:] == mats.words


def test_single_pair_report(aligned):
    vocab, model, exs = aligned
    u = Utterance("one", np.zeros((6, 8), np.float32), [exs[0].utt.transcript[0]], None,
                  [(exs[0].utt.transcript[0], 0, 6)])
    ex = prepare([u], vocab, lambda n: n)[0]
    model.set_examples([ex])
    rep = similarity_report(model, vocab, [ex])
    model.set_examples(exs)
    assert rep.n_words == 1 and rep.word_level_mean_cosine == pytest.approx(1.0, abs=1e-6)


def test_untrained_word_similarity_near_zero(tmp_path):
    from waco.corpus import generate_corpus, load_manifest
    from conftest import small_spec

    generate_corpus(small_spec(feat_dim=16, n_source_words=60, sizes={"asr_train": 150}), tmp_path)
    utts = load_manifest(tmp_path / "asr_train.tsv")
    vocab = train_bpe([u.transcript for u in utts], 150)
    torch.manual_seed(0)
    model = WacoModel(ModelConfig(vocab_size=vocab.n_text)).eval()
    exs = prepare(utts, vocab, model.enc_length)
    rep = similarity_report(model, vocab, exs)
    assert rep.n_words >= 500
    assert abs(rep.word_level_mean_cosine) < 0.1
    again = similarity_report(model, vocab, exs)
    assert again == rep


# -- cascade ------------------------------------------------------------------------------

class OracleASR:
    def transcribe_many(self, examples):
        return [list(e.utt.transcript) for e in examples]


def test_oracle_cascade_is_perfect(tmp_path):
    from waco.corpus import generate_corpus, load_manifest
    from conftest import small_spec

    generate_corpus(small_spec(noise_sigma=0.0), tmp_path)
    test = load_manifest(tmp_path / "st_test.tsv")
    vocab = train_bpe([u.transcript for u in test] + [u.translation for u in test], 80)
    exs = prepare(test, vocab, with_spans=False)
    mt = DictionaryTranslator(load_lexicon(tmp_path / "lexicon.tsv"), swap_adjacent=True)
    assert cascade_eval(OracleASR(), mt, exs) == pytest.approx(100.0)
    assert cascade_eval(OracleASR(), mt, exs) == cascade_eval(OracleASR(), mt, exs)


def test_cascade_with_models_is_deterministic(small_corpus):
    from waco.eval import ModelTranscriber, ModelTranslator

    _, _, splits = small_corpus
    texts = [u.transcript for u in splits["mt_train"]] + [u.translation for u in splits["mt_train"]]
    vocab = train_bpe(texts, 70)
    torch.manual_seed(0)
    model = WacoModel(ModelConfig(feat_dim=8, d_model=16, n_heads=2, ffn_dim=24, vocab_size=vocab.n_text)).eval()
    exs = prepare(splits["st_test"], vocab, model.enc_length, with_spans=False)
    cfg = DecodeConfig(beam_size=2, max_len=6)
    a = cascade_eval(ModelTranscriber(model, vocab, cfg), ModelTranslator(model, vocab, cfg), exs)
    b = cascade_eval(ModelTranscriber(model, vocab, cfg), ModelTranslator(model, vocab, cfg), exs)
    assert a == b and 0 <= a <= 100
