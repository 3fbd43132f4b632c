import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from waco.alignment import Skip, WordSpan
from waco.losses import (
    ContrastiveConfig,
    NoAlignablePairs,
    PooledPairs,
    ce_label_smooth,
    cosine,
    ctc_loss,
    loss_ft,
    loss_pt,
    nce_from_pairs,
    pool_pairs,
    pool_word,
    sent_ctr,
    waco_ctr,
)

from conftest import finite_diff_check

# Frozen from an independent direct evaluation in plain floats.
ORTHONORMAL_TWO_PAIR = 0.006715348489118068


def pairs(fs, ft, words=None):
    fs, ft = torch.as_tensor(fs, dtype=torch.float64), torch.as_tensor(ft, dtype=torch.float64)
    words = words or [f"w{i}" for i in range(len(fs))]
    return PooledPairs(fs, ft, words, ["u"] * len(fs))


# -- pooling and cosine ------------------------------------------------------------

def test_pool_constant_rows():
    seq = torch.full((5, 3), 2.0)
    assert torch.equal(pool_word(seq, (2, 4), "mean"), torch.full((3,), 2.0))
    assert torch.equal(pool_word(seq, (2, 4), "max"), torch.full((3,), 2.0))
    assert torch.equal(pool_word(seq, (2, 4), "sum"), torch.full((3,), 6.0))


def test_pool_mean_example_and_errors():
    seq = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert torch.equal(pool_word(seq, (1, 2)), torch.tensor([0.5, 0.5]))
    for bad in [(2, 1), (0, 1), (1, 3)]:
        with pytest.raises(ValueError):
            pool_word(seq, bad)


def test_mean_pool_gradient_spreads_evenly():
    seq = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    up = torch.randn(4, dtype=torch.float64)
    err = finite_diff_check(lambda: pool_word(seq, (2, 5)) @ up, [seq], n_coords=24)
    assert err < 1e-6
    seq.grad = None
    (pool_word(seq, (2, 5)) @ up).backward()
    assert torch.allclose(seq.grad[1:5], up.expand(4, 4) / 4)
    assert seq.grad[[0, 5]].abs().sum() == 0


def test_vectorised_pooling_matches_per_span():
    torch.manual_seed(0)
    speech, text = torch.randn(2, 7, 4), torch.randn(2, 5, 4)
    spans = [[WordSpan("a", (1, 2), (1, 4), (1, 3)), WordSpan("b", (3, 5), (5, 9), (4, 7))],
             Skip("x"),
             ]
    speech, text = torch.cat([speech, speech[:1]]), torch.cat([text, text[:1]])
    spans.append([WordSpan("c", (2, 2), (1, 2), (2, 2))])
    for pooling in ("mean", "max", "sum"):
        got = pool_pairs(speech, text, spans, ["u0", "u1", "u2"], pooling)
        expect_s = [pool_word(speech[0], (1, 3), pooling), pool_word(speech[0], (4, 7), pooling),
                    pool_word(speech[2], (2, 2), pooling)]
        assert torch.allclose(got.f_s, torch.stack(expect_s))
        assert torch.allclose(got.f_t[1], pool_word(text[0], (3, 5), pooling))
        assert got.words == ["a", "b", "c"] and got.utterance_ids == ["u0", "u0", "u2"]
    assert pool_pairs(speech, text, [Skip("a"), Skip("b"), Skip("c")], ["a", "b", "c"]) is None


def test_cosine_properties():
    a, b = torch.tensor([1.0, 2.0, 3.0]), torch.tensor([-1.0, 0.5, 2.0])
    assert cosine(a, a).item() == pytest.approx(1.0)
    assert cosine(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 4.0])).item() == 0.0
    assert cosine(3 * a, b).item() == pytest.approx(cosine(a, b).item())
    with pytest.raises(ValueError):
        cosine(torch.zeros(3), a)


# -- contrastive ------------------------------------------------------------------

def test_single_pair_loss_is_zero():
    loss = waco_ctr(pairs([[1.0, 2.0]], [[-3.0, 1.0]]), ContrastiveConfig())
    assert loss.item() == 0.0


def test_orthonormal_two_pairs():
    e = np.eye(2)
    loss = waco_ctr(pairs(e, e), ContrastiveConfig(tau=0.2))
    assert loss.item() == pytest.approx(ORTHONORMAL_TWO_PAIR, abs=1e-12)


def test_sent_ctr_orthonormal_and_single():
    e = torch.eye(2, dtype=torch.float64)
    assert sent_ctr(e, e, ContrastiveConfig()).item() == pytest.approx(ORTHONORMAL_TWO_PAIR, abs=1e-12)
    assert sent_ctr(e[:1], e[1:], ContrastiveConfig()).item() == 0.0


def test_tau_monotone_on_orthonormal_case():
    e = np.eye(2)
    taus = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0]
    vals = [waco_ctr(pairs(e, e), ContrastiveConfig(tau=t)).item() for t in taus]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    for t, v in zip(taus, vals):
        assert v == pytest.approx(math.log1p(math.exp(-1 / t)), rel=1e-9)


def test_scale_and_permutation_invariance():
    rng = np.random.default_rng(0)
    fs, ft = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    cfg = ContrastiveConfig()
    base = waco_ctr(pairs(fs, ft), cfg).item()
    fs2 = fs.copy()
    fs2[2] *= 7.5
    ft2 = ft.copy()
    ft2[0] *= 0.01
    assert waco_ctr(pairs(fs2, ft2), cfg).item() == pytest.approx(base, rel=1e-12)
    perm = rng.permutation(5)
    assert waco_ctr(pairs(fs[perm], ft[perm]), cfg).item() == pytest.approx(base, rel=1e-12)
    assert base >= 0


def test_loss_drops_when_negative_moves_away():
    fs = np.array([[1.0, 0.0], [0.0, 1.0]])
    near = np.array([[1.0, 0.0], [0.7, 0.7]])
    far = np.array([[1.0, 0.0], [0.0, 1.0]])
    cfg = ContrastiveConfig()
    assert waco_ctr(pairs(fs, far), cfg).item() < waco_ctr(pairs(fs, near), cfg).item()


def test_dedup_negatives_removes_same_word():
    fs = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]])
    p = pairs(fs, fs, ["a", "a", "b"])
    plain = waco_ctr(p, ContrastiveConfig()).item()
    dedup = waco_ctr(p, ContrastiveConfig(dedup_negatives=True)).item()
    assert dedup < plain
    alone = waco_ctr(pairs(fs[[0, 2]], fs[[0, 2]]), ContrastiveConfig()).item()
    row0 = nce_from_pairs(p.f_s, p.f_t, 0.2, torch.tensor([[1, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=torch.bool))
    assert dedup == pytest.approx(row0.item())
    assert alone > 0


def test_contrastive_errors():
    with pytest.raises(ValueError):
        waco_ctr(pairs(np.zeros((0, 2)), np.zeros((0, 2))), ContrastiveConfig())
    with pytest.raises(ValueError):
        ContrastiveConfig(tau=0).validate()
    with pytest.raises(ValueError):
        nce_from_pairs(torch.eye(2), torch.eye(2), 0.0)


def test_contrastive_gradient():
    fs = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    ft = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    err = finite_diff_check(lambda: nce_from_pairs(fs, ft, 0.2), [fs, ft], n_coords=10)
    assert err < 1e-4


# -- CTC --------------------------------------------------------------------------

def brute_force_ctc(logp: np.ndarray, target, blank: int) -> float:
    """-log sum over every frame labelling that collapses to ``target``."""
    T, C = logp.shape
    total = -math.inf
    for path in itertools.product(range(C), repeat=T):
        collapsed = [k for i, k in enumerate(path) if k != blank and (i == 0 or path[i - 1] != k)]
        if collapsed == list(target):
            total = np.logaddexp(total, sum(logp[t, k] for t, k in enumerate(path)))
    return -total


def uniform(T, C):
    return torch.full((1, T, C), -math.log(C), dtype=torch.float64)


def test_ctc_single_frame_uniform():
    loss = ctc_loss(uniform(1, 3), torch.tensor([1]), [[0]], blank=2, reduction="sum")
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


def test_ctc_two_frames_uniform():
    loss = ctc_loss(uniform(2, 3), torch.tensor([2]), [[0]], blank=2, reduction="sum")
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


def test_ctc_matches_brute_force_exhaustively():
    rng = np.random.default_rng(0)
    checked = 0
    for C in (2, 3, 4):
        blank = C - 1
        for T in range(1, 7):
            for L in range(0, 4):
                for target in itertools.product(range(C - 1), repeat=L):
                    reps = sum(a == b for a, b in zip(target, target[1:]))
                    if L + reps > T:
                        continue
                    if C ** T > 5000 and rng.random() > 0.3:
                        continue
                    logits = rng.standard_normal((T, C))
                    logp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
                    got = ctc_loss(torch.from_numpy(logp)[None], torch.tensor([T]), [list(target)],
                                   blank=blank, reduction="sum").item()
                    assert got == pytest.approx(brute_force_ctc(logp, target, blank), abs=1e-9)
                    checked += 1
    assert checked > 100


def test_ctc_batched_with_padding_matches_single():
    rng = np.random.default_rng(1)
    logp = torch.log_softmax(torch.from_numpy(rng.standard_normal((2, 6, 4))), -1)
    targets = [[0, 1, 1], [2]]
    lens = torch.tensor([6, 3])
    both = ctc_loss(logp, lens, targets, blank=3, reduction="none")
    for b in range(2):
        one = ctc_loss(logp[b:b + 1, : lens[b]], lens[b:b + 1], [targets[b]], blank=3, reduction="none")
        assert both[b].item() == pytest.approx(one.item(), abs=1e-12)
    mean = ctc_loss(logp, lens, targets, blank=3)
    assert mean.item() == pytest.approx((both[0] / 3 + both[1] / 1).item() / 2, abs=1e-12)


def test_ctc_too_long_target():
    with pytest.raises(ValueError):
        ctc_loss(uniform(2, 3), torch.tensor([2]), [[0, 0]], blank=2)


def test_ctc_gradient():
    logits = torch.randn(1, 5, 4, dtype=torch.float64, requires_grad=True)
    fn = lambda: ctc_loss(torch.log_softmax(logits, -1), torch.tensor([5]), [[0, 2, 2]], blank=3)
    assert finite_diff_check(fn, [logits], n_coords=12) < 1e-4


# -- cross-entropy -----------------------------------------------------------------

def test_ce_uniform_is_log_v():
    for eps in (0.0, 0.1, 0.5):
        loss = ce_label_smooth(torch.zeros(2, 3, 4), torch.tensor([[1, 2, 0], [3, 0, 0]]), eps, pad_id=0)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_ce_eps_zero_is_nll_and_pad_excluded():
    torch.manual_seed(0)
    logits = torch.randn(2, 4, 6)
    tgt = torch.tensor([[3, 1, 2, 0], [5, 4, 0, 0]])
    mask = tgt != 0
    nll = F.cross_entropy(logits[mask], tgt[mask])
    assert ce_label_smooth(logits, tgt, 0.0, 0).item() == pytest.approx(nll.item(), abs=1e-6)


def test_ce_smoothing_formula():
    torch.manual_seed(1)
    logits = torch.randn(1, 3, 5, dtype=torch.float64)
    tgt = torch.tensor([[1, 2, 4]])
    logp = torch.log_softmax(logits, -1)[0]
    q = torch.full((3, 5), 0.1 / 5, dtype=torch.float64)
    q[torch.arange(3), tgt[0]] += 0.9
    expect = -(q * logp).sum(-1).mean()
    assert ce_label_smooth(logits, tgt, 0.1, pad_id=0).item() == pytest.approx(expect.item(), abs=1e-12)


def test_ce_errors_and_gradient():
    with pytest.raises(ValueError):
        ce_label_smooth(torch.zeros(1, 2, 4), torch.zeros(1, 2, dtype=torch.long), 0.1, pad_id=0)
    with pytest.raises(ValueError):
        ce_label_smooth(torch.zeros(1, 2, 4), torch.ones(1, 2, dtype=torch.long), 1.0, pad_id=0)
    logits = torch.randn(1, 4, 6, dtype=torch.float64, requires_grad=True)
    tgt = torch.tensor([[1, 5, 2, 3]])
    assert finite_diff_check(lambda: ce_label_smooth(logits, tgt, 0.1, 0), [logits], n_coords=12) < 1e-4


# -- composite objectives ------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_setup(small_corpus):
    from waco.corpus import train_bpe
    from waco.data import collate, prepare
    from waco.model import ModelConfig, WacoModel

    _, _, splits = small_corpus
    texts = [u.transcript for u in splits["mt_train"]] + [u.translation for u in splits["mt_train"]]
    vocab = train_bpe(texts, 70)
    torch.manual_seed(0)
    model = WacoModel(ModelConfig(feat_dim=8, d_model=16, n_heads=2, ffn_dim=24, vocab_size=vocab.n_text,
                                  dropout=0.0)).eval()
    asr = prepare(splits["asr_train"][:6], vocab, model.enc_length)
    st = prepare(splits["st_train"][:4], vocab, model.enc_length)
    return vocab, model, asr, st, collate


def test_loss_pt_all_skipped(tiny_setup):
    vocab, model, asr, _, collate = tiny_setup
    batch = collate(asr, vocab)
    batch.spans = [Skip("x")] * len(batch)
    with pytest.raises(NoAlignablePairs, match="no alignable pairs"):
        loss_pt(model, batch, ContrastiveConfig(), "waco")


def test_loss_pt_never_reads_translations(tiny_setup):
    vocab, model, asr, _, collate = tiny_setup
    batch = collate(asr, vocab, with_translation=False)
    assert batch.st_in is None
    for method in ("waco", "const", "ctc"):
        loss, terms = loss_pt(model, batch, ContrastiveConfig(), method)
        assert torch.isfinite(loss) and loss.item() >= 0


def test_loss_pt_waco_equals_manual_pooling(tiny_setup):
    vocab, model, asr, _, collate = tiny_setup
    batch = collate(asr, vocab)
    loss, _ = loss_pt(model, batch, ContrastiveConfig(), "waco")
    speech, _ = model.s_enc(batch.feats, batch.n_frames)
    text = model.t_emb(batch.src)
    fs, ft = [], []
    for b, spans in enumerate(batch.spans):
        for s in spans or []:
            fs.append(pool_word(speech[b], s.enc_frame_range))
            ft.append(pool_word(text[b], s.token_range))
    manual = nce_from_pairs(torch.stack(fs), torch.stack(ft), 0.2)
    assert loss.item() == pytest.approx(manual.item(), rel=1e-5)


def test_loss_ft_lambda_zero_skips_spans(tiny_setup):
    vocab, model, _, st, collate = tiny_setup
    batch = collate(st, vocab)
    batch.spans = None  # any attempt to read spans would fail
    total, terms = loss_ft(model, batch, 0.0, 0.1, ContrastiveConfig(), vocab.pad_id)
    assert set(terms) == {"st", "mt", "asr"}
    assert abs(total.item() - sum(terms.values())) < 1e-5


def test_loss_ft_breakdown_and_single_pair(tiny_setup):
    vocab, model, _, st, collate = tiny_setup
    batch = collate(st, vocab)
    total, terms = loss_ft(model, batch, 1.0, 0.1, ContrastiveConfig(), vocab.pad_id)
    assert set(terms) == {"st", "mt", "asr", "ctr"}
    assert abs(total.item() - sum(terms.values())) < 1e-5
    one = collate(st[:1], vocab)
    first = one.spans[0][:1]
    one.spans = [first]
    total1, terms1 = loss_ft(model, one, 1.0, 0.1, ContrastiveConfig(), vocab.pad_id)
    assert terms1["ctr"] == 0.0
    assert abs(total1.item() - (terms1["st"] + terms1["mt"] + terms1["asr"])) < 1e-5


def test_loss_ft_requires_translation(tiny_setup):
    vocab, model, asr, _, collate = tiny_setup
    with pytest.raises(ValueError):
        loss_ft(model, collate(asr, vocab), 0.0, 0.1, ContrastiveConfig(), vocab.pad_id)
