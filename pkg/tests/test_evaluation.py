import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import betainc as scipy_betainc

from stickersel import autodiff as ad
from stickersel.evaluation import (ContractViolation, EvaluationError, NumericScoreError, betainc,
                                   diversity_csv, diversity_from_rankings, evaluate, metrics_from_ranks,
                                   metrics_json, paired_t_test, prediction_diversity, r10_candidates,
                                   rank_with_ties, rankings_csv, read_rankings, score_candidates, word_saliency)
from stickersel.model import ModelConfig, collate, forward, init_params
from stickersel.rng import Rng
from stickersel.vocab import PAD, encode


@pytest.fixture(scope="module")
def tiny_params(tiny_model_cfg):
    return init_params(tiny_model_cfg, Rng(0))


def test_rank_examples():
    assert rank_with_ties([0.9, 0.1], [0, 1], gt_id=1).rank == 2
    assert rank_with_ties([0.9, 0.1], [0, 1], gt_id=1).reciprocal_rank == 0.5
    assert rank_with_ties([0.3, 0.3, 0.3], [5, 2, 9], gt_id=2).rank == 1
    assert rank_with_ties([0.3, 0.3, 0.3], [5, 2, 9], gt_id=9).rank == 3
    assert rank_with_ties([0.7], [4], gt_id=4).rank == 1


def test_rank_errors():
    with pytest.raises(NumericScoreError):
        rank_with_ties([np.nan, 0.1], [0, 1], gt_id=0)
    with pytest.raises(ContractViolation):
        rank_with_ties([0.1, 0.2], [0, 1], gt_id=3)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.data())
@settings(max_examples=100, deadline=None)
def test_monotone_transform_leaves_rankings_unchanged(raw, data):
    scores = np.array(raw, dtype=float)
    ids = list(data.draw(st.permutations(range(100, 100 + len(raw)))))
    gt = data.draw(st.sampled_from(ids))
    a = rank_with_ties(scores, ids, gt)
    b = rank_with_ties(np.exp(scores) * 3 + 1, ids, gt)
    assert a == b
    assert 1 <= a.rank <= len(ids) and a.reciprocal_rank == 1 / a.rank


def test_metric_examples():
    r = metrics_from_ranks([1, 1, 1], "R10")
    assert r.recall == {1: 1.0, 2: 1.0, 5: 1.0} and r.mrr == 1.0
    r = metrics_from_ranks([1, 2, 4], "R10")
    assert r.recall[1] == pytest.approx(1 / 3) and r.recall[2] == pytest.approx(2 / 3) and r.recall[5] == 1.0
    assert r.mrr == pytest.approx((1 + 0.5 + 0.25) / 3)
    with pytest.raises(EvaluationError):
        metrics_from_ranks([], "R10")


@given(st.lists(st.integers(1, 307), min_size=1, max_size=50))
@settings(max_examples=60, deadline=None)
def test_metric_invariants(ranks):
    r = metrics_from_ranks(ranks, "RALL")
    assert 0 <= r.recall[1] <= r.recall[2] <= r.recall[5] <= 1
    assert 0 < r.mrr <= 1 and r.recall[1] <= r.mrr


def test_r10_candidates(small_corpus):
    inventory = sorted(s.id for s in small_corpus.stickers)
    sample = small_corpus.hard_test[0]
    cands = r10_candidates(sample, inventory, eval_seed=3)
    assert len(set(cands)) == 10 and sample.sticker_id in cands
    assert cands == r10_candidates(sample, inventory, eval_seed=3)
    assert cands != r10_candidates(sample, inventory, eval_seed=4)
    with pytest.raises(EvaluationError):
        r10_candidates(sample, inventory[:5], eval_seed=0)


def test_score_candidates_permutation_equivariant(small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    sample = small_corpus.easy_test[0]
    cands = small_corpus.stickers[:6]
    s = score_candidates(sample, cands, tiny_params, tiny_model_cfg, small_vocab)
    order = [3, 0, 5, 1, 4, 2]
    s2 = score_candidates(sample, [cands[i] for i in order], tiny_params, tiny_model_cfg, small_vocab)
    assert np.allclose(s[order], s2, atol=1e-5)
    with pytest.raises(EvaluationError):
        score_candidates(sample, [], tiny_params, tiny_model_cfg, small_vocab)


def test_untrained_top1_slot_is_uniform(default_corpus):
    from stickersel.training import corpus_vocab
    vocab = corpus_vocab(default_corpus)
    cfg = ModelConfig(vocab_size=len(vocab))
    params = init_params(cfg, Rng(0))
    rng = Rng(12)
    wins = np.zeros(10)
    for trial in range(500):
        sample = default_corpus.valid[rng.integers(len(default_corpus.valid))]
        picks = rng.sample_without_replacement(default_corpus.stickers, 10)
        wins[int(np.argmax(score_candidates(sample, picks, params, cfg, vocab)))] += 1
    assert stats.chisquare(wins).pvalue > 0.01


def test_evaluate_deterministic_and_job_independent(small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    samples = small_corpus.hard_test[:12]
    a = evaluate(samples, small_corpus, tiny_params, tiny_model_cfg, small_vocab, "R10", eval_seed=1)
    b = evaluate(samples, small_corpus, tiny_params, tiny_model_cfg, small_vocab, "R10", eval_seed=1, jobs=3)
    assert metrics_json(a.report, "hard", 1, None) == metrics_json(b.report, "hard", 1, None)
    assert rankings_csv(a.rankings) == rankings_csv(b.rankings)
    assert [r.sample_id for r in a.rankings] == sorted(s.id for s in samples)


def test_with_and_without_text_partition(small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    samples = small_corpus.hard_test[:20]
    rep = evaluate(samples, small_corpus, tiny_params, tiny_model_cfg, small_vocab, "R10").report
    stickers = small_corpus.sticker_map()
    n_text = sum(stickers[s.sticker_id].semantic_label is not None for s in samples)
    assert rep.with_text.n_samples == n_text
    assert rep.without_text.n_samples == len(samples) - n_text
    assert "with_minus_without_mrr" in rep.to_dict()


def test_r10_beats_rall_on_average(small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    samples = (small_corpus.hard_test + small_corpus.easy_test + small_corpus.valid)[:120] + small_corpus.train[:80]
    r10 = evaluate(samples, small_corpus, tiny_params, tiny_model_cfg, small_vocab, "R10").report
    rall = evaluate(samples, small_corpus, tiny_params, tiny_model_cfg, small_vocab, "RALL").report
    assert r10.n_samples >= 200
    assert r10.mrr >= rall.mrr and r10.recall[5] >= rall.recall[5]


def test_empty_split(small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    with pytest.raises(EvaluationError):
        evaluate([], small_corpus, tiny_params, tiny_model_cfg, small_vocab, "RALL")


def test_rankings_csv_round_trip(tmp_path, small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    ev = evaluate(small_corpus.hard_test[:5], small_corpus, tiny_params, tiny_model_cfg, small_vocab, "R10")
    (tmp_path / "r.csv").write_text(rankings_csv(ev.rankings))
    assert read_rankings(tmp_path / "r.csv") == {r.sample_id: r.reciprocal_rank for r in ev.rankings}


# significance


def test_t_test_identical_vectors():
    res = paired_t_test([0.1, 0.5, 1.0], [0.1, 0.5, 1.0])
    assert res.p == 1.0 and res.degenerate


def test_t_test_constant_difference():
    res = paired_t_test([2, 3, 4, 5], [1, 2, 3, 4])
    assert res.p == 0.0 and res.degenerate


def test_t_test_contract():
    with pytest.raises(ContractViolation):
        paired_t_test([1, 2], [1, 2, 3])
    with pytest.raises(ContractViolation):
        paired_t_test([1], [2])


def test_t_test_ten_pair_example():
    # classic before/after blood-pressure style data
    before = [200, 174, 198, 170, 179, 182, 193, 209, 185, 155]
    after = [191, 170, 177, 167, 159, 151, 176, 183, 159, 145]
    d = np.subtract(before, after)
    t_direct = d.mean() / (d.std(ddof=1) / np.sqrt(10))
    p_direct = 2 * stats.t.sf(abs(t_direct), 9)
    res = paired_t_test(before, after)
    assert res.t == pytest.approx(t_direct, abs=1e-6)
    assert res.p == pytest.approx(p_direct, abs=1e-6)


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=40), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_t_test_matches_scipy(a, seed):
    a = np.array(a)
    b = a + Rng(seed).normal(len(a), 0.1, 0.5)
    res = paired_t_test(a, b)
    ref = stats.ttest_rel(a, b)
    assert res.t == pytest.approx(ref.statistic, rel=1e-8, abs=1e-10)
    assert res.p == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-12)


@given(st.floats(0.1, 60), st.floats(0.1, 60), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_betainc_matches_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(float(scipy_betainc(a, b, x)), abs=1e-12)


# saliency and diversity


def test_saliency_nonnegative_and_aligned(small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    stickers = small_corpus.sticker_map()
    for s in small_corpus.valid[:5]:
        m = word_saliency(s, stickers[s.sticker_id], tiny_params, tiny_model_cfg, small_vocab)
        assert np.all(m.scores >= 0)
        assert len(m.scores) == len(m.tokens) == len(m.positions)
        assert " ".join(m.tokens).split() == " ".join(s.utterances).split()[-len(m.tokens):]


def test_padding_rows_get_zero_gradient(small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    s = small_corpus.valid[0]
    sticker = small_corpus.sticker_map()[s.sticker_id]
    enc = encode(s.utterances, None, tiny_model_cfg.semantic_slot_len, tiny_model_cfg.max_len, small_vocab)
    inputs = collate([enc], [sticker.image], pad_to=tiny_model_cfg.max_len)
    out = forward(inputs, tiny_params, tiny_model_cfg, retain_embeddings=True)
    ad.backward(ad.cross_entropy(out.main_logits, [1]))
    pad_rows = np.flatnonzero(inputs.ids[0] == PAD)
    assert pad_rows.size and np.all(out.embedded.grad[0, pad_rows] == 0)


def test_diversity_single_sticker():
    from stickersel.evaluation import RankingResult
    rankings = [RankingResult(i, (7,), 7, 1) for i in range(4)]
    hist = diversity_from_rankings(rankings, [7])
    assert hist.predicted == {7: 4} and hist.ground_truth == {7: 4}


def test_diversity_counts(small_corpus, small_vocab, tiny_model_cfg, tiny_params):
    samples = small_corpus.easy_test[:10]
    hist = prediction_diversity(samples, small_corpus, tiny_params, tiny_model_cfg, small_vocab)
    assert sum(hist.predicted.values()) == sum(hist.ground_truth.values()) == len(samples)
    for sid, count in hist.ground_truth.items():
        assert count == sum(s.sticker_id == sid for s in samples)
    assert len(diversity_csv(hist).splitlines()) == len(small_corpus.stickers) + 1
