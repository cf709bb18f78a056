import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import log_softmax

from stickersel import autodiff as ad
from stickersel.corpus import DialogueSample
from stickersel.model import forward, init_params
from stickersel.rng import Rng
from stickersel.training import (LOSS_LOG_HEADER, AdamWState, LossWeights, MaskingPolicy, NumericError, PairBuilder,
                                 SamplingError, StepSchedule, TrainConfig, TrainingBatch, adamw_step,
                                 apply_mlm_mask, apply_variant, compute_losses, grad_check_batch, learning_rate,
                                 loss_log_csv, read_loss_log, sample_negative, train)
from stickersel.vocab import MASK, PAD, encode


def _sample(gt):
    return DialogueSample(id=0, utterances=["a"], speaker_ids=[0], sticker_id=gt)


def test_negative_from_two_sticker_inventory():
    rng = Rng(0)
    assert {sample_negative(_sample(0), [0, 1], rng) for _ in range(50)} == {1}
    with pytest.raises(SamplingError):
        sample_negative(_sample(0), [0], rng)


def test_negative_frequencies():
    rng = Rng(1)
    draws = np.array([sample_negative(_sample(2), range(5), rng) for _ in range(10_000)])
    for s in (0, 1, 3, 4):
        assert abs(np.mean(draws == s) - 0.25) <= 0.02


def test_negative_never_ground_truth():
    rng = Rng(2)
    pool = list(range(7))
    assert all(sample_negative(_sample(3), pool, rng) != 3 for _ in range(100_000))


@pytest.fixture
def encoded(small_corpus, small_vocab, tiny_model_cfg):
    s = small_corpus.train[0]
    return encode(s.utterances, None, tiny_model_cfg.semantic_slot_len, tiny_model_cfg.max_len, small_vocab)


def test_mask_everything(encoded, small_vocab):
    ids, targets = apply_mlm_mask(encoded, MaskingPolicy(1.0, 1.0, 0.0, 0.0), len(small_vocab), Rng(0))
    assert sorted(targets) == list(encoded.context_positions)
    assert all(ids[p] == MASK for p in encoded.context_positions)
    assert all(targets[p] == encoded.ids[p] for p in targets)
    untouched = set(range(len(ids))) - set(encoded.context_positions)
    assert all(ids[p] == encoded.ids[p] for p in untouched)


def test_mask_nothing(encoded, small_vocab):
    ids, targets = apply_mlm_mask(encoded, MaskingPolicy(mask_rate=0.0), len(small_vocab), Rng(0))
    assert ids == encoded.ids and targets == {}


def test_masking_policy_validation():
    with pytest.raises(ValueError):
        MaskingPolicy(replace_prob=0.5).validate()
    with pytest.raises(ValueError):
        MaskingPolicy(mask_rate=1.5).validate()


def test_variants():
    w, cfg = apply_variant("base", LossWeights(), TrainConfig())
    assert (w.alpha, w.beta, w.gamma) == (0, 0, 0) and not cfg.semantic_region and not cfg.auxiliary
    w, cfg = apply_variant("ctx", LossWeights(), TrainConfig())
    assert (w.alpha, w.beta, w.gamma) == (0.05, 0, 0)
    w, cfg = apply_variant("ctx-emo", LossWeights(), TrainConfig())
    assert (w.alpha, w.beta, w.gamma) == (0.05, 0.2, 0)
    w, cfg = apply_variant("full", LossWeights(), TrainConfig())
    assert (w.alpha, w.beta, w.gamma) == (0.05, 0.2, 0.1) and cfg.ocr_as_input and cfg.semantic_region
    _, cfg = apply_variant("full-minus-ocr", LossWeights(), TrainConfig())
    assert not cfg.ocr_as_input and cfg.semantic_region
    with pytest.raises(ValueError):
        apply_variant("bogus", LossWeights(), TrainConfig())


def test_presets():
    assert LossWeights.from_dict({"preset": "paper"}) == LossWeights(0.05, 0.2, 0.1)
    assert TrainConfig.from_dict({"preset": "paper-finetune"}).learning_rate == 9e-6
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"batch_size": 1})
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def _batch(corpus, vocab, model_cfg, cfg=None, n=4, seed=0):
    cfg = cfg or TrainConfig()
    builder = PairBuilder(corpus, vocab, model_cfg, cfg, MaskingPolicy())
    pool = corpus.train_sticker_ids()
    pairs = []
    for s in corpus.train[:n]:
        pairs.extend(builder.build(s, pool, Rng(seed).fork(s.id)))
    return TrainingBatch(pairs)


def test_batch_structure(small_corpus, small_vocab, tiny_model_cfg):
    batch = _batch(small_corpus, small_vocab, tiny_model_cfg, n=20)
    pos = [p for p in batch.pairs if p.label == 1]
    neg = [p for p in batch.pairs if p.label == 0]
    assert len(pos) == len(neg)
    for p, q in zip(pos, neg):
        assert p.sample_id == q.sample_id and p.sticker_id != q.sticker_id
        assert q.emotion is None and q.semantic is None and not q.mlm_targets


def test_semantic_mode_policy(small_corpus, small_vocab, tiny_model_cfg):
    stickers = small_corpus.sticker_map()
    labeled = [s for s in small_corpus.train if stickers[s.sticker_id].semantic_label is not None][:200]
    builder = PairBuilder(small_corpus, small_vocab, tiny_model_cfg, TrainConfig(), MaskingPolicy())
    modes = []
    for s in labeled:
        p = builder.build(s, small_corpus.train_sticker_ids(), Rng(5).fork(s.id))[0]
        span = p.encoded.semantic_span
        modes.append(p.encoded.ids[span.start] == MASK)
        assert (p.semantic is not None) == modes[-1]
    assert 0.35 < np.mean(modes) < 0.65
    no_ocr = PairBuilder(small_corpus, small_vocab, tiny_model_cfg, TrainConfig(ocr_as_input=False), MaskingPolicy())
    p = no_ocr.build(labeled[0], small_corpus.train_sticker_ids(), Rng(5))[0]
    assert p.encoded.ids[p.encoded.semantic_span.start] == MASK
    base = PairBuilder(small_corpus, small_vocab, tiny_model_cfg, TrainConfig(semantic_region=False),
                       MaskingPolicy())
    p = base.build(labeled[0], small_corpus.train_sticker_ids(), Rng(5))[0]
    assert all(p.encoded.ids[i] == PAD for i in p.encoded.semantic_span)


def test_zero_weights_total_equals_main(small_corpus, small_vocab, tiny_model_cfg):
    batch = _batch(small_corpus, small_vocab, tiny_model_cfg)
    params = init_params(tiny_model_cfg, Rng(0))
    terms = compute_losses(batch, params, tiny_model_cfg, LossWeights(0, 0, 0))
    assert terms.total.item() == terms.main.item()


def test_no_labels_means_zero_semantic_loss(small_corpus, small_vocab, tiny_model_cfg):
    batch = _batch(small_corpus, small_vocab, tiny_model_cfg, TrainConfig(semantic_region=False))
    params = init_params(tiny_model_cfg, Rng(0))
    assert compute_losses(batch, params, tiny_model_cfg, LossWeights()).sem.item() == 0.0


def test_losses_match_direct_formula(small_corpus, small_vocab, tiny_model_cfg):
    """Loss assembly checked against scipy log-softmax on the model's own logits."""
    with ad.precision("float64"):
        batch = grad_check_batch(small_corpus, small_vocab, tiny_model_cfg, MaskingPolicy(), n_dialogues=1)
        params = init_params(tiny_model_cfg, Rng(4))
        rng = Rng(8)
        for p in params.values():
            p.data += rng.normal(p.shape, 0.0, 0.1)
        w = LossWeights(0.3, 0.7, 1.3)
        terms = compute_losses(batch, params, tiny_model_cfg, w).values()

        out = forward(batch.main_inputs(), params, tiny_model_cfg)
        main = -np.mean(log_softmax(out.main_logits.data, -1)[[0, 1], batch.labels])
        pos = batch.pairs[0]
        emo = -log_softmax(out.emotion_logits.data[0])[pos.emotion]
        sem_logits = out.semantic_logits([0]).data[0]
        slots = [i for i, t in enumerate(pos.semantic) if t != PAD]
        sem = -np.mean([log_softmax(sem_logits[i])[pos.semantic[i]] for i in slots])
        mlm_inputs = replace(pos.encoded, ids=pos.mlm_ids)
        from stickersel.model import collate
        mlm_out = forward(collate([mlm_inputs], [pos.image]), params, tiny_model_cfg)
        positions = sorted(pos.mlm_targets)
        ctx_logits = mlm_out.mlm_logits([0] * len(positions), positions).data
        ctx = -np.mean([log_softmax(ctx_logits[i])[pos.mlm_targets[p]] for i, p in enumerate(positions)])
    assert terms["main"] == pytest.approx(main, abs=1e-10)
    assert terms["emo"] == pytest.approx(emo, abs=1e-10)
    assert terms["sem"] == pytest.approx(sem, abs=1e-10)
    assert terms["ctx"] == pytest.approx(ctx, abs=1e-10)
    assert terms["total"] == pytest.approx(main + 0.3 * ctx + 0.7 * emo + 1.3 * sem, abs=1e-10)


def test_auxiliary_losses_ignore_negative_pairs(small_corpus, small_vocab, tiny_model_cfg):
    with ad.precision("float64"):
        batch = _batch(small_corpus, small_vocab, tiny_model_cfg)
        other = _batch(small_corpus, small_vocab, tiny_model_cfg, seed=99)
        swapped = TrainingBatch([p if p.label == 1 else q for p, q in zip(batch.pairs, other.pairs)])
        params = init_params(tiny_model_cfg, Rng(0))
        a = compute_losses(batch, params, tiny_model_cfg, LossWeights()).values()
        b = compute_losses(swapped, params, tiny_model_cfg, LossWeights()).values()
    for k in ("ctx", "emo", "sem"):
        assert a[k] == pytest.approx(b[k], abs=1e-10)


def test_non_finite_loss_names_term(small_corpus, small_vocab, tiny_model_cfg):
    batch = _batch(small_corpus, small_vocab, tiny_model_cfg)
    params = init_params(tiny_model_cfg, Rng(0))
    params["head.emotion.bias"].data[:] = np.nan
    with pytest.raises(NumericError, match="emo"):
        compute_losses(batch, params, tiny_model_cfg, LossWeights())


def test_learning_rate_schedule():
    cfg = TrainConfig(total_steps=100, warmup_fraction=0.1, learning_rate=1.0)
    assert learning_rate(5, cfg) == pytest.approx(0.5)
    assert learning_rate(10, cfg) == pytest.approx(1.0)
    assert learning_rate(55, cfg) == pytest.approx(0.5)
    assert learning_rate(100, cfg) == pytest.approx(0.0, abs=1e-12)
    lrs = [learning_rate(s, cfg) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_zero_gradient_no_decay_is_identity():
    p = {"w": ad.Tensor(np.ones((2, 2)), requires_grad=True)}
    state = AdamWState()
    adamw_step(p, {"w": np.zeros((2, 2))}, state, 0.1, TrainConfig(weight_decay=0.0), {"w"})
    assert np.array_equal(p["w"].data, np.ones((2, 2)))


def test_adamw_matches_reference_trajectory():
    cfg = TrainConfig(beta1=0.9, beta2=0.999, adam_eps=1e-8, weight_decay=0.01)
    grads = [0.5, -0.2, 0.1, 0.4, -0.3]
    lrs = [0.1, 0.08, 0.05, 0.03, 0.01]
    with ad.precision("float64"):
        p = {"w": ad.Tensor(np.array([1.5]), requires_grad=True)}
        state = AdamWState()
        for g, lr in zip(grads, lrs):
            adamw_step(p, {"w": np.array([g])}, state, lr, cfg, {"w"})
        got = float(p["w"].data[0])
    w, m, v = 1.5, 0.0, 0.0
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        w = w - lr * 0.01 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert got == pytest.approx(w, abs=1e-10)


def test_schedule_covers_each_epoch_once():
    sched = StepSchedule(10, 4, Rng(0))
    seen = [idx for step in range(1, 6) for _, idx in sched.step(step)]
    assert sorted(seen[:10]) == list(range(10))
    assert sorted(seen[10:20]) == list(range(10))


def _run(corpus, vocab, model_cfg, variant="full", steps=12, **kw):
    w, cfg = apply_variant(variant, LossWeights(), TrainConfig(total_steps=steps, **kw))
    return train(corpus, vocab, model_cfg, cfg, w, MaskingPolicy())


def test_same_seed_identical_logs(small_corpus, small_vocab, tiny_model_cfg):
    a = _run(small_corpus, small_vocab, tiny_model_cfg)
    b = _run(small_corpus, small_vocab, tiny_model_cfg)
    assert loss_log_csv(a.loss_log) == loss_log_csv(b.loss_log)
    c = _run(small_corpus, small_vocab, tiny_model_cfg, seed=1)
    assert loss_log_csv(a.loss_log) != loss_log_csv(c.loss_log)


def test_zero_weights_and_defaults_share_schema(small_corpus, small_vocab, tiny_model_cfg, tmp_path):
    cfg = TrainConfig(total_steps=4)
    for name, w in (("zero", LossWeights(0, 0, 0)), ("default", LossWeights())):
        train(small_corpus, small_vocab, tiny_model_cfg, cfg, w, MaskingPolicy(), out_dir=tmp_path / name)
        header = (tmp_path / name / "loss_log.csv").read_text().splitlines()[0]
        assert header == ",".join(LOSS_LOG_HEADER)
        assert {"checkpoint.stkm", "optimizer.stkm", "run_manifest.json", "loss_log.csv", "vocab.txt"} <= {
            p.name for p in (tmp_path / name).iterdir()}


def test_frozen_image_encoder_unchanged(small_corpus, small_vocab, tiny_model_cfg):
    cfg = replace(tiny_model_cfg, image_encoder_frozen=True)
    before = init_params(cfg, Rng(0).fork("init"))
    result = train(small_corpus, small_vocab, cfg, TrainConfig(total_steps=5), LossWeights(), MaskingPolicy())
    for name in ("image.proj.weight", "image.proj.bias", "image.ln.gain", "image.ln.bias"):
        assert np.array_equal(before[name].data, result.params[name].data)
    assert not np.array_equal(before["head.main.weight"].data, result.params["head.main.weight"].data)


def test_resume_reproduces_uninterrupted_run(small_corpus, small_vocab, tiny_model_cfg, tmp_path):
    cfg = TrainConfig(total_steps=10)
    full = train(small_corpus, small_vocab, tiny_model_cfg, cfg, LossWeights(), MaskingPolicy())
    train(small_corpus, small_vocab, tiny_model_cfg, cfg, LossWeights(), MaskingPolicy(), out_dir=tmp_path,
          stop_after=6)
    resumed = train(small_corpus, small_vocab, tiny_model_cfg, cfg, LossWeights(), MaskingPolicy(),
                    out_dir=tmp_path, resume=True)
    assert loss_log_csv(resumed.loss_log) == loss_log_csv(full.loss_log)
    assert read_loss_log(tmp_path / "loss_log.csv") == [
        {k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in full.loss_log]
    assert all(np.array_equal(full.params[n].data, resumed.params[n].data) for n in full.params)


def test_total_loss_decreases_early(default_corpus):
    from stickersel.model import ModelConfig
    from stickersel.training import corpus_vocab
    vocab = corpus_vocab(default_corpus)
    cfg = ModelConfig(vocab_size=len(vocab))
    result = train(default_corpus, vocab, cfg, TrainConfig(total_steps=200), LossWeights(), MaskingPolicy())
    total = np.array([r["total"] for r in result.loss_log])
    smooth = np.convolve(total, np.ones(50) / 50, mode="valid")
    assert smooth[-1] < smooth[0]
