import json
from dataclasses import replace

import numpy as np
import pytest

from stickersel.corpus import (TRAIN_EMOTION_COVERAGE, ConfigError, CorpusFormatError, GeneratorConfig,
                               ReferentialIntegrityError, check_invariants, generate_corpus, generate_dialogue,
                               generate_stickers, load_corpus, make_lexicon, oracle_accuracy, save_corpus)
from stickersel.rng import Rng


def test_default_inventory_size_and_labels(default_corpus):
    assert len(default_corpus.stickers) == 307
    assert sum(s.semantic_label is not None for s in default_corpus.stickers) == 228


def test_default_split_sizes_and_invariants(default_corpus):
    c = default_corpus
    assert [len(c.train), len(c.valid), len(c.easy_test), len(c.hard_test)] == [4000, 400, 400, 400]
    check_invariants(c)


def test_train_emotion_coverage(default_corpus):
    covered = np.mean([s.emotion_id is not None for s in default_corpus.train])
    assert abs(covered - TRAIN_EMOTION_COVERAGE) < 0.01
    assert all(s.emotion_id is None for s in default_corpus.easy_test + default_corpus.hard_test)


def test_every_emotion_has_a_sticker(default_corpus):
    covered = set().union(*(s.compatible_emotions for s in default_corpus.stickers))
    assert covered == set(range(52))


def test_topic_and_emotion_identify_the_sticker(default_corpus):
    owners = {}
    for s in default_corpus.stickers:
        for e in s.compatible_emotions:
            assert (s.latent_topic, e) not in owners
            owners[(s.latent_topic, e)] = s.id


def test_generator_signal_is_recoverable(default_corpus):
    cfg = default_corpus.config
    assert oracle_accuracy(default_corpus.hard_test, default_corpus.stickers, cfg) > 0.9


def test_single_sticker_config():
    cfg = GeneratorConfig(n_stickers=1, labeled_fraction=1.0, n_emotions=1, n_families=1, n_topics=1)
    stickers = generate_stickers(cfg, Rng(0))
    assert len(stickers) == 1 and stickers[0].semantic_label is not None
    assert stickers[0].compatible_emotions
    rng = Rng(1)
    assert {generate_dialogue(cfg, stickers, rng).sticker_id for _ in range(20)} == {stickers[0].id}


def test_fewer_stickers_than_emotions_is_rejected():
    with pytest.raises(ConfigError):
        GeneratorConfig(n_stickers=10).validate()


def test_unknown_config_key():
    with pytest.raises(ConfigError, match="bogus"):
        GeneratorConfig.from_dict({"bogus": 1})


def test_images_deterministic_given_seed():
    cfg = GeneratorConfig(n_train=10, n_valid=2, n_easy=2, n_hard=2)
    a = generate_stickers(cfg, Rng(3))
    b = generate_stickers(cfg, Rng(3))
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    assert all(0.0 <= x.image.min() and x.image.max() <= 1.0 for x in a)


def test_hard_reserve_on_ten_stickers():
    cfg = GeneratorConfig(n_stickers=10, n_emotions=5, n_families=5, n_topics=2, n_train=200,
                          n_valid=10, n_easy=10, n_hard=10)
    c = generate_corpus(cfg)
    hard = {s.sticker_id for s in c.hard_test}
    assert len(hard) == 1
    assert hard.isdisjoint(c.train_sticker_ids())
    check_invariants(c)


def test_mean_utterances_over_10k_dialogues(default_corpus):
    cfg = default_corpus.config
    rng = Rng(99)
    lexicon = make_lexicon(cfg)
    counts = [len(generate_dialogue(cfg, default_corpus.stickers, rng, lexicon=lexicon).utterances)
              for _ in range(10_000)]
    assert abs(np.mean(counts) - 7.9) <= 0.2
    assert min(counts) >= 2 and max(counts) <= 16


def test_emotion_always_compatible(small_corpus):
    stickers = small_corpus.sticker_map()
    for s in small_corpus.train:
        if s.emotion_id is not None:
            assert s.emotion_id in stickers[s.sticker_id].compatible_emotions


def test_speakers_alternate_and_last_speaker_owns_sticker(small_corpus):
    for s in small_corpus.train[:100]:
        assert all(a != b for a, b in zip(s.speaker_ids, s.speaker_ids[1:]))


def test_save_load_round_trip(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    loaded = load_corpus(tmp_path)
    assert loaded.stickers == small_corpus.stickers
    for name in ("train", "valid", "easy_test", "hard_test"):
        assert loaded.split(name) == small_corpus.split(name)
    assert loaded.config == small_corpus.config


def test_same_seed_same_bytes(tmp_path):
    cfg = GeneratorConfig(n_train=50, n_valid=5, n_easy=5, n_hard=5, seed=4)
    save_corpus(generate_corpus(cfg), tmp_path / "a")
    save_corpus(generate_corpus(cfg), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    save_corpus(generate_corpus(replace(cfg, seed=5)), tmp_path / "c")
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != (tmp_path / "c" / "train.jsonl").read_bytes()


def test_malformed_line_reports_line_number(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    path = tmp_path / "valid.jsonl"
    lines = path.read_text().splitlines()
    lines[2] = '{"id": 1, "utterances": '
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError, match="valid.jsonl:3"):
        load_corpus(tmp_path)


def test_dangling_sticker_reference(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    path = tmp_path / "easy_test.jsonl"
    lines = path.read_text().splitlines()
    obj = json.loads(lines[0])
    obj["sticker_id"] = 10_000
    lines[0] = json.dumps(obj)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReferentialIntegrityError, match="10000"):
        load_corpus(tmp_path)
