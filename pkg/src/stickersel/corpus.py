"""Synthetic dialogue-with-stickers corpus.

World model
-----------
Emotions are grouped into families (``emotion % n_families``).  Every sticker
occupies one (topic, family) cell and is compatible with one to three emotions
of its family, so a (topic, emotion) pair is owned by exactly one sticker.
Dialogues are written around a latent topic and emotion: topic keywords are
sprinkled through every utterance, emotion keywords mostly in the last two.

Sticker images are 16x16 tiles of a 4x4 code patch: topic code bits, family
code bits, a banner pixel that is lit when the sticker carries a text label,
plus per-sticker noise.  Pixels therefore carry the same information as the
text, and a sticker never seen in training can still be matched through it.

Labels (the OCR analogue) are a topic keyword followed by an emotion keyword of
one compatible emotion.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import Rng

FORMAT_VERSION = "1"
SPLITS = ("train", "valid", "easy_test", "hard_test")

# Table-3 emotion coverage on the training split: 209890 of 211575 samples.
TRAIN_EMOTION_COVERAGE = 209890 / 211575
_EMOTION_SET_SIZE_P = (0.4, 0.35, 0.25)
_CODE_BITS = 7


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class CorpusFormatError(ValueError):
    pass


class ReferentialIntegrityError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n_stickers: int = 307
    labeled_fraction: float = 0.743
    n_emotions: int = 52
    n_families: int = 13
    n_topics: int = 24
    n_train: int = 4000
    n_valid: int = 400
    n_easy: int = 400
    n_hard: int = 400
    mean_utterances: float = 7.9
    utterance_sd: float = 2.0
    min_utterances: int = 2
    max_utterances: int = 16
    min_tokens: int = 3
    max_tokens: int = 8
    n_filler: int = 150
    topic_keywords: int = 2
    emotion_keywords: int = 2
    topic_word_rate: float = 0.3
    emotion_word_rate_recent: float = 0.5
    emotion_word_rate: float = 0.1
    distractor_rate: float = 0.0
    hard_fraction: float = 0.1
    zipf_s: float = 1.1
    image_size: int = 16
    patch_size: int = 4
    seed: int = 0

    def validate(self) -> None:
        counts = ("n_stickers", "n_emotions", "n_families", "n_topics", "n_train", "n_valid",
                  "n_easy", "n_hard", "n_filler", "topic_keywords", "emotion_keywords")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ConfigError("labeled_fraction must lie in [0, 1]")
        if self.n_stickers < self.n_emotions:
            raise ConfigError(
                f"n_stickers ({self.n_stickers}) < n_emotions ({self.n_emotions}): "
                "every emotion needs a sticker")
        if self.n_families > self.n_emotions:
            raise ConfigError("n_families cannot exceed n_emotions")
        if self.n_stickers > self.n_topics * self.n_families:
            raise ConfigError("n_stickers exceeds n_topics * n_families cells")
        if not 0.0 <= self.hard_fraction < 1.0:
            raise ConfigError("hard_fraction must lie in [0, 1)")
        if self.n_reserved >= self.n_stickers:
            raise ConfigError("hard-only reserve leaves no training stickers")
        if not 1 <= self.min_utterances <= self.max_utterances:
            raise ConfigError("need 1 <= min_utterances <= max_utterances")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        if self.patch_size * self.patch_size < 2 * _CODE_BITS + 2:
            raise ConfigError("patch too small to hold the sticker code")
        if self.n_topics > 2 ** _CODE_BITS or self.n_families > 2 ** _CODE_BITS:
            raise ConfigError("too many topics/families for the image code")

    @property
    def n_reserved(self) -> int:
        return int(round(self.n_stickers * self.hard_fraction))

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class StickerRecord:
    id: int
    image: np.ndarray
    semantic_label: str | None
    compatible_emotions: tuple[int, ...]
    latent_topic: int

    def __eq__(self, other) -> bool:
        return (isinstance(other, StickerRecord) and self.id == other.id
                and self.semantic_label == other.semantic_label
                and self.compatible_emotions == other.compatible_emotions
                and self.latent_topic == other.latent_topic
                and self.image.shape == other.image.shape
                and bool(np.array_equal(self.image, other.image)))


@dataclass
class DialogueSample:
    id: int
    utterances: list[str]
    speaker_ids: list[int]
    sticker_id: int
    emotion_id: int | None = None


@dataclass
class CorpusSplit:
    stickers: list[StickerRecord]
    train: list[DialogueSample] = field(default_factory=list)
    valid: list[DialogueSample] = field(default_factory=list)
    easy_test: list[DialogueSample] = field(default_factory=list)
    hard_test: list[DialogueSample] = field(default_factory=list)
    config: GeneratorConfig | None = None

    def split(self, name: str) -> list[DialogueSample]:
        aliases = {"easy": "easy_test", "hard": "hard_test"}
        name = aliases.get(name, name)
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def sticker_map(self) -> dict[int, StickerRecord]:
        return {s.id: s for s in self.stickers}

    def train_sticker_ids(self) -> list[int]:
        return sorted({s.sticker_id for s in self.train})


# lexicon


@dataclass(frozen=True)
class Lexicon:
    fillers: tuple[str, ...]
    topic_words: tuple[tuple[str, ...], ...]
    emotion_words: tuple[tuple[str, ...], ...]

    def keyword_index(self) -> tuple[dict[str, int], dict[str, int]]:
        topics = {w: t for t, ws in enumerate(self.topic_words) for w in ws}
        emotions = {w: e for e, ws in enumerate(self.emotion_words) for w in ws}
        return topics, emotions


def make_lexicon(cfg: GeneratorConfig) -> Lexicon:
    letters = "abcdefghijklmnopqrstuvwxyz"
    return Lexicon(
        fillers=tuple(f"w{i:03d}" for i in range(cfg.n_filler)),
        topic_words=tuple(tuple(f"topic{t:02d}{letters[k]}" for k in range(cfg.topic_keywords))
                          for t in range(cfg.n_topics)),
        emotion_words=tuple(tuple(f"emo{e:02d}{letters[k]}" for k in range(cfg.emotion_keywords))
                            for e in range(cfg.n_emotions)),
    )


def emotion_family(emotion: int, cfg: GeneratorConfig) -> int:
    return emotion % cfg.n_families


# stickers


def _distinct_codes(n: int, rng: Rng) -> np.ndarray:
    """``n`` distinct 7-bit codes with pairwise Hamming distance >= 2 when possible."""
    all_codes = np.array([[(c >> b) & 1 for b in range(_CODE_BITS)] for c in range(2 ** _CODE_BITS)])
    order = rng.permutation(len(all_codes))
    chosen: list[np.ndarray] = []
    for min_dist in (2, 1):
        chosen = []
        for idx in order:
            code = all_codes[idx]
            if code.sum() in (0, _CODE_BITS):
                continue
            if all(np.sum(code != c) >= min_dist for c in chosen):
                chosen.append(code)
                if len(chosen) == n:
                    return np.array(chosen)
    raise ConfigError(f"cannot build {n} distinct image codes")


def _render(topic_code: np.ndarray, family_code: np.ndarray, labeled: bool, cfg: GeneratorConfig,
            rng: Rng) -> np.ndarray:
    p = cfg.patch_size
    tile = np.full(p * p, 0.1)
    tile[:_CODE_BITS] = np.where(topic_code == 1, 0.85, 0.1)
    tile[_CODE_BITS:2 * _CODE_BITS] = np.where(family_code == 1, 0.85, 0.1)
    tile[2 * _CODE_BITS] = 0.9 if labeled else 0.1
    reps = cfg.image_size // p
    image = np.tile(tile.reshape(p, p), (reps, reps))
    image = image + rng.random(image.shape) * 0.12 - 0.06
    return np.round(np.clip(image, 0.0, 1.0), 4)


def generate_stickers(cfg: GeneratorConfig, rng: Rng) -> list[StickerRecord]:
    cfg.validate()
    n_topics = min(cfg.n_topics, cfg.n_stickers)
    n_fam = cfg.n_families
    lexicon = make_lexicon(cfg)

    cover = {(k % n_topics, k % n_fam) for k in range(max(n_topics, n_fam))}
    cells = [(t, f) for t in range(n_topics) for f in range(n_fam)]
    rest = [cells[i] for i in rng.permutation(len(cells)) if cells[i] not in cover]
    chosen = sorted(cover) + rest
    chosen = sorted(chosen[:cfg.n_stickers])

    family_emotions = [[e for e in range(cfg.n_emotions) if e % n_fam == f] for f in range(n_fam)]
    by_family: dict[int, list[int]] = {}
    for i, (_, f) in enumerate(chosen):
        by_family.setdefault(f, []).append(i)

    emotion_sets: list[set[int]] = [set() for _ in chosen]
    for f, members in by_family.items():
        pool = family_emotions[f]
        offset = rng.integers(len(pool))
        for j, i in enumerate(members):
            emotion_sets[i].add(pool[(offset + j) % len(pool)])
        covered = set().union(*(emotion_sets[i] for i in members))
        for j, e in enumerate(e for e in pool if e not in covered):
            emotion_sets[members[j % len(members)]].add(e)
        for i in members:
            size = rng.choice(3, _EMOTION_SET_SIZE_P) + 1
            extra = [e for e in pool if e not in emotion_sets[i]]
            need = max(0, min(size, len(pool)) - len(emotion_sets[i]))
            emotion_sets[i].update(rng.sample_without_replacement(extra, need))

    n_labeled = int(round(cfg.n_stickers * cfg.labeled_fraction))
    labeled = set(int(i) for i in rng.permutation(len(chosen))[:n_labeled])

    topic_codes = _distinct_codes(n_topics, rng.fork("topic-codes"))
    family_codes = _distinct_codes(n_fam, rng.fork("family-codes"))

    stickers = []
    for i, (t, f) in enumerate(chosen):
        emotions = tuple(sorted(emotion_sets[i]))
        label = None
        if i in labeled:
            tw = lexicon.topic_words[t][rng.integers(cfg.topic_keywords)]
            e = emotions[rng.integers(len(emotions))]
            ew = lexicon.emotion_words[e][rng.integers(cfg.emotion_keywords)]
            label = f"{tw} {ew}"
        image = _render(topic_codes[t], family_codes[f], i in labeled, cfg, rng.fork("image", i))
        stickers.append(StickerRecord(id=i, image=image, semantic_label=label,
                                      compatible_emotions=emotions, latent_topic=t))
    return stickers


# dialogues


def _popularity(stickers: Sequence[StickerRecord], cfg: GeneratorConfig, rng: Rng) -> dict[int, float]:
    """Zipf weight of each sticker within its topic (random rank order)."""
    weights = {}
    by_topic: dict[int, list[int]] = {}
    for s in stickers:
        by_topic.setdefault(s.latent_topic, []).append(s.id)
    for topic in sorted(by_topic):
        ids = by_topic[topic]
        order = rng.fork("zipf", topic).permutation(len(ids))
        for rank, idx in enumerate(order):
            weights[ids[idx]] = 1.0 / (rank + 1) ** cfg.zipf_s
    return weights


def _utterance(topic: int, emotion: int, recent: bool, cfg: GeneratorConfig, lexicon: Lexicon,
               rng: Rng) -> str:
    n_tok = cfg.min_tokens + rng.integers(cfg.max_tokens - cfg.min_tokens + 1)
    emo_rate = cfg.emotion_word_rate_recent if recent else cfg.emotion_word_rate
    draws = rng.random((n_tok, 3))
    words = []
    for u, a, b in draws:
        if u < cfg.topic_word_rate:
            words.append(lexicon.topic_words[topic][int(a * cfg.topic_keywords)])
        elif u < cfg.topic_word_rate + emo_rate:
            words.append(lexicon.emotion_words[emotion][int(a * cfg.emotion_keywords)])
        elif u < cfg.topic_word_rate + emo_rate + cfg.distractor_rate:
            if b < 0.5:
                t = int(a * len(lexicon.topic_words))
                words.append(lexicon.topic_words[t][int(2 * b * cfg.topic_keywords)])
            else:
                e = int(a * len(lexicon.emotion_words))
                words.append(lexicon.emotion_words[e][int((2 * b - 1) * cfg.emotion_keywords)])
        else:
            words.append(lexicon.fillers[int(a * cfg.n_filler)])
    return " ".join(words)


def generate_dialogue(cfg: GeneratorConfig, stickers: Sequence[StickerRecord], rng: Rng,
                      sample_id: int = 0, weights: dict[int, float] | None = None,
                      lexicon: Lexicon | None = None) -> DialogueSample:
    """One dialogue whose ground-truth sticker is drawn from ``stickers``."""
    if not stickers:
        raise GenerationError("empty sticker inventory")
    lexicon = lexicon or make_lexicon(cfg)
    n_topics = max(s.latent_topic for s in stickers) + 1
    n_topics = max(n_topics, min(cfg.n_topics, cfg.n_stickers))
    weights = weights or {s.id: 1.0 for s in stickers}
    for _ in range(100):
        topic = rng.integers(n_topics)
        matching = [s for s in stickers if s.latent_topic == topic]
        if matching:
            break
    else:
        raise GenerationError("no sticker matched a sampled topic in 100 attempts")
    sticker = matching[rng.choice(len(matching), [weights[s.id] for s in matching])]
    emotion = sticker.compatible_emotions[rng.integers(len(sticker.compatible_emotions))]

    n_utt = int(round(rng.normal(1, loc=cfg.mean_utterances, scale=cfg.utterance_sd)[0]))
    n_utt = min(max(n_utt, cfg.min_utterances), cfg.max_utterances)
    first_speaker = rng.integers(2)
    utterances = [_utterance(topic, emotion, i >= n_utt - 2, cfg, lexicon, rng) for i in range(n_utt)]
    speakers = [(first_speaker + i) % 2 for i in range(n_utt)]
    return DialogueSample(id=sample_id, utterances=utterances, speaker_ids=speakers,
                          sticker_id=sticker.id, emotion_id=emotion)


def _generate_many(n: int, start_id: int, cfg: GeneratorConfig, pool: Sequence[StickerRecord],
                   weights: dict[int, float], lexicon: Lexicon, rng: Rng,
                   keep_emotion: float) -> list[DialogueSample]:
    out = []
    for k in range(n):
        sample = generate_dialogue(cfg, pool, rng, start_id + k, weights, lexicon)
        if rng.random() >= keep_emotion:
            sample.emotion_id = None
        out.append(sample)
    return out


def split_corpus(stickers: Sequence[StickerRecord], cfg: GeneratorConfig, rng: Rng) -> CorpusSplit:
    """Reserve hard-only stickers and generate the four splits.

    Train and valid draw from the non-reserved inventory, easy test from the
    stickers that actually occur in train, hard test from the reserve only.
    Test samples carry no emotion label.
    """
    n_reserved = int(round(len(stickers) * cfg.hard_fraction))
    if n_reserved >= len(stickers):
        raise ConfigError("hard-only reserve is at least as large as the inventory")
    # keep the reserve's labelled share equal to the inventory's
    labeled = [s.id for s in stickers if s.semantic_label is not None]
    unlabeled = [s.id for s in stickers if s.semantic_label is None]
    n_res_labeled = int(round(n_reserved * len(labeled) / len(stickers)))
    n_res_labeled = min(n_res_labeled, len(labeled))
    n_res_unlabeled = min(n_reserved - n_res_labeled, len(unlabeled))
    n_res_labeled = n_reserved - n_res_unlabeled
    reserve_rng = rng.fork("reserve")
    reserved = set(reserve_rng.sample_without_replacement(labeled, n_res_labeled))
    reserved |= set(reserve_rng.sample_without_replacement(unlabeled, n_res_unlabeled))

    lexicon = make_lexicon(cfg)
    weights = _popularity(stickers, cfg, rng.fork("popularity"))
    visible_pool = [s for s in stickers if s.id not in reserved]
    hard_pool = [s for s in stickers if s.id in reserved]

    corpus = CorpusSplit(stickers=list(stickers), config=cfg)
    next_id = 0
    corpus.train = _generate_many(cfg.n_train, next_id, cfg, visible_pool, weights, lexicon,
                                  rng.fork("train"), TRAIN_EMOTION_COVERAGE)
    next_id += cfg.n_train
    seen = set(corpus.train_sticker_ids())
    seen_pool = [s for s in visible_pool if s.id in seen]
    corpus.valid = _generate_many(cfg.n_valid, next_id, cfg, seen_pool, weights, lexicon,
                                  rng.fork("valid"), TRAIN_EMOTION_COVERAGE)
    next_id += cfg.n_valid
    corpus.easy_test = _generate_many(cfg.n_easy, next_id, cfg, seen_pool, weights, lexicon,
                                      rng.fork("easy_test"), 0.0)
    next_id += cfg.n_easy
    if hard_pool:
        corpus.hard_test = _generate_many(cfg.n_hard, next_id, cfg, hard_pool, weights, lexicon,
                                          rng.fork("hard_test"), 0.0)
    return corpus


def generate_corpus(cfg: GeneratorConfig) -> CorpusSplit:
    cfg.validate()
    rng = Rng(cfg.seed)
    stickers = generate_stickers(cfg, rng.fork("stickers"))
    return split_corpus(stickers, cfg, rng.fork("splits"))


# checks


def check_invariants(corpus: CorpusSplit) -> None:
    """Raise AssertionError when a split or sticker invariant is violated."""
    stickers = corpus.sticker_map()
    train_ids = set(corpus.train_sticker_ids())
    for name in SPLITS:
        for sample in corpus.split(name):
            assert len(sample.utterances) >= 1, f"{name}/{sample.id}: no utterances"
            assert len(sample.speaker_ids) == len(sample.utterances), f"{name}/{sample.id}: speakers"
            assert sample.sticker_id in stickers, f"{name}/{sample.id}: dangling sticker"
            if sample.emotion_id is not None:
                assert sample.emotion_id in stickers[sample.sticker_id].compatible_emotions, (
                    f"{name}/{sample.id}: emotion not compatible with sticker")
    for sample in corpus.easy_test:
        assert sample.sticker_id in train_ids, f"easy/{sample.id}: sticker unseen in train"
        assert sample.emotion_id is None
    for sample in corpus.hard_test:
        assert sample.sticker_id not in train_ids, f"hard/{sample.id}: sticker seen in train"
        assert sample.emotion_id is None
    for s in stickers.values():
        assert s.compatible_emotions, f"sticker {s.id}: empty emotion set"
        assert float(s.image.min()) >= 0.0 and float(s.image.max()) <= 1.0


def oracle_accuracy(samples: Iterable[DialogueSample], stickers: Sequence[StickerRecord],
                    cfg: GeneratorConfig) -> float:
    """Accuracy of the direct rule: majority topic keyword + majority emotion keyword -> owner."""
    topic_of, emotion_of = make_lexicon(cfg).keyword_index()
    owner = {(s.latent_topic, e): s.id for s in stickers for e in s.compatible_emotions}
    hits = total = 0
    for sample in samples:
        topics: dict[int, int] = {}
        emotions: dict[int, int] = {}
        for utt in sample.utterances:
            for w in utt.split():
                if w in topic_of:
                    topics[topic_of[w]] = topics.get(topic_of[w], 0) + 1
                elif w in emotion_of:
                    emotions[emotion_of[w]] = emotions.get(emotion_of[w], 0) + 1
        total += 1
        if not topics or not emotions:
            continue
        t = max(sorted(topics), key=lambda k: topics[k])
        e = max(sorted(emotions), key=lambda k: emotions[k])
        hits += owner.get((t, e)) == sample.sticker_id
    return hits / total if total else 0.0


# serialisation


def _sticker_to_json(s: StickerRecord) -> dict:
    return {
        "id": s.id,
        "latent_topic": s.latent_topic,
        "compatible_emotions": list(s.compatible_emotions),
        "semantic_label": s.semantic_label,
        "image": [[round(float(v), 4) for v in row] for row in s.image],
    }


def _sample_to_json(s: DialogueSample) -> dict:
    return {"id": s.id, "utterances": list(s.utterances), "speaker_ids": list(s.speaker_ids),
            "sticker_id": s.sticker_id, "emotion_id": s.emotion_id}


def save_corpus(corpus: CorpusSplit, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    stickers = [_sticker_to_json(s) for s in corpus.stickers]
    (path / "stickers.json").write_text(json.dumps(stickers, separators=(",", ":")) + "\n",
                                        encoding="utf-8")
    for name in SPLITS:
        lines = [json.dumps(_sample_to_json(s), separators=(",", ":")) for s in corpus.split(name)]
        (path / f"{name}.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    cfg = corpus.config or GeneratorConfig()
    meta = {"format_version": FORMAT_VERSION, "seed": cfg.seed, "generator": asdict(cfg)}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_sticker(obj, where: str) -> StickerRecord:
    try:
        image = np.asarray(obj["image"], dtype=np.float64)
        if image.ndim != 2:
            raise ValueError("image must be 2-D")
        return StickerRecord(id=int(obj["id"]), image=image, semantic_label=obj["semantic_label"],
                             compatible_emotions=tuple(int(e) for e in obj["compatible_emotions"]),
                             latent_topic=int(obj.get("latent_topic", -1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"{where}: bad sticker record ({exc})") from exc


def _parse_sample(line: str, where: str) -> DialogueSample:
    try:
        obj = json.loads(line)
        sample = DialogueSample(id=int(obj["id"]), utterances=[str(u) for u in obj["utterances"]],
                                speaker_ids=[int(x) for x in obj["speaker_ids"]],
                                sticker_id=int(obj["sticker_id"]),
                                emotion_id=None if obj["emotion_id"] is None else int(obj["emotion_id"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"{where}: malformed sample ({exc})") from exc
    if not sample.utterances or len(sample.speaker_ids) != len(sample.utterances):
        raise CorpusFormatError(f"{where}: utterances/speaker_ids mismatch")
    return sample


def load_split_file(path: str | Path) -> list[DialogueSample]:
    path = Path(path)
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            samples.append(_parse_sample(line, f"{path.name}:{lineno}"))
    return samples


def load_corpus(path: str | Path) -> CorpusSplit:
    path = Path(path)
    try:
        raw = json.loads((path / "stickers.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"stickers.json:{exc.lineno}: {exc.msg}") from exc
    stickers = [_parse_sticker(obj, f"stickers.json[{i}]") for i, obj in enumerate(raw)]
    cfg = None
    meta_path = path / "meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"meta.json:{exc.lineno}: {exc.msg}") from exc
        if meta.get("format_version") != FORMAT_VERSION:
            raise CorpusFormatError(f"meta.json: unsupported format {meta.get('format_version')!r}")
        cfg = GeneratorConfig.from_dict(meta["generator"])
    corpus = CorpusSplit(stickers=stickers, config=cfg)
    ids = {s.id for s in stickers}
    for name in SPLITS:
        split_path = path / f"{name}.jsonl"
        samples = load_split_file(split_path) if split_path.exists() else []
        for s in samples:
            if s.sticker_id not in ids:
                raise ReferentialIntegrityError(
                    f"{name}.jsonl: sample {s.id} references unknown sticker {s.sticker_id}")
        setattr(corpus, name, samples)
    return corpus
