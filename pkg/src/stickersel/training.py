"""Multitask training: pair construction, the four losses, AdamW + warmup/cosine.

Each positive dialogue yields one positive pair (ground-truth sticker) and one
negative pair (a uniformly drawn other sticker).  Auxiliary targets are only
attached to positive pairs:

* masked context prediction runs on a second forward pass of the positive pairs
  with BERT-style corrupted context,
* emotion classification reads the sticker position of the clean forward,
* semantic prediction reads the [MASK] slots of positives shown in masked mode.

Every random decision draws from a stream forked per (epoch, sample, purpose),
so turning auxiliary paths on or off never shifts the main-task randomness.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import CorpusSplit, DialogueSample, StickerRecord
from .model import (ModelConfig, ModelInputs, collate, decayed_param_names, forward, init_params,
                    load_checkpoint, read_records, save_checkpoint, write_records)
from .rng import Rng
from .vocab import MASK, N_SPECIAL, PAD, EncodedSample, SemanticMode, Vocabulary, build_vocab, encode, semantic_targets

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ("step", "lr", "total", "main", "ctx", "emo", "sem")
MANIFEST_VERSION = "1"
VARIANTS = ("base", "ctx", "ctx-emo", "full", "full-minus-ocr")


class NumericError(FloatingPointError):
    pass


class SamplingError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


def _from_dict(cls, data: dict, presets: dict | None = None):
    data = dict(data)
    base = cls()
    preset = data.pop("preset", None)
    if preset is not None:
        if not presets or preset not in presets:
            raise ValueError(f"unknown {cls.__name__} preset {preset!r}")
        base = presets[preset]
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    obj = replace(base, **data)
    obj.validate()
    return obj


@dataclass
class LossWeights:
    alpha: float = 0.05
    beta: float = 0.2
    gamma: float = 0.1

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        return _from_dict(cls, data, LOSS_WEIGHT_PRESETS)


LOSS_WEIGHT_PRESETS = {"paper": LossWeights(0.05, 0.2, 0.1)}


@dataclass
class MaskingPolicy:
    mask_rate: float = 0.15
    replace_prob: float = 0.8
    random_prob: float = 0.1
    keep_prob: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in [0, 1]")
        probs = (self.replace_prob, self.random_prob, self.keep_prob)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("replace/random/keep probabilities must be >= 0 and sum to 1")

    @classmethod
    def from_dict(cls, data: dict) -> "MaskingPolicy":
        return _from_dict(cls, data)


@dataclass
class TrainConfig:
    batch_size: int = 8               # pairs per step: half positives, half negatives
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    total_steps: int = 3000
    warmup_fraction: float = 0.05
    seed: int = 0
    semantic_visible_prob: float = 0.5
    ocr_as_input: bool = True
    semantic_region: bool = True
    auxiliary: bool = True
    checkpoint_every: int = 0
    train_subset: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (one positive and one negative)")
        if not 0.0 <= self.semantic_visible_prob <= 1.0:
            raise ValueError("semantic_visible_prob must lie in [0, 1]")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.checkpoint_every < 0 or self.train_subset < 0:
            raise ValueError("checkpoint_every and train_subset must be >= 0")

    @property
    def positives_per_step(self) -> int:
        return self.batch_size // 2

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _from_dict(cls, data, TRAIN_PRESETS)


TRAIN_PRESETS = {"paper-finetune": TrainConfig(learning_rate=9e-6)}


def apply_variant(variant: str, weights: LossWeights, cfg: TrainConfig) -> tuple[LossWeights, TrainConfig]:
    """Map an ablation-ladder name onto loss weights and input flags."""
    if variant == "base":
        return LossWeights(0.0, 0.0, 0.0), replace(cfg, semantic_region=False, auxiliary=False)
    if variant == "ctx":
        return LossWeights(weights.alpha, 0.0, 0.0), replace(cfg, semantic_region=False, auxiliary=True)
    if variant == "ctx-emo":
        return LossWeights(weights.alpha, weights.beta, 0.0), replace(cfg, semantic_region=False, auxiliary=True)
    if variant == "full":
        return weights, replace(cfg, semantic_region=True, ocr_as_input=True, auxiliary=True)
    if variant == "full-minus-ocr":
        return weights, replace(cfg, semantic_region=True, ocr_as_input=False, auxiliary=True)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def corpus_vocab(corpus: CorpusSplit, min_count: int = 1) -> Vocabulary:
    """Vocabulary over training utterances plus every sticker label in the inventory."""
    texts = [u for s in corpus.train for u in s.utterances]
    texts += [s.semantic_label for s in corpus.stickers if s.semantic_label]
    return build_vocab(texts, min_count)


# pair construction


def sample_negative(sample: DialogueSample, sticker_ids: Sequence[int], rng: Rng) -> int:
    """Uniform draw over ``sticker_ids`` excluding the sample's ground truth."""
    pool = [s for s in sticker_ids if s != sample.sticker_id]
    if not pool:
        raise SamplingError("need at least two stickers to draw a negative")
    return pool[rng.integers(len(pool))]


def apply_mlm_mask(sample: EncodedSample, policy: MaskingPolicy, vocab_size: int,
                   rng: Rng) -> tuple[tuple[int, ...], dict[int, int]]:
    """BERT-style corruption restricted to dialogue tokens.

    Returns the corrupted id sequence and {position: original id} for the
    selected positions.
    """
    ids = list(sample.ids)
    positions = sample.context_positions
    targets: dict[int, int] = {}
    if not positions or policy.mask_rate <= 0:
        return tuple(ids), targets
    selected = rng.random(len(positions)) < policy.mask_rate
    chosen = [p for p, keep in zip(positions, selected) if keep]
    if not chosen:
        return tuple(ids), targets
    action = rng.random(len(chosen))
    replacement = rng.integers(max(vocab_size - N_SPECIAL, 1), len(chosen)) + N_SPECIAL
    for pos, a, r in zip(chosen, action, replacement):
        targets[pos] = ids[pos]
        if a < policy.replace_prob:
            ids[pos] = MASK
        elif a < policy.replace_prob + policy.random_prob:
            ids[pos] = int(r)
    return tuple(ids), targets


def training_semantic_mode(sticker: StickerRecord, cfg: TrainConfig, rng: Rng) -> SemanticMode:
    if not cfg.semantic_region or sticker.semantic_label is None:
        return SemanticMode.EMPTY
    if not cfg.ocr_as_input:
        return SemanticMode.MASKED
    return SemanticMode.VISIBLE if rng.random() < cfg.semantic_visible_prob else SemanticMode.MASKED


def eval_semantic_mode(sticker: StickerRecord, semantic_region: bool, ocr_as_input: bool) -> SemanticMode:
    if not semantic_region or sticker.semantic_label is None:
        return SemanticMode.EMPTY
    return SemanticMode.VISIBLE if ocr_as_input else SemanticMode.MASKED


@dataclass
class Pair:
    sample_id: int
    sticker_id: int
    label: int
    encoded: EncodedSample
    image: np.ndarray
    emotion: int | None = None
    semantic: list[int] | None = None            # slot targets, [PAD] = ignore
    mlm_ids: tuple[int, ...] | None = None       # corrupted ids for the context forward
    mlm_targets: dict[int, int] = field(default_factory=dict)


@dataclass
class TrainingBatch:
    pairs: list[Pair]

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs], dtype=np.int64)

    def main_inputs(self) -> ModelInputs:
        return collate([p.encoded for p in self.pairs], [p.image for p in self.pairs])

    def positives(self) -> list[int]:
        return [i for i, p in enumerate(self.pairs) if p.label == 1]


class PairBuilder:
    """Encodes dialogue/sticker pairs for training, with an encoding cache."""

    def __init__(self, corpus: CorpusSplit, vocab: Vocabulary, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, policy: MaskingPolicy):
        self.stickers = corpus.sticker_map()
        self.vocab = vocab
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.policy = policy
        self._cache: dict[tuple, EncodedSample] = {}

    def encode(self, sample: DialogueSample, sticker: StickerRecord, mode: SemanticMode) -> EncodedSample:
        label = sticker.semantic_label if mode != SemanticMode.EMPTY else None
        key = (sample.id, label, mode)
        enc = self._cache.get(key)
        if enc is None:
            enc = encode(sample.utterances, label, self.model_cfg.semantic_slot_len,
                         self.model_cfg.max_len, self.vocab, mode)
            self._cache[key] = enc
        return enc

    def build(self, sample: DialogueSample, negatives_from: Sequence[int], rng: Rng) -> list[Pair]:
        cfg = self.train_cfg
        gt = self.stickers[sample.sticker_id]
        mode = training_semantic_mode(gt, cfg, rng.fork("sem-pos"))
        pos = Pair(sample.id, gt.id, 1, self.encode(sample, gt, mode), gt.image)
        if cfg.auxiliary:
            pos.emotion = sample.emotion_id
            if mode == SemanticMode.MASKED:
                pos.semantic = semantic_targets(gt.semantic_label, self.model_cfg.semantic_slot_len, self.vocab)
            pos.mlm_ids, pos.mlm_targets = apply_mlm_mask(pos.encoded, self.policy, len(self.vocab),
                                                          rng.fork("mlm"))
        neg_sticker = self.stickers[sample_negative(sample, negatives_from, rng.fork("neg"))]
        neg_mode = training_semantic_mode(neg_sticker, cfg, rng.fork("sem-neg"))
        neg = Pair(sample.id, neg_sticker.id, 0, self.encode(sample, neg_sticker, neg_mode), neg_sticker.image)
        return [pos, neg]


# losses


@dataclass
class LossTerms:
    total: Tensor
    main: Tensor
    ctx: Tensor
    emo: Tensor
    sem: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "main", "ctx", "emo", "sem")}


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def compute_losses(batch: TrainingBatch, params: dict[str, Tensor], cfg: ModelConfig,
                   weights: LossWeights) -> LossTerms:
    """L = L_main + alpha L_ctx + beta L_emo + gamma L_sem, each term a mean."""
    out = forward(batch.main_inputs(), params, cfg)
    main = ad.cross_entropy(out.main_logits, batch.labels)

    emo_rows = [i for i, p in enumerate(batch.pairs) if p.label == 1 and p.emotion is not None]
    emo = _zero()
    if emo_rows:
        logits = ad.gather_rows(out.emotion_logits, emo_rows)
        emo = ad.cross_entropy(logits, [batch.pairs[i].emotion for i in emo_rows])

    sem_rows = [i for i, p in enumerate(batch.pairs) if p.label == 1 and p.semantic is not None]
    sem = _zero()
    if sem_rows:
        targets = np.array([batch.pairs[i].semantic for i in sem_rows], dtype=np.int64).reshape(-1)
        keep = np.flatnonzero(targets != PAD)
        if keep.size:
            logits = out.semantic_logits(sem_rows).reshape(len(sem_rows) * cfg.semantic_slot_len,
                                                           cfg.vocab_size)
            sem = ad.cross_entropy(ad.gather_rows(logits, keep), targets[keep])

    ctx = _zero()
    mlm_pairs = [p for p in batch.pairs if p.label == 1 and p.mlm_targets]
    if mlm_pairs:
        corrupted = [replace(p.encoded, ids=p.mlm_ids) for p in mlm_pairs]
        mlm_out = forward(collate(corrupted, [p.image for p in mlm_pairs]), params, cfg)
        rows, positions, targets = [], [], []
        for r, p in enumerate(mlm_pairs):
            for pos in sorted(p.mlm_targets):
                rows.append(r)
                positions.append(pos)
                targets.append(p.mlm_targets[pos])
        ctx = ad.cross_entropy(mlm_out.mlm_logits(rows, positions), targets)

    # zero-weight terms stay out of the graph so their heads see no update at all
    total = main
    for term, weight in ((ctx, weights.alpha), (emo, weights.beta), (sem, weights.gamma)):
        if weight:
            total = total + ad.scale(term, weight)
    terms = LossTerms(total, main, ctx, emo, sem)
    values = terms.values()
    for name in ("main", "ctx", "emo", "sem", "total"):
        value = values[name]
        if not math.isfinite(value):
            raise NumericError(f"non-finite {name} loss: {value}")
    return terms


# optimiser


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over warmup_fraction * total_steps, then cosine decay to 0."""
    warmup = int(round(cfg.warmup_fraction * cfg.total_steps))
    if warmup > 0 and step <= warmup:
        return cfg.learning_rate * step / warmup
    progress = (step - warmup) / max(1, cfg.total_steps - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState, lr: float,
               cfg: TrainConfig, decay: set[str]) -> None:
    """One in-place AdamW update with bias-corrected moments and decoupled decay."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None or not p.requires_grad:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if name in decay and cfg.weight_decay:
            p.data -= (lr * cfg.weight_decay) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def save_optimizer(path: Path, state: AdamWState) -> None:
    arrays = {f"m/{k}": a for k, a in state.m.items()}
    arrays.update({f"v/{k}": a for k, a in state.v.items()})
    write_records(path, {"kind": "adamw", "step": state.step}, arrays)


def load_optimizer(path: Path) -> AdamWState:
    header, records = read_records(path)
    state = AdamWState(step=int(header["step"]))
    for key, arr in records.items():
        kind, name = key.split("/", 1)
        (state.m if kind == "m" else state.v)[name] = arr.astype(ad.get_dtype())
    return state


# training loop


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    loss_log: list[dict]
    optimizer: AdamWState
    manifest: dict


class StepSchedule:
    """Which training samples feed each step: epoch permutations laid end to end."""

    def __init__(self, n_samples: int, per_step: int, rng: Rng):
        self.n = n_samples
        self.per_step = per_step
        self.rng = rng
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms[epoch] = self.rng.fork("epoch", epoch).permutation(self.n)
        return self._perms[epoch]

    def step(self, step: int) -> list[tuple[int, int]]:
        """(epoch, sample index) pairs for 1-based ``step``."""
        out = []
        for j in range(self.per_step):
            k = (step - 1) * self.per_step + j
            epoch, pos = divmod(k, self.n)
            out.append((epoch, int(self._perm(epoch)[pos])))
        return out


def training_samples(corpus: CorpusSplit, cfg: TrainConfig) -> list[DialogueSample]:
    samples = corpus.train
    if cfg.train_subset:
        samples = samples[:cfg.train_subset]
    if not samples:
        raise ValueError("empty training split")
    return samples


def build_step_batch(step: int, schedule: StepSchedule, samples: Sequence[DialogueSample],
                     builder: PairBuilder, negatives_from: Sequence[int], run_rng: Rng) -> TrainingBatch:
    pairs: list[Pair] = []
    for epoch, idx in schedule.step(step):
        sample = samples[idx]
        pairs.extend(builder.build(sample, negatives_from, run_rng.fork("sample", epoch, sample.id)))
    return TrainingBatch(pairs)


def _format(value: float) -> str:
    return repr(float(value))


def loss_log_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_LOG_HEADER)
    for row in rows:
        writer.writerow([row["step"]] + [_format(row[k]) for k in LOSS_LOG_HEADER[1:]])
    return buf.getvalue()


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in reader]


def make_manifest(model_cfg: ModelConfig, train_cfg: TrainConfig, weights: LossWeights,
                  policy: MaskingPolicy, extra: dict | None = None) -> dict:
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": train_cfg.seed,
        "model": model_cfg.to_dict(),
        "train": asdict(train_cfg),
        "loss_weights": asdict(weights),
        "masking": asdict(policy),
    }
    if extra:
        manifest.update(extra)
    return manifest


def _write_outputs(out_dir: Path, params, model_cfg, state, rows, manifest, vocab) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.stkm", params, model_cfg)
    save_optimizer(out_dir / "optimizer.stkm", state)
    (out_dir / "loss_log.csv").write_text(loss_log_csv(rows), encoding="utf-8")
    manifest = dict(manifest, completed_steps=state.step)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
    if vocab is not None:
        vocab.save(out_dir / "vocab.txt")


def train(corpus: CorpusSplit, vocab: Vocabulary, model_cfg: ModelConfig, train_cfg: TrainConfig,
          weights: LossWeights, policy: MaskingPolicy, out_dir: str | Path | None = None,
          resume: bool = False, manifest_extra: dict | None = None, stop_after: int | None = None,
          log_every: int = 0) -> TrainResult:
    """Train from scratch (or resume from ``out_dir``) for ``train_cfg.total_steps`` steps.

    ``stop_after`` ends the loop early at that step (the schedule still spans
    ``total_steps``); it exists for resume tests.
    """
    for obj in (model_cfg, train_cfg, weights, policy):
        obj.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    run_rng = Rng(train_cfg.seed)
    samples = training_samples(corpus, train_cfg)
    negatives_from = corpus.train_sticker_ids()
    builder = PairBuilder(corpus, vocab, model_cfg, train_cfg, policy)
    schedule = StepSchedule(len(samples), train_cfg.positives_per_step, run_rng)
    decay = decayed_param_names(model_cfg)
    manifest = make_manifest(model_cfg, train_cfg, weights, policy, manifest_extra)

    rows: list[dict] = []
    if resume:
        if out_dir is None:
            raise ValueError("resume needs out_dir")
        _, params = load_checkpoint(out_dir / "checkpoint.stkm", model_cfg)
        state = load_optimizer(out_dir / "optimizer.stkm")
        rows = read_loss_log(out_dir / "loss_log.csv")[:state.step]
    else:
        params = init_params(model_cfg, run_rng.fork("init"))
        state = AdamWState()

    last = train_cfg.total_steps if stop_after is None else min(stop_after, train_cfg.total_steps)
    for step in range(state.step + 1, last + 1):
        batch = build_step_batch(step, schedule, samples, builder, negatives_from, run_rng)
        for p in params.values():
            p.grad = None
        try:
            terms = compute_losses(batch, params, model_cfg, weights)
        except NumericError as exc:
            raise TrainingAborted(f"step {step}: {exc}; last good checkpoint kept") from exc
        ad.backward(terms.total)
        lr = learning_rate(step, train_cfg)
        adamw_step(params, {n: p.grad for n, p in params.items() if p.grad is not None}, state, lr,
                   train_cfg, decay)
        row = {"step": step, "lr": lr, **terms.values()}
        rows.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3g total %.4f main %.4f ctx %.4f emo %.4f sem %.4f", step, lr,
                     row["total"], row["main"], row["ctx"], row["emo"], row["sem"])
        if out_dir is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            _write_outputs(out_dir, params, model_cfg, state, rows, manifest, vocab)
    if out_dir is not None:
        _write_outputs(out_dir, params, model_cfg, state, rows, manifest, vocab)
    for p in params.values():
        p.grad = None
    return TrainResult(params=params, loss_log=rows, optimizer=state, manifest=manifest)


def pair_accuracy(params: dict[str, Tensor], samples: Sequence[DialogueSample], corpus: CorpusSplit,
                  vocab: Vocabulary, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int = 0,
                  chunk: int = 64) -> float:
    """Main-task accuracy over one positive and one random negative pair per sample."""
    stickers = corpus.sticker_map()
    pool = corpus.train_sticker_ids()
    rng = Rng(seed)
    encoded, images, labels = [], [], []
    for s in samples:
        neg = stickers[sample_negative(s, pool, rng.fork("acc-neg", s.id))]
        for sticker, label in ((stickers[s.sticker_id], 1), (neg, 0)):
            mode = eval_semantic_mode(sticker, train_cfg.semantic_region, train_cfg.ocr_as_input)
            label_text = sticker.semantic_label if mode != SemanticMode.EMPTY else None
            encoded.append(encode(s.utterances, label_text, model_cfg.semantic_slot_len,
                                  model_cfg.max_len, vocab, mode))
            images.append(sticker.image)
            labels.append(label)
    correct = 0
    with ad.no_grad():
        for start in range(0, len(encoded), chunk):
            out = forward(collate(encoded[start:start + chunk], images[start:start + chunk]), params, model_cfg)
            pred = out.main_logits.data.argmax(axis=-1)
            correct += int((pred == np.array(labels[start:start + chunk])).sum())
    return correct / len(encoded)


# gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict[str, tuple[int, float, int]]
    loss_terms: dict[str, float]


def grad_check_batch(corpus: CorpusSplit, vocab: Vocabulary, model_cfg: ModelConfig, policy: MaskingPolicy,
                     n_dialogues: int = 2, seed: int = 0) -> TrainingBatch:
    """A small full-variant batch in which every loss term has targets.

    Uses training dialogues whose ground truth is labeled and whose emotion is
    known, with the semantic region masked so the semantic loss is active.
    """
    train_cfg = TrainConfig(semantic_visible_prob=0.0, seed=seed)
    builder = PairBuilder(corpus, vocab, model_cfg, train_cfg, policy)
    pool = corpus.train_sticker_ids()
    rng = Rng(seed)
    pairs: list[Pair] = []
    for sample in corpus.train:
        if len(pairs) >= 2 * n_dialogues:
            break
        if sample.emotion_id is None or builder.stickers[sample.sticker_id].semantic_label is None:
            continue
        built = builder.build(sample, pool, rng.fork("grad-check", sample.id))
        if built[0].mlm_targets:
            pairs.extend(built)
    if len(pairs) < 2 * n_dialogues:
        raise ValueError("corpus has too few fully annotated training dialogues for a gradient check")
    return TrainingBatch(pairs)


def full_model_grad_check(corpus: CorpusSplit, vocab: Vocabulary, model_cfg: ModelConfig,
                          weights: LossWeights = LossWeights(), policy: MaskingPolicy = MaskingPolicy(),
                          seed: int = 0, n_coords: int = 200, eps: float = 1e-4, param_noise: float = 0.2,
                          n_dialogues: int = 2, refine_above: float | None = 1e-5) -> GradCheckResult:
    """Finite-difference check of the weighted four-term loss in 64-bit.

    Parameters are initialised and then jittered by N(0, param_noise) so the
    check runs away from the near-symmetric initial point, where many
    gradients are tiny and central differences are dominated by round-off.
    Coordinates whose three-point estimate at ``eps`` misses by more than
    ``refine_above`` are re-measured with the five-point stencil, so tiny
    gradients are judged against an accurate reference instead of against
    finite-difference error.  ``per_tensor`` maps each name to (coords probed,
    worst relative error, coords refined).
    """
    with ad.precision("float64"):
        params = init_params(model_cfg, Rng(seed).fork("init"))
        noise_rng = Rng(seed).fork("grad-check-noise")
        for name, p in params.items():
            p.data += noise_rng.fork(name).normal(p.shape, 0.0, param_noise)
        batch = grad_check_batch(corpus, vocab, model_cfg, policy, n_dialogues, seed)
        terms = compute_losses(batch, params, model_cfg, weights).values()
        for name in ("ctx", "emo", "sem"):
            if terms[name] == 0.0:
                raise ValueError(f"{name} loss is inactive in the gradient-check batch")
        names = [n for n, p in params.items() if p.requires_grad]
        report: dict = {}
        worst = ad.grad_check(lambda: compute_losses(batch, params, model_cfg, weights).total,
                              [params[n] for n in names], eps=eps, n_coords=n_coords,
                              rng=Rng(seed).fork("coords"), report=report,
                              refine_above=refine_above)
    return GradCheckResult(worst, {names[i]: v for i, v in report.items()}, terms)
