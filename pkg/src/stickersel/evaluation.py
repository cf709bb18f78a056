"""Candidate ranking, retrieval metrics, significance testing and model probes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import CorpusSplit, DialogueSample, StickerRecord
from .model import ModelConfig, clone_params, collate, forward
from .rng import Rng
from .training import eval_semantic_mode
from .vocab import SemanticMode, Vocabulary, encode

PROTOCOLS = ("R10", "RALL")
RECALL_KS = (1, 2, 5)
R10_CANDIDATES = 10
RANKINGS_HEADER = ("sample_id", "gt_rank", "reciprocal_rank", "top1_id")
_PAIRS_PER_CHUNK = 512


class EvaluationError(ValueError):
    pass


class NumericScoreError(FloatingPointError):
    pass


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class ScoringOptions:
    """How the semantic region is filled for candidates at inference."""

    semantic_region: bool = True
    ocr_as_input: bool = True

    @classmethod
    def from_train(cls, train_cfg) -> "ScoringOptions":
        return cls(semantic_region=train_cfg.semantic_region, ocr_as_input=train_cfg.ocr_as_input)


# ranking


@dataclass(frozen=True)
class RankingResult:
    sample_id: int
    order: tuple[int, ...]      # candidate ids, best first
    gt_id: int
    rank: int

    @property
    def reciprocal_rank(self) -> float:
        return 1.0 / self.rank

    @property
    def top1_id(self) -> int:
        return self.order[0]


def rank_with_ties(scores: Sequence[float], candidate_ids: Sequence[int], gt_id: int,
                   sample_id: int = -1) -> RankingResult:
    """Sort by descending score, ties broken by ascending sticker id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(candidate_ids, dtype=np.int64)
    if scores.shape != ids.shape or scores.ndim != 1 or scores.size == 0:
        raise ContractViolation("need one score per candidate and at least one candidate")
    if not np.all(np.isfinite(scores)):
        raise NumericScoreError(f"non-finite candidate score for sample {sample_id}")
    where = np.flatnonzero(ids == gt_id)
    if where.size != 1:
        raise ContractViolation(f"ground truth {gt_id} must appear exactly once among candidates")
    order = np.lexsort((ids, -scores))
    rank = int(np.flatnonzero(order == where[0])[0]) + 1
    return RankingResult(sample_id, tuple(int(i) for i in ids[order]), int(gt_id), rank)


# metrics


@dataclass
class MetricsReport:
    protocol: str
    n_samples: int
    recall: dict[int, float]
    mrr: float
    reciprocal_ranks: list[float] = field(repr=False, default_factory=list)
    with_text: "MetricsReport | None" = None
    without_text: "MetricsReport | None" = None

    def summary(self) -> dict:
        out = {"protocol": self.protocol, "n_samples": self.n_samples}
        for k in RECALL_KS:
            out[f"recall@{k}"] = self.recall[k]
        out["mrr"] = self.mrr
        return out

    def to_dict(self) -> dict:
        out = self.summary()
        for name in ("with_text", "without_text"):
            sub = getattr(self, name)
            if sub is not None:
                out[name] = sub.summary()
        if self.with_text is not None and self.without_text is not None:
            out["with_minus_without_mrr"] = self.with_text.mrr - self.without_text.mrr
        return out


def metrics_from_ranks(ranks: Sequence[int], protocol: str) -> MetricsReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise EvaluationError("cannot compute metrics over zero samples")
    rr = 1.0 / ranks
    n = int(ranks.size)
    # exact rational mean, rounded once, so the value never depends on summation order
    mrr = sum(Fraction(1, int(r)) for r in ranks) / n
    return MetricsReport(
        protocol=protocol,
        n_samples=n,
        recall={k: int(np.count_nonzero(ranks <= k)) / n for k in RECALL_KS},
        mrr=float(mrr),
        reciprocal_ranks=[float(x) for x in rr],
    )


# candidate scoring


def r10_candidates(sample: DialogueSample, inventory: Sequence[int], eval_seed: int) -> list[int]:
    """Ground truth plus nine distractors from the rest of the inventory, ascending ids."""
    pool = [s for s in inventory if s != sample.sticker_id]
    if len(pool) < R10_CANDIDATES - 1:
        raise EvaluationError(f"R10 needs at least {R10_CANDIDATES} stickers, inventory has {len(pool) + 1}")
    drawn = Rng(eval_seed).fork("r10", sample.id).sample_without_replacement(pool, R10_CANDIDATES - 1)
    return sorted(drawn + [sample.sticker_id])


def _encode_pair(sample: DialogueSample, sticker: StickerRecord, cfg: ModelConfig, vocab: Vocabulary,
                 options: ScoringOptions):
    mode = eval_semantic_mode(sticker, options.semantic_region, options.ocr_as_input)
    label = sticker.semantic_label if mode != SemanticMode.EMPTY else None
    return encode(sample.utterances, label, cfg.semantic_slot_len, cfg.max_len, vocab, mode)


def _margins(encoded, images, params, cfg) -> np.ndarray:
    with ad.no_grad():
        logits = forward(collate(encoded, images), params, cfg).main_logits.data.astype(np.float64)
    return logits[:, 1] - logits[:, 0]


def score_candidates(sample: DialogueSample, candidates: Sequence[StickerRecord], params: dict[str, Tensor],
                     cfg: ModelConfig, vocab: Vocabulary,
                     options: ScoringOptions = ScoringOptions()) -> np.ndarray:
    """Match log-odds, log(p / (1 - p)), of each candidate for one dialogue.

    Log-odds order candidates exactly as match probabilities do but never
    saturate to ties at 1.0 in floating point.
    """
    if not candidates:
        raise EvaluationError("no candidates to score")
    encoded = [_encode_pair(sample, s, cfg, vocab, options) for s in candidates]
    return _margins(encoded, [s.image for s in candidates], params, cfg)


def _chunks(candidate_lists: Sequence[Sequence[int]]) -> list[range]:
    """Group consecutive samples into chunks of about _PAIRS_PER_CHUNK pairs.

    Chunk boundaries depend only on the inputs, so results do not depend on
    how many workers score them.
    """
    chunks, start, pairs = [], 0, 0
    for i, cands in enumerate(candidate_lists):
        if pairs and pairs + len(cands) > _PAIRS_PER_CHUNK:
            chunks.append(range(start, i))
            start, pairs = i, 0
        pairs += len(cands)
    chunks.append(range(start, len(candidate_lists)))
    return chunks


def rank_split(samples: Sequence[DialogueSample], corpus: CorpusSplit, params: dict[str, Tensor],
               cfg: ModelConfig, vocab: Vocabulary, protocol: str, eval_seed: int = 0,
               options: ScoringOptions = ScoringOptions(), jobs: int = 1) -> list[RankingResult]:
    protocol = protocol.upper()
    if protocol not in PROTOCOLS:
        raise EvaluationError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if not samples:
        raise EvaluationError("empty split")
    stickers = corpus.sticker_map()
    inventory = sorted(stickers)
    if protocol == "R10":
        candidate_lists = [r10_candidates(s, inventory, eval_seed) for s in samples]
    else:
        candidate_lists = [inventory] * len(samples)

    def run(chunk: range) -> list[RankingResult]:
        encoded, images = [], []
        for i in chunk:
            for cid in candidate_lists[i]:
                encoded.append(_encode_pair(samples[i], stickers[cid], cfg, vocab, options))
                images.append(stickers[cid].image)
        margins = _margins(encoded, images, params, cfg)
        out, offset = [], 0
        for i in chunk:
            n = len(candidate_lists[i])
            out.append(rank_with_ties(margins[offset:offset + n], candidate_lists[i], samples[i].sticker_id,
                                      samples[i].id))
            offset += n
        return out

    chunks = _chunks(candidate_lists)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    results = [r for part in parts for r in part]
    return sorted(results, key=lambda r: r.sample_id)


def report_from_rankings(rankings: Sequence[RankingResult], protocol: str,
                         labeled: set[int] | None = None) -> MetricsReport:
    """Metrics over ``rankings``; with ``labeled`` also the with/without-text partition."""
    report = metrics_from_ranks([r.rank for r in rankings], protocol)
    if labeled is not None:
        with_text = [r.rank for r in rankings if r.gt_id in labeled]
        without = [r.rank for r in rankings if r.gt_id not in labeled]
        if with_text:
            report.with_text = metrics_from_ranks(with_text, protocol)
        if without:
            report.without_text = metrics_from_ranks(without, protocol)
    return report


@dataclass
class Evaluation:
    report: MetricsReport
    rankings: list[RankingResult]


def evaluate(samples: Sequence[DialogueSample], corpus: CorpusSplit, params: dict[str, Tensor], cfg: ModelConfig,
             vocab: Vocabulary, protocol: str = "RALL", eval_seed: int = 0,
             options: ScoringOptions = ScoringOptions(), jobs: int = 1) -> Evaluation:
    rankings = rank_split(samples, corpus, params, cfg, vocab, protocol, eval_seed, options, jobs)
    labeled = {s.id for s in corpus.stickers if s.semantic_label is not None}
    return Evaluation(report_from_rankings(rankings, protocol.upper(), labeled), rankings)


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def metrics_json(report: MetricsReport, split: str, eval_seed: int, checkpoint_sha256: str | None) -> str:
    doc = {"split": split, "eval_seed": eval_seed, "checkpoint_sha256": checkpoint_sha256,
           **report.to_dict()}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def rankings_csv(rankings: Sequence[RankingResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RANKINGS_HEADER)
    for r in rankings:
        writer.writerow([r.sample_id, r.rank, repr(r.reciprocal_rank), r.top1_id])
    return buf.getvalue()


def read_rankings(path: str | Path) -> dict[int, float]:
    """sample_id -> reciprocal rank from a rankings CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RANKINGS_HEADER:
            raise EvaluationError(f"{path}: expected header {','.join(RANKINGS_HEADER)}")
        return {int(row["sample_id"]): float(row["reciprocal_rank"]) for row in reader}


# significance


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 500):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return betainc(0.5 * df, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    n: int
    mean_difference: float
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on a - b.

    All-zero differences give p = 1; constant nonzero differences give p = 0
    with ``degenerate`` set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractViolation(f"paired samples need equal 1-D shapes, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ContractViolation("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n, 0.0, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n, mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_two_sided(t, n - 1), n, mean)


def paired_from_rankings(a: dict[int, float], b: dict[int, float]) -> TTestResult:
    if set(a) != set(b):
        raise ContractViolation("rankings cover different sample ids")
    ids = sorted(a)
    return paired_t_test([a[i] for i in ids], [b[i] for i in ids])


# saliency


@dataclass
class SaliencyMap:
    sample_id: int
    positions: tuple[int, ...]
    tokens: tuple[str, ...]
    scores: np.ndarray
    loss: float


def _positive_inputs(sample: DialogueSample, sticker: StickerRecord, cfg: ModelConfig, vocab: Vocabulary,
                     options: ScoringOptions):
    enc = _encode_pair(sample, sticker, cfg, vocab, options)
    return enc, collate([enc], [sticker.image])


def word_saliency(sample: DialogueSample, sticker: StickerRecord, params: dict[str, Tensor], cfg: ModelConfig,
                  vocab: Vocabulary, options: ScoringOptions = ScoringOptions()) -> SaliencyMap:
    """Norm of dL_main/d(input embedding row) for every dialogue token of a positive pair."""
    enc, inputs = _positive_inputs(sample, sticker, cfg, vocab, options)
    probe = clone_params(params)
    for p in probe.values():
        p.requires_grad = False
    out = forward(inputs, probe, cfg, retain_embeddings=True)
    loss = ad.cross_entropy(out.main_logits, [1])
    ad.backward(loss)
    grad = out.embedded.grad[0]
    positions = enc.context_positions
    scores = np.linalg.norm(grad[list(positions)].astype(np.float64), axis=-1)
    return SaliencyMap(sample.id, positions, tuple(vocab.tokens(enc.ids[p] for p in positions)),
                       scores, loss.item())


def saliency_csv(maps: Sequence[SaliencyMap]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("sample_id", "token_index", "token", "score"))
    for m in maps:
        for index, (tok, score) in enumerate(zip(m.tokens, m.scores)):
            writer.writerow([m.sample_id, index, tok, repr(float(score))])
    return buf.getvalue()


@dataclass(frozen=True)
class PerturbationProbe:
    sample_id: int
    top_position: int
    bottom_position: int
    top_change: float
    bottom_change: float

    @property
    def consistent(self) -> bool:
        return self.top_change > self.bottom_change


def perturbation_probe(sample: DialogueSample, sticker: StickerRecord, params: dict[str, Tensor],
                       cfg: ModelConfig, vocab: Vocabulary, eps: float = 1e-3,
                       options: ScoringOptions = ScoringOptions()) -> PerturbationProbe:
    """|change in L_main| after nudging the top- and bottom-saliency embedding rows by eps.

    Each row moves by eps along its own gradient direction, both signs are
    tried and the larger change kept.  Runs in 64-bit.
    """
    with ad.precision("float64"):
        p64 = clone_params(params, np.float64)
        smap = word_saliency(sample, sticker, p64, cfg, vocab, options)
        _, inputs = _positive_inputs(sample, sticker, cfg, vocab, options)
        top = smap.positions[int(np.argmax(smap.scores))]
        bottom = smap.positions[int(np.argmin(smap.scores))]

        probe = clone_params(p64)
        for p in probe.values():
            p.requires_grad = False
        out = forward(inputs, probe, cfg, retain_embeddings=True)
        base = ad.cross_entropy(out.main_logits, [1])
        ad.backward(base)
        grad = out.embedded.grad[0]

        def change(position: int) -> float:
            direction = grad[position]
            norm = np.linalg.norm(direction)
            unit = direction / norm if norm > 0 else np.eye(cfg.d_model)[0]
            best = 0.0
            with ad.no_grad():
                for sign in (1.0, -1.0):
                    offset = np.zeros((1, inputs.length, cfg.d_model))
                    offset[0, position] = sign * eps * unit
                    loss = ad.cross_entropy(forward(inputs, probe, cfg, input_offset=offset).main_logits, [1])
                    best = max(best, abs(loss.item() - base.item()))
            return best

        return PerturbationProbe(sample.id, top, bottom, change(top), change(bottom))


# diversity


@dataclass
class DiversityHistogram:
    sticker_ids: list[int]
    predicted: dict[int, int]
    ground_truth: dict[int, int]

    def coverage(self) -> float:
        """Fraction of stickers predicted top-1 at least once."""
        return sum(1 for s in self.sticker_ids if self.predicted[s]) / len(self.sticker_ids)


def diversity_from_rankings(rankings: Sequence[RankingResult], sticker_ids: Sequence[int]) -> DiversityHistogram:
    ids = sorted(sticker_ids)
    predicted = {s: 0 for s in ids}
    gt = {s: 0 for s in ids}
    for r in rankings:
        predicted[r.top1_id] += 1
        gt[r.gt_id] += 1
    return DiversityHistogram(ids, predicted, gt)


def prediction_diversity(samples: Sequence[DialogueSample], corpus: CorpusSplit, params: dict[str, Tensor],
                         cfg: ModelConfig, vocab: Vocabulary, options: ScoringOptions = ScoringOptions(),
                         jobs: int = 1) -> DiversityHistogram:
    rankings = rank_split(samples, corpus, params, cfg, vocab, "RALL", 0, options, jobs)
    return diversity_from_rankings(rankings, [s.id for s in corpus.stickers])


def diversity_csv(hist: DiversityHistogram) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("sticker_id", "pred_count", "gt_count"))
    for s in hist.sticker_ids:
        writer.writerow([s, hist.predicted[s], hist.ground_truth[s]])
    return buf.getvalue()
