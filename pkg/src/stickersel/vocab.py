"""Whitespace vocabulary and the encoder input layout.

Layout of one encoded pair::

    [CLS] u1 [SEP] u2 [SEP] ... uN [SEP] s1 ... sL [SEP] [IMG]

``s1..sL`` is the fixed-length semantic region.  It holds the sticker's label
tokens (visible mode), ``[MASK]`` tokens (masked mode) or ``[PAD]`` when the
sticker has no label or the region is unused.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

PAD, CLS, SEP, MASK, IMG, UNK = 0, 1, 2, 3, 4, 5
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[IMG]", "[UNK]")
N_SPECIAL = len(SPECIAL_TOKENS)

SEG_TEXT, SEG_SEMANTIC, SEG_IMAGE = 0, 1, 2


class SampleTooLongError(ValueError):
    pass


class SemanticMode(str, Enum):
    VISIBLE = "visible"
    MASKED = "masked"
    EMPTY = "empty"


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def ids(self, tokens: Iterable[str]) -> list[int]:
        """Text token ids; unknown words and literal special-token strings map to [UNK]."""
        out = []
        for t in tokens:
            i = self.token_to_id.get(t, UNK)
            out.append(UNK if i < N_SPECIAL else i)
        return out

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Tokens with count >= ``min_count``, ordered by (count desc, token asc)."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for text in corpus for tok in text.split())
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


@dataclass(frozen=True)
class EncodedSample:
    ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    context_positions: tuple[int, ...]
    semantic_span: range
    image_index: int
    n_utterances: int

    def __len__(self) -> int:
        return len(self.ids)


def encode(utterances: Sequence[str], semantic_label: str | None, semantic_slot_len: int,
           max_len: int, vocab: Vocabulary,
           mode: SemanticMode = SemanticMode.VISIBLE) -> EncodedSample:
    """Lay out one dialogue/sticker pair; drops whole utterances oldest-first to fit."""
    if semantic_slot_len < 1:
        raise ValueError("semantic_slot_len must be >= 1")
    if not utterances:
        raise ValueError("at least one utterance is required")
    tokenised = [vocab.ids(u.split()) for u in utterances]
    fixed = 1 + semantic_slot_len + 2  # [CLS] + slots + [SEP] + [IMG]
    budget = max_len - fixed
    kept: list[list[int]] = []
    used = 0
    for utt in reversed(tokenised):
        cost = len(utt) + 1
        if used + cost > budget:
            break
        kept.append(utt)
        used += cost
    if not kept:
        raise SampleTooLongError(
            f"last utterance needs {len(tokenised[-1]) + 1 + fixed} positions, max_len is {max_len}")
    kept.reverse()

    ids = [CLS]
    context_positions = []
    for utt in kept:
        for tok in utt:
            context_positions.append(len(ids))
            ids.append(tok)
        ids.append(SEP)

    if semantic_label is None or mode == SemanticMode.EMPTY:
        slots = [PAD] * semantic_slot_len
    elif mode == SemanticMode.MASKED:
        slots = [MASK] * semantic_slot_len
    else:
        slots = semantic_targets(semantic_label, semantic_slot_len, vocab)
    sem_start = len(ids)
    ids.extend(slots)
    ids.append(SEP)
    ids.append(IMG)

    segments = [SEG_TEXT] * len(ids)
    for i in range(sem_start, sem_start + semantic_slot_len + 1):
        segments[i] = SEG_SEMANTIC
    segments[-1] = SEG_IMAGE
    return EncodedSample(
        ids=tuple(ids),
        segment_ids=tuple(segments),
        context_positions=tuple(context_positions),
        semantic_span=range(sem_start, sem_start + semantic_slot_len),
        image_index=len(ids) - 1,
        n_utterances=len(kept),
    )


def semantic_targets(label: str, slot_len: int, vocab: Vocabulary) -> list[int]:
    """Label token ids truncated or right-padded with [PAD] to ``slot_len``."""
    ids = vocab.ids(label.split())[:slot_len]
    return ids + [PAD] * (slot_len - len(ids))


def decode(sample: EncodedSample, vocab: Vocabulary) -> list[str]:
    """Recover the kept utterances from an encoded sample."""
    utterances: list[list[str]] = [[]]
    positions = set(sample.context_positions)
    end = sample.semantic_span.start
    for i in range(1, end):
        if i in positions:
            utterances[-1].append(vocab.id_to_token[sample.ids[i]])
        elif sample.ids[i] == SEP and i < end - 1:
            utterances.append([])
    return [" ".join(u) for u in utterances]
