"""Single-stream multimodal encoder with four task heads.

Text tokens and one sticker embedding share a sequence.  The sticker image is
cut into non-overlapping patches, projected, mean-pooled and layer-normed into
one vector that replaces the token embedding at the ``[IMG]`` position.  Blocks
are pre-norm (LN -> attention -> residual, LN -> FFN -> residual) with a final
layer norm.  Heads:

* main     -- [CLS] hidden -> 2 logits (sticker fits / does not fit)
* mlm      -- any hidden -> vocabulary logits
* emotion  -- hidden at the [IMG] position -> emotion logits
* semantic -- hiddens of the semantic slots -> vocabulary logits (shares mlm)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .rng import Rng
from .vocab import PAD, EncodedSample

MAGIC = b"STKM"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class CheckpointError(ValueError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 96
    n_emotions: int = 52
    semantic_slot_len: int = 6
    image_size: int = 16
    patch_size: int = 4
    image_encoder_frozen: bool = False
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.vocab_size < 6:
            raise ValueError("vocab_size must be >= 6")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError("d_model must be a positive multiple of n_heads")
        if self.max_len < self.semantic_slot_len + 4:
            raise ValueError("max_len must be >= semantic_slot_len + 4")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if min(self.n_layers, self.ffn_dim, self.n_emotions, self.semantic_slot_len) < 1:
            raise ValueError("layer/ffn/emotion/slot sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size


IMAGE_ENCODER_PARAMS = ("image.proj.weight", "image.proj.bias", "image.ln.gain", "image.ln.bias")


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) for every parameter, in canonical order.

    kind is one of ``table``, ``weight``, ``bias``, ``gain``.
    """
    d, V = cfg.d_model, cfg.vocab_size
    specs = [
        ("embed.token", (V, d), "table"),
        ("embed.position", (cfg.max_len, d), "table"),
        ("embed.segment", (3, d), "table"),
        ("image.proj.weight", (cfg.patch_pixels, d), "weight"),
        ("image.proj.bias", (d,), "bias"),
        ("image.ln.gain", (d,), "gain"),
        ("image.ln.bias", (d,), "bias"),
    ]
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        specs += [(f"{p}.ln1.gain", (d,), "gain"), (f"{p}.ln1.bias", (d,), "bias")]
        for proj in ("q", "k", "v", "o"):
            specs.append((f"{p}.attn.{proj}.weight", (d, d), "weight"))
            # a key bias shifts every score of a query equally, so it would never get a gradient
            if proj != "k":
                specs.append((f"{p}.attn.{proj}.bias", (d,), "bias"))
        specs += [
            (f"{p}.ln2.gain", (d,), "gain"), (f"{p}.ln2.bias", (d,), "bias"),
            (f"{p}.ffn.in.weight", (d, cfg.ffn_dim), "weight"), (f"{p}.ffn.in.bias", (cfg.ffn_dim,), "bias"),
            (f"{p}.ffn.out.weight", (cfg.ffn_dim, d), "weight"), (f"{p}.ffn.out.bias", (d,), "bias"),
        ]
    specs += [
        ("final_ln.gain", (d,), "gain"), ("final_ln.bias", (d,), "bias"),
        ("head.main.weight", (d, 2), "weight"), ("head.main.bias", (2,), "bias"),
        ("head.mlm.weight", (d, V), "weight"), ("head.mlm.bias", (V,), "bias"),
        ("head.emotion.weight", (d, cfg.n_emotions), "weight"), ("head.emotion.bias", (cfg.n_emotions,), "bias"),
    ]
    return specs


def decayed_param_names(cfg: ModelConfig) -> set[str]:
    """Weight matrices that receive decoupled weight decay."""
    return {name for name, _, kind in param_specs(cfg) if kind == "weight"}


def init_params(cfg: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    """N(0, 0.02) for matrices and tables, zeros for biases, ones for gains."""
    cfg.validate()
    params = {}
    for name, shape, kind in param_specs(cfg):
        if kind in ("weight", "table"):
            data = rng.normal(shape, 0.0, INIT_STD)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        trainable = not (cfg.image_encoder_frozen and name in IMAGE_ENCODER_PARAMS)
        params[name] = Tensor(data, requires_grad=trainable)
    return params


def clone_params(params: dict[str, Tensor], dtype=None) -> dict[str, Tensor]:
    out = {}
    for name, t in params.items():
        data = t.data.copy() if dtype is None else t.data.astype(dtype)
        out[name] = Tensor(data, requires_grad=t.requires_grad)
    return out


# inputs


@dataclass
class ModelInputs:
    ids: np.ndarray            # [B, L] int64
    segment_ids: np.ndarray    # [B, L] int64
    images: np.ndarray         # [B, H, W]
    image_index: np.ndarray    # [B]
    semantic_start: np.ndarray  # [B]

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def collate(samples: Sequence[EncodedSample], images: Sequence[np.ndarray],
            pad_to: int | None = None) -> ModelInputs:
    """Right-pad encoded samples with [PAD] into one batch."""
    if len(samples) != len(images):
        raise ValueError("one image per sample is required")
    length = max(len(s) for s in samples)
    if pad_to is not None:
        length = max(length, pad_to)
    ids = np.full((len(samples), length), PAD, dtype=np.int64)
    segs = np.zeros((len(samples), length), dtype=np.int64)
    for row, s in enumerate(samples):
        ids[row, :len(s)] = s.ids
        segs[row, :len(s)] = s.segment_ids
    return ModelInputs(
        ids=ids, segment_ids=segs,
        images=np.stack([np.asarray(im) for im in images]),
        image_index=np.array([s.image_index for s in samples], dtype=np.int64),
        semantic_start=np.array([s.semantic_span.start for s in samples], dtype=np.int64),
    )


# forward


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, H, W] -> [B, n_patches, patch_size**2], row-major patches."""
    b, h, w = images.shape
    p = patch_size
    return (images.reshape(b, h // p, p, w // p, p)
            .transpose(0, 1, 3, 2, 4)
            .reshape(b, (h // p) * (w // p), p * p))


def encode_image(images: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig,
                 pre_norm: bool = False) -> Tensor:
    """[B, H, W] images -> [B, d] sticker embeddings."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image shape {images.shape[1:]} does not match ({cfg.image_size}, {cfg.image_size})")
    patches = Tensor(patchify(images, cfg.patch_size))
    projected = ad.linear(patches, params["image.proj.weight"], params["image.proj.bias"])
    pooled = ad.scale(ad.tensor_sum(projected, axis=1), 1.0 / patches.shape[1])
    if pre_norm:
        return pooled
    return ad.layer_norm(pooled, params["image.ln.gain"], params["image.ln.bias"], cfg.ln_eps)


def embed_inputs(inputs: ModelInputs, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Token (or sticker) + position + segment embeddings, [B, L, d]."""
    b, length = inputs.ids.shape
    if length > cfg.max_len:
        raise DimensionError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    tokens = ad.embedding_lookup(params["embed.token"], inputs.ids)
    image_rows = np.zeros((b, length, 1))
    image_rows[np.arange(b), inputs.image_index, 0] = 1.0
    sticker = encode_image(inputs.images, params, cfg).reshape(b, 1, cfg.d_model)
    x = tokens * Tensor(1.0 - image_rows) + sticker * Tensor(image_rows)
    x = x + ad.gather_rows(params["embed.position"], np.arange(length))
    return x + ad.embedding_lookup(params["embed.segment"], inputs.segment_ids)


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: ModelConfig,
               key_bias: np.ndarray) -> Tensor:
    b, length, d = x.shape
    h = cfg.n_heads
    dh = d // h

    def heads(name):
        y = ad.linear(x, params[f"{prefix}.{name}.weight"], params.get(f"{prefix}.{name}.bias"))
        return y.reshape(b, length, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ad.scale(q @ k.swapaxes(-1, -2), 1.0 / math.sqrt(dh)) + Tensor(key_bias)
    weights = ad.softmax(scores)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return ad.linear(context, params[f"{prefix}.o.weight"], params[f"{prefix}.o.bias"])


def encoder(x: Tensor, valid: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    key_bias = ad.masked_key_bias(valid)[:, None, None, :]
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        h = ad.layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], cfg.ln_eps)
        x = x + _attention(h, params, f"{p}.attn", cfg, key_bias)
        h = ad.layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], cfg.ln_eps)
        h = ad.gelu(ad.linear(h, params[f"{p}.ffn.in.weight"], params[f"{p}.ffn.in.bias"]))
        x = x + ad.linear(h, params[f"{p}.ffn.out.weight"], params[f"{p}.ffn.out.bias"])
    return ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], cfg.ln_eps)


@dataclass
class ForwardOutput:
    hidden: Tensor           # [B, L, d]
    main_logits: Tensor      # [B, 2]
    emotion_logits: Tensor   # [B, n_emotions]
    embedded: Tensor         # [B, L, d] encoder input
    inputs: ModelInputs
    params: dict
    cfg: ModelConfig

    def _flat(self) -> Tensor:
        b, length, d = self.hidden.shape
        return self.hidden.reshape(b * length, d)

    def mlm_logits(self, rows: Sequence[int], positions: Sequence[int]) -> Tensor:
        """Vocabulary logits at (row, position) pairs, [n, V]."""
        flat = np.asarray(rows, dtype=np.int64) * self.inputs.length + np.asarray(positions, dtype=np.int64)
        h = ad.gather_rows(self._flat(), flat)
        return ad.linear(h, self.params["head.mlm.weight"], self.params["head.mlm.bias"])

    def semantic_logits(self, rows: Sequence[int]) -> Tensor:
        """Vocabulary logits over the semantic slots of ``rows``, [n, slot_len, V]."""
        rows = np.asarray(rows, dtype=np.int64)
        slot = self.cfg.semantic_slot_len
        positions = self.inputs.semantic_start[rows][:, None] + np.arange(slot)[None, :]
        logits = self.mlm_logits(np.repeat(rows, slot), positions.reshape(-1))
        return logits.reshape(len(rows), slot, self.cfg.vocab_size)


def forward(inputs: ModelInputs, params: dict[str, Tensor], cfg: ModelConfig,
            retain_embeddings: bool = False, input_offset: np.ndarray | None = None) -> ForwardOutput:
    """Run the encoder and the main/emotion heads.

    ``input_offset`` ([B, L, d]) is added to the embedded input; the saliency
    probes use it to nudge single token rows.
    """
    x = embed_inputs(inputs, params, cfg)
    if input_offset is not None:
        x = x + Tensor(input_offset)
    if retain_embeddings:
        # a gradient root even when every parameter is frozen
        x.requires_grad = True
        x.retain_grad()
    valid = inputs.ids != PAD
    hidden = encoder(x, valid, params, cfg)
    b, length, d = hidden.shape
    flat = hidden.reshape(b * length, d)
    cls_rows = ad.gather_rows(flat, np.arange(b) * length)
    img_rows = ad.gather_rows(flat, np.arange(b) * length + inputs.image_index)
    main = ad.linear(cls_rows, params["head.main.weight"], params["head.main.bias"])
    emotion = ad.linear(img_rows, params["head.emotion.weight"], params["head.emotion.bias"])
    return ForwardOutput(hidden=hidden, main_logits=main, emotion_logits=emotion, embedded=x,
                         inputs=inputs, params=params, cfg=cfg)


def match_probability(main_logits) -> np.ndarray | float:
    """softmax(main_logits)[..., 1]: probability the sticker fits."""
    logits = main_logits.data if isinstance(main_logits, Tensor) else np.asarray(main_logits)
    logits = logits.astype(np.float64)
    # softmax over two classes is a logistic of the logit gap
    prob = 0.5 * (1.0 + np.tanh(0.5 * (logits[..., 1] - logits[..., 0])))
    return float(prob) if prob.ndim == 0 else prob


# checkpoints


def write_records(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write the STKM container: magic, version, JSON header, tensor records."""
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob]
    for name, data in arrays.items():
        raw = name.encode("utf-8")
        shape = np.shape(data)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_records(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, blob_len = struct.unpack_from("<II", buf, 4)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[12:12 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    records = {}
    offset = 12 + blob_len
    try:
        while offset < len(buf):
            (n,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            name = buf[offset:offset + n].decode("utf-8")
            offset += n
            (rank,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", buf, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if offset + 4 * count > len(buf):
                raise CheckpointError(f"{path}: truncated tensor record {name!r}")
            records[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).copy()
            offset += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    return header, records


def save_checkpoint(path: str | Path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    write_records(path, cfg.to_dict(), {name: t.data for name, t in params.items()})


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None
                    ) -> tuple[ModelConfig, dict[str, Tensor]]:
    """Read a checkpoint and validate every tensor shape against its config."""
    header, records = read_records(path)
    try:
        cfg = ModelConfig.from_dict(header)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from exc
    target = expected if expected is not None else cfg
    params = {}
    for name, shape, _ in param_specs(target):
        if name not in records:
            raise CheckpointMismatchError(f"{path}: missing tensor {name}")
        if records[name].shape != shape:
            raise CheckpointMismatchError(
                f"{path}: tensor {name} has shape {records[name].shape}, expected {shape}")
        trainable = not (target.image_encoder_frozen and name in IMAGE_ENCODER_PARAMS)
        params[name] = Tensor(records[name], requires_grad=trainable)
    extra = set(records) - set(params)
    if extra:
        raise CheckpointMismatchError(f"{path}: unexpected tensors {sorted(extra)}")
    if expected is not None and expected != cfg:
        diffs = [f.name for f in fields(ModelConfig) if getattr(cfg, f.name) != getattr(expected, f.name)]
        raise CheckpointMismatchError(f"{path}: config differs in {diffs}")
    return cfg, params
