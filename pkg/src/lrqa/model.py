"""Compact ALBERT-style encoder with span-extraction and masked-LM heads.

The token table is factorized (``V x E`` lookup followed by an ``E -> H``
projection) and, when ``share_layers`` is set, a single physical set of
transformer-layer weights is applied ``layers`` times.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import Tensor

MAGIC = b"LRQA1"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_MASK_LOGIT = -1e9


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 32005
    embedding_size: int = 128
    hidden_size: int = 768
    layers: int = 12
    heads: int = 12
    intermediate_size: int = 3072
    max_positions: int = 512
    share_layers: bool = True
    dropout: float = 0.1
    type_vocab_size: int = 2

    def validate(self) -> EncoderConfig:
        for name in ("vocab_size", "embedding_size", "hidden_size", "layers", "heads",
                     "intermediate_size", "max_positions", "type_vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_size % self.heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.embedding_size > self.hidden_size:
            warnings.warn(
                f"embedding_size {self.embedding_size} exceeds hidden_size {self.hidden_size}; "
                "the embedding is not factorized",
                stacklevel=2,
            )
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


FRALBERT_BASE = EncoderConfig()
BERT_BASE_SHAPED = EncoderConfig(embedding_size=768, share_layers=False)

_LAYER_PARTS = ("query", "key", "value", "attn_out")


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, derived from the config alone."""
    V, E, H, F = config.vocab_size, config.embedding_size, config.hidden_size, config.intermediate_size
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (V, E),
        "embeddings.position": (config.max_positions, E),
        "embeddings.type": (config.type_vocab_size, E),
        "embeddings.norm.gain": (E,),
        "embeddings.norm.bias": (E,),
        "embeddings.projection.weight": (E, H),
        "embeddings.projection.bias": (H,),
    }
    for prefix in _layer_prefixes(config):
        for part in _LAYER_PARTS:
            shapes[f"{prefix}.{part}.weight"] = (H, H)
            # a key bias shifts every score of a query equally, so softmax ignores it
            if part != "key":
                shapes[f"{prefix}.{part}.bias"] = (H,)
        shapes[f"{prefix}.attn_norm.gain"] = (H,)
        shapes[f"{prefix}.attn_norm.bias"] = (H,)
        shapes[f"{prefix}.ffn_in.weight"] = (H, F)
        shapes[f"{prefix}.ffn_in.bias"] = (F,)
        shapes[f"{prefix}.ffn_out.weight"] = (F, H)
        shapes[f"{prefix}.ffn_out.bias"] = (H,)
        shapes[f"{prefix}.ffn_norm.gain"] = (H,)
        shapes[f"{prefix}.ffn_norm.bias"] = (H,)
    shapes.update({
        "mlm.dense.weight": (H, E),
        "mlm.dense.bias": (E,),
        "mlm.norm.gain": (E,),
        "mlm.norm.bias": (E,),
        "mlm.output_bias": (V,),
        "qa.start": (H,),
        "qa.end": (H,),
    })
    return shapes


def _layer_prefixes(config: EncoderConfig) -> list[str]:
    if config.share_layers:
        return ["layer.shared"]
    return [f"layer.{i}" for i in range(config.layers)]


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form parameter count."""
    V, E, H, F = config.vocab_size, config.embedding_size, config.hidden_size, config.intermediate_size
    embeddings = (V + config.max_positions + config.type_vocab_size) * E + 2 * E + E * H + H
    layer = 4 * H * H + 3 * H + 2 * H + (H * F + F) + (F * H + H) + 2 * H
    n_layers = 1 if config.share_layers else config.layers
    mlm = H * E + E + 2 * E + V
    qa = 2 * H
    return embeddings + n_layers * layer + mlm + qa


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Model:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- parameter management

    def layer_params(self, index: int) -> dict[str, Tensor]:
        prefix = "layer.shared" if self.config.share_layers else f"layer.{index}"
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("state dict keys do not match model parameters")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(arr, copy=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> Model:
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                   for k, v in self.params.items()})

    def with_dropout(self, dropout: float) -> Model:
        """Same parameter objects under a config with a different dropout rate."""
        cfg = dataclasses.replace(self.config, dropout=dropout).validate()
        return Model(cfg, self.params)

    # -- forward pieces

    def embed(self, token_ids, positions=None, types=None, rng: np.random.Generator | None = None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, Tn = ids.shape
        cfg = self.config
        if Tn > cfg.max_positions:
            raise IndexError(f"sequence length {Tn} exceeds max_positions {cfg.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range for vocab_size {cfg.vocab_size}")
        if positions is None:
            positions = np.broadcast_to(np.arange(Tn), (B, Tn))
        positions = np.asarray(positions, dtype=np.int64).reshape(B, Tn)
        if positions.size and (positions.min() < 0 or positions.max() >= cfg.max_positions):
            raise IndexError(f"position out of range for max_positions {cfg.max_positions}")
        if types is None:
            types = np.zeros((B, Tn), dtype=np.int64)
        types = np.asarray(types, dtype=np.int64).reshape(B, Tn)
        p = self.params
        x = T.take_rows(p["embeddings.token"], ids)
        x = x + T.take_rows(p["embeddings.position"], positions)
        x = x + T.take_rows(p["embeddings.type"], types)
        x = T.layer_norm(x, p["embeddings.norm.gain"], p["embeddings.norm.bias"])
        x = T.dropout(x, cfg.dropout, rng)
        return x @ p["embeddings.projection.weight"] + p["embeddings.projection.bias"]

    def encode(self, hidden: Tensor, attention_mask=None, rng: np.random.Generator | None = None,
               return_attention: bool = False):
        B, Tn, H = hidden.shape
        if attention_mask is None:
            attention_mask = np.ones((B, Tn))
        mask = np.asarray(attention_mask)
        if mask.shape != (B, Tn):
            raise ValueError(f"attention mask shape {mask.shape} does not match {(B, Tn)}")
        bias = Tensor(np.where(mask > 0, 0.0, _MASK_LOGIT)[:, None, None, :])
        attentions = []
        for i in range(self.config.layers):
            hidden, probs = self._layer(hidden, bias, self.layer_params(i), rng)
            attentions.append(probs)
        return (hidden, attentions) if return_attention else hidden

    def _layer(self, h: Tensor, mask_bias: Tensor, w: dict[str, Tensor], rng):
        cfg = self.config
        B, Tn, H = h.shape
        nh = cfg.heads
        d = H // nh

        def heads(x: Tensor) -> Tensor:
            return x.reshape(B, Tn, nh, d).transpose(0, 2, 1, 3)

        q = heads(h @ w["query.weight"] + w["query.bias"])
        k = heads(h @ w["key.weight"])
        v = heads(h @ w["value.weight"] + w["value.bias"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)) + mask_bias
        probs = T.softmax(scores, axis=-1)
        ctx = T.dropout(probs, cfg.dropout, rng) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tn, H)
        attn = T.dropout(ctx @ w["attn_out.weight"] + w["attn_out.bias"], cfg.dropout, rng)
        h = T.layer_norm(h + attn, w["attn_norm.gain"], w["attn_norm.bias"])
        ff = T.gelu(h @ w["ffn_in.weight"] + w["ffn_in.bias"])
        ff = T.dropout(ff @ w["ffn_out.weight"] + w["ffn_out.bias"], cfg.dropout, rng)
        h = T.layer_norm(h + ff, w["ffn_norm.gain"], w["ffn_norm.bias"])
        return h, probs.data

    def qa_span_logits(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        B, Tn, H = hidden.shape
        start = (hidden @ self.params["qa.start"].reshape(H, 1)).reshape(B, Tn)
        end = (hidden @ self.params["qa.end"].reshape(H, 1)).reshape(B, Tn)
        return start, end

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        p = self.params
        x = T.gelu(hidden @ p["mlm.dense.weight"] + p["mlm.dense.bias"])
        x = T.layer_norm(x, p["mlm.norm.gain"], p["mlm.norm.bias"])
        return x @ p["embeddings.token"].transpose() + p["mlm.output_bias"]

    def forward_qa(self, input_ids, token_types=None, attention_mask=None, rng=None):
        hidden = self.encode(self.embed(input_ids, types=token_types, rng=rng), attention_mask, rng)
        return self.qa_span_logits(hidden)


def build_model(config: EncoderConfig, seed: int = 0) -> Model:
    """Initialize every parameter deterministically from ``seed``."""
    config.validate()
    rng = stream(seed, "init")
    dtype = T.get_default_dtype()
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = _truncated_normal(rng, shape, 0.02)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return Model(config, params)


# ---------------------------------------------------------------- checkpoints


def _canonical_json(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: Model, dtype=None) -> bytes:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = _canonical_json(model.config.to_dict())
    chunks += [struct.pack("<I", len(cfg)), cfg]
    for name in parameter_shapes(model.config):
        arr = model.params[name].data
        target = np.dtype(dtype or arr.dtype).newbyteorder("<")
        if target not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported storage dtype {target}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[target], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=target).tobytes())
    return b"".join(chunks)


def save_checkpoint(model: Model, path, dtype=None) -> float:
    """Write ``model`` to ``path``; returns the file size in MB (10**6 bytes).

    ``dtype`` selects the storage precision (``"float32"`` or ``"float64"``);
    by default each parameter keeps its in-memory precision.
    """
    payload = checkpoint_bytes(model, dtype)
    Path(path).write_bytes(payload)
    return len(payload) / 1e6


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("corrupt checkpoint: unexpected end of file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic string")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {FORMAT_VERSION})")
    (cfg_len,) = r.unpack("<I")
    try:
        config = EncoderConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: bad config ({exc})") from exc
    expected = parameter_shapes(config)
    params: dict[str, Tensor] = {}
    while r.pos < len(r.buf):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"corrupt checkpoint: unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{ndim}I")
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        if name not in expected:
            raise CheckpointError(f"checkpoint parameter {name!r} not defined by its config")
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"shape {tuple(shape)} for {name} disagrees with config {expected[name]}")
        params[name] = Tensor(arr.astype(dtype.newbyteorder("=")), requires_grad=True, name=name,
                              dtype=arr.dtype.newbyteorder("="))
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"corrupt checkpoint: missing parameters {sorted(missing)[:3]}")
    return Model(config, {k: params[k] for k in expected})
