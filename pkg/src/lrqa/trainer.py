"""Span-QA fine-tuning, masked-LM pretraining and span decoding."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import SPECIALS, Dataset, Feature, Tokenizer
from .metrics import evaluate
from .model import Model
from .optim import AdamWState, adamw_step
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

_NEG = -1e9


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass
class MLMConfig:
    mask_prob: float = 0.15
    batch_size: int = 128
    learning_rate: float = 3.125e-4
    epochs: int = 1


@dataclass
class TrainConfig:
    learning_rate: float = 3e-5
    batch_size: int = 4
    epochs: int = 10
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    max_answer_len: int = 30
    max_len: int = 384
    stride: int = 128
    mlm: MLMConfig = field(default_factory=MLMConfig)

    def validate(self) -> TrainConfig:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.max_answer_len < 1:
            raise ValueError("max_answer_len must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        mlm = MLMConfig(**d.pop("mlm", {}))
        return cls(mlm=mlm, **d)


@dataclass
class TrainRecord:
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch_eval: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list, compare=False)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "learning_rate"])
        for i, (loss, lr) in enumerate(zip(self.losses, self.learning_rates)):
            w.writerow([i, repr(loss), repr(lr)])
        return buf.getvalue()

    def summary_json(self) -> str:
        d = {
            "steps": len(self.losses),
            "epochs": len(self.epoch_losses),
            "epoch_losses": self.epoch_losses,
            "epoch_eval": self.epoch_eval,
            "final_loss": self.losses[-1] if self.losses else None,
        }
        return json.dumps(d, indent=1) + "\n"


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then linear decay to zero."""
    warmup = int(math.floor(warmup_fraction * total_steps))
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    remaining = max(1, total_steps - warmup)
    return base_lr * max(0.0, (total_steps - step) / remaining)


def _apply_update(model: Model, lr: float, state: AdamWState, weight_decay: float) -> None:
    params = {k: p.data for k, p in model.params.items()}
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    adamw_step(params, grads, state, lr, weight_decay=weight_decay)
    model.zero_grad()


def _check_finite(loss: Tensor, where: str) -> None:
    if not np.isfinite(loss.data).all():
        raise DivergenceError(f"non-finite loss at {where}; lower the learning rate")


# ---------------------------------------------------------------- QA


def collate(features: list[Feature], pad_id: int = 0):
    width = max(len(f.input_ids) for f in features)
    B = len(features)
    ids = np.full((B, width), pad_id, dtype=np.int64)
    types = np.zeros((B, width), dtype=np.int64)
    mask = np.zeros((B, width), dtype=np.int64)
    for i, f in enumerate(features):
        n = len(f.input_ids)
        ids[i, :n] = f.input_ids
        types[i, :n] = f.token_types
        mask[i, :n] = f.attention_mask
    return ids, types, mask


def qa_loss(start_logits: Tensor, end_logits: Tensor, starts, ends) -> Tensor:
    return T.cross_entropy(start_logits, starts) + T.cross_entropy(end_logits, ends)


def _masked_span_logits(model: Model, ids, types, mask, rng=None):
    start, end = model.forward_qa(ids, types, mask, rng)
    pad = Tensor(np.where(mask > 0, 0.0, _NEG))
    return start + pad, end + pad


class QASession:
    """Resumable fine-tuning state: model, optimizer moments, RNG streams, step count.

    ``total_epochs`` fixes the length of the learning-rate schedule.
    """

    def __init__(self, model: Model, train_features: list[Feature], config: TrainConfig,
                 total_epochs: int | None = None):
        config.validate()
        self.usable = [f for f in train_features if f.has_answer]
        if not self.usable:
            raise TrainingError("no training window contains its gold answer")
        self.model = model
        self.config = config
        self.total_epochs = config.epochs if total_epochs is None else total_epochs
        self.epochs_done = 0
        self.step = 0
        self.state = AdamWState()
        self.order_rng = stream(config.seed, "finetune-shuffle")
        self.drop_rng = stream(config.seed, "dropout")
        self.record = TrainRecord()

    def _total_steps(self, steps_per_epoch: int) -> int:
        return self.step + steps_per_epoch * max(1, self.total_epochs - self.epochs_done)

    def run_epoch(self, val: tuple[Dataset, list[Feature]] | None = None) -> None:
        cfg, model = self.config, self.model
        t0 = time.perf_counter()
        steps_per_epoch = math.ceil(len(self.usable) / cfg.batch_size)
        total = self._total_steps(steps_per_epoch)
        drop_rng = self.drop_rng if model.config.dropout > 0 else None
        order = self.order_rng.permutation(len(self.usable))
        losses = []
        for b in range(steps_per_epoch):
            batch = [self.usable[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            ids, types, mask = collate(batch)
            start, end = _masked_span_logits(model, ids, types, mask, drop_rng)
            loss = qa_loss(start, end, [f.start_position for f in batch], [f.end_position for f in batch])
            _check_finite(loss, f"epoch {self.epochs_done} step {self.step}")
            loss.backward()
            lr = lr_at(self.step, total, cfg.learning_rate, cfg.warmup_fraction)
            _apply_update(model, lr, self.state, cfg.weight_decay)
            self.record.losses.append(loss.item())
            self.record.learning_rates.append(lr)
            losses.append(loss.item())
            self.step += 1
        self.record.epoch_losses.append(float(np.mean(losses)))
        if val is not None:
            report = self.evaluate(val)
            self.record.epoch_eval.append(
                {"epoch": self.epochs_done, "exact_match": report.exact_match, "f1": report.f1})
        self.epochs_done += 1
        self.record.epoch_seconds.append(time.perf_counter() - t0)

    def evaluate(self, val: tuple[Dataset, list[Feature]]):
        dataset, feats = val
        preds = predict_spans(self.model, feats, self.config.max_answer_len, example_ids=dataset.question_ids())
        return evaluate(preds, dataset)


def finetune_qa(model: Model, train_features: list[Feature], val: tuple[Dataset, list[Feature]] | None = None,
                config: TrainConfig = TrainConfig()) -> tuple[Model, TrainRecord]:
    """Train the span head and encoder jointly; updates ``model`` in place."""
    session = QASession(model, train_features, config)
    for _ in range(config.epochs):
        session.run_epoch(val)
    return model, session.record


def best_span(start_logits: np.ndarray, end_logits: np.ndarray, valid: np.ndarray,
              max_answer_len: int = 30) -> tuple[int, int, float] | None:
    """Highest ``start[s] + end[e]`` with ``s <= e < s + max_answer_len`` over valid positions.

    Ties resolve to the smallest ``s``, then the smallest ``e``.
    """
    n = len(start_logits)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return None
    scores = start_logits[:, None] + end_logits[None, :]
    s_idx, e_idx = np.indices((n, n))
    ok = (e_idx >= s_idx) & (e_idx - s_idx < max_answer_len) & valid[:, None] & valid[None, :]
    scores = np.where(ok, scores, -np.inf)
    flat = int(np.argmax(scores))
    s, e = divmod(flat, n)
    return s, e, float(scores[s, e])


def predict_spans(model: Model, features: list[Feature], max_answer_len: int = 30,
                  batch_size: int = 32, example_ids: list[str] | None = None) -> dict[str, str]:
    """Decode one answer string per example, keeping its best-scoring window."""
    best: dict[str, tuple[float, str]] = {}
    for i in range(0, len(features), batch_size):
        batch = features[i:i + batch_size]
        ids, types, mask = collate(batch)
        start, end = model.forward_qa(ids, types, mask)
        for j, f in enumerate(batch):
            n = len(f.input_ids)
            valid = np.array([o is not None for o in f.offsets])
            span = best_span(start.data[j, :n], end.data[j, :n], valid, max_answer_len)
            if span is None:
                log.warning("window %d of %s has no context positions; skipped", f.window_index, f.example_id)
                continue
            s, e, score = span
            text = f.context[f.offsets[s][0]:f.offsets[e][1]]
            if f.example_id not in best or score > best[f.example_id][0]:
                best[f.example_id] = (score, text)
    preds = {k: v[1] for k, v in best.items()}
    for eid in example_ids or []:
        if eid not in preds:
            log.warning("example %s has no windows; predicting the empty answer", eid)
            preds[eid] = ""
    return preds


# ---------------------------------------------------------------- MLM


def mask_tokens(seq: np.ndarray, special: np.ndarray, tokenizer_size: int, mask_id: int,
                mask_prob: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Select maskable positions; 80% become ``[MASK]``, 10% a random token, 10% stay.

    Returns the corrupted ids and a boolean array of selected positions.
    """
    selected = (rng.random(seq.shape) < mask_prob) & ~special
    roll = rng.random(seq.shape)
    randoms = rng.integers(len(SPECIALS), max(len(SPECIALS) + 1, tokenizer_size), size=seq.shape)
    out = seq.copy()
    out[selected & (roll < 0.8)] = mask_id
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    out[swap] = randoms[swap]
    return out, selected


def encode_corpus(corpus: list[str], tokenizer: Tokenizer, max_positions: int) -> list[list[int]]:
    seqs = []
    for line in corpus:
        ids = tokenizer.encode(line).ids[: max_positions - 2]
        if ids:
            seqs.append([tokenizer.cls_id] + ids + [tokenizer.sep_id])
    return seqs


def pretrain_mlm(model: Model, corpus: list[str], tokenizer: Tokenizer,
                 config: TrainConfig = TrainConfig()) -> tuple[Model, TrainRecord]:
    """Masked-LM training over ``corpus`` lines (one sequence per line)."""
    mlm = config.mlm
    seqs = encode_corpus(corpus, tokenizer, model.config.max_positions)
    if len(seqs) < mlm.batch_size:
        raise TrainingError(f"corpus has {len(seqs)} sequences, fewer than one batch of {mlm.batch_size}")
    steps_per_epoch = len(seqs) // mlm.batch_size
    total = steps_per_epoch * mlm.epochs
    order_rng = stream(config.seed, "mlm-order")
    mask_rng = stream(config.seed, "mlm-mask")
    drop_rng = stream(config.seed, "dropout") if model.config.dropout > 0 else None
    special_ids = np.array([tokenizer.token_to_id[s] for s in SPECIALS])
    state = AdamWState()
    record = TrainRecord()
    step = 0
    for epoch in range(mlm.epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(seqs))
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = [seqs[i] for i in order[b * mlm.batch_size:(b + 1) * mlm.batch_size]]
            width = max(len(s) for s in batch)
            ids = np.full((len(batch), width), tokenizer.pad_id, dtype=np.int64)
            mask = np.zeros_like(ids)
            for i, s in enumerate(batch):
                ids[i, :len(s)] = s
                mask[i, :len(s)] = 1
            corrupted, selected = mask_tokens(ids, np.isin(ids, special_ids), len(tokenizer),
                                              tokenizer.mask_id, mlm.mask_prob, mask_rng)
            lr = lr_at(step, total, mlm.learning_rate, config.warmup_fraction)
            step += 1
            if not selected.any():
                record.losses.append(0.0)
                record.learning_rates.append(lr)
                epoch_losses.append(0.0)
                continue
            hidden = model.encode(model.embed(corrupted, rng=drop_rng), mask, drop_rng)
            logits = model.mlm_logits(hidden)
            rows = np.flatnonzero(selected.reshape(-1))
            flat = logits.reshape(-1, model.config.vocab_size)
            loss = T.cross_entropy(T.take_rows(flat, rows), ids.reshape(-1)[rows])
            _check_finite(loss, f"mlm epoch {epoch} step {step}")
            loss.backward()
            _apply_update(model, lr, state, config.weight_decay)
            record.losses.append(loss.item())
            record.learning_rates.append(lr)
            epoch_losses.append(loss.item())
        record.epoch_losses.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
        record.epoch_seconds.append(time.perf_counter() - t0)
    return model, record


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(config, **changes)
