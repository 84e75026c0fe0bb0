"""Exact-match and token-F1 scoring with French answer normalization."""

from __future__ import annotations

import json
import logging
import string
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field

from .data import Dataset

log = logging.getLogger(__name__)

FRENCH_DETERMINERS = frozenset({"le", "la", "les", "l'", "du", "des", "au", "aux", "un", "une"})
ENGLISH_ARTICLES = frozenset({"a", "an", "the"})
_APOSTROPHES = "'’"


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P") or ch in string.punctuation


def _split_elisions(token: str) -> list[str]:
    pieces, cur = [], ""
    for ch in token:
        cur += ch
        if ch in _APOSTROPHES:
            pieces.append(cur[:-1] + "'")
            cur = ""
    if cur:
        pieces.append(cur)
    return pieces


def normalize_answer(text: str, determiners=FRENCH_DETERMINERS) -> str:
    """Lowercase, drop determiners (including elided ``l'``) and punctuation."""
    tokens = []
    for tok in text.lower().split():
        tokens.extend(p for p in _split_elisions(tok) if p not in determiners)
    stripped = "".join(" " if _is_punct(ch) else ch for ch in " ".join(tokens))
    return " ".join(t for t in stripped.split() if t not in determiners)


def _require_golds(golds) -> None:
    if not golds:
        raise ValueError("at least one gold answer is required")


def exact_match(prediction: str, golds: list[str], determiners=FRENCH_DETERMINERS) -> int:
    _require_golds(golds)
    pred = normalize_answer(prediction, determiners)
    return int(any(pred == normalize_answer(g, determiners) for g in golds))


def _token_f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, golds: list[str], determiners=FRENCH_DETERMINERS) -> float:
    _require_golds(golds)
    pred = normalize_answer(prediction, determiners).split()
    return max(_token_f1(pred, normalize_answer(g, determiners).split()) for g in golds)


@dataclass
class ExampleScore:
    id: str
    em: int
    f1: float


@dataclass
class EvalReport:
    exact_match: float
    f1: float
    per_example: list[ExampleScore] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, indent=1) + "\n"

    def to_text(self) -> str:
        lines = [f"F1 / EM: {self.f1:.1f} / {self.exact_match:.1f}",
                 f"examples: {len(self.per_example)}"]
        if self.missing:
            lines.append(f"missing predictions: {len(self.missing)}")
        return "\n".join(lines) + "\n"


def evaluate(predictions: dict[str, str], dataset: Dataset, determiners=FRENCH_DETERMINERS) -> EvalReport:
    """Score every question of ``dataset``; missing predictions score zero."""
    scores, missing = [], []
    for _, qa in dataset.examples():
        golds = [a.text for a in qa.answers]
        if qa.id not in predictions:
            log.warning("no prediction for question %s; scored 0", qa.id)
            missing.append(qa.id)
            scores.append(ExampleScore(qa.id, 0, 0.0))
            continue
        pred = predictions[qa.id]
        scores.append(ExampleScore(qa.id, exact_match(pred, golds, determiners), f1(pred, golds, determiners)))
    n = len(scores)
    em = 100.0 * sum(s.em for s in scores) / n if n else 0.0
    f = 100.0 * sum(s.f1 for s in scores) / n if n else 0.0
    return EvalReport(em, f, scores, missing)


def load_predictions(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        preds = json.load(fh)
    if not isinstance(preds, dict):
        raise ValueError("predictions file must hold a JSON object mapping question id to answer")
    return {str(k): str(v) for k, v in preds.items()}
