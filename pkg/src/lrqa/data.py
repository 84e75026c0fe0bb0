"""SQuAD v1.1 datasets, a subword tokenizer with character offsets, and featurization."""

from __future__ import annotations

import csv
import io
import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .rng import stream

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"


class DatasetError(ValueError):
    pass


@dataclass
class Answer:
    text: str
    answer_start: int


@dataclass
class QAExample:
    id: str
    question: str
    answers: list[Answer] = field(default_factory=list)


@dataclass
class Paragraph:
    context: str
    qas: list[QAExample] = field(default_factory=list)


@dataclass
class Article:
    title: str
    paragraphs: list[Paragraph] = field(default_factory=list)


@dataclass
class Dataset:
    articles: list[Article] = field(default_factory=list)
    version: str = "1.1"

    def examples(self) -> Iterable[tuple[Paragraph, QAExample]]:
        for art in self.articles:
            for para in art.paragraphs:
                for qa in para.qas:
                    yield para, qa

    def question_ids(self) -> list[str]:
        return [qa.id for _, qa in self.examples()]

    def __len__(self) -> int:
        return sum(1 for _ in self.examples())


def _check_example(context: str, qa: QAExample) -> None:
    for ans in qa.answers:
        end = ans.answer_start + len(ans.text)
        if ans.answer_start < 0 or end > len(context) or context[ans.answer_start:end] != ans.text:
            raise DatasetError(
                f"answer span of example {qa.id!r} does not match its context "
                f"(start {ans.answer_start}, text {ans.text!r})"
            )


def validate(dataset: Dataset) -> Dataset:
    seen: set[str] = set()
    for para, qa in dataset.examples():
        if qa.id in seen:
            raise DatasetError(f"duplicate question id {qa.id!r}")
        seen.add(qa.id)
        _check_example(para.context, qa)
    return dataset


def parse_squad(raw: bytes | str) -> Dataset:
    """Parse and validate SQuAD v1.1 JSON."""
    try:
        doc = json.loads(raw.decode("utf-8") if isinstance(raw, bytes) else raw)
        articles = []
        for art in doc["data"]:
            paragraphs = []
            for para in art["paragraphs"]:
                qas = [
                    QAExample(
                        id=str(qa["id"]),
                        question=qa["question"],
                        answers=[Answer(a["text"], int(a["answer_start"])) for a in qa.get("answers", [])],
                    )
                    for qa in para["qas"]
                ]
                paragraphs.append(Paragraph(para["context"], qas))
            articles.append(Article(art.get("title", ""), paragraphs))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"malformed SQuAD JSON: {exc}") from exc
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed SQuAD JSON: missing or invalid field {exc}") from exc
    return validate(Dataset(articles, str(doc.get("version", "1.1"))))


def emit_squad(dataset: Dataset) -> bytes:
    """Canonical UTF-8 serialization; ``parse_squad`` of the result is a fixed point."""
    doc = {
        "version": dataset.version,
        "data": [
            {
                "title": art.title,
                "paragraphs": [
                    {
                        "context": para.context,
                        "qas": [
                            {
                                "id": qa.id,
                                "question": qa.question,
                                "answers": [{"text": a.text, "answer_start": a.answer_start} for a in qa.answers],
                            }
                            for qa in para.qas
                        ],
                    }
                    for para in art.paragraphs
                ],
            }
            for art in dataset.articles
        ],
    }
    return (json.dumps(doc, ensure_ascii=False, indent=1) + "\n").encode("utf-8")


def load_squad(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse_squad(fh.read())


def save_squad(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(emit_squad(dataset))


# ---------------------------------------------------------------- tokenizer


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def _lower(ch: str) -> str:
    low = ch.lower()
    return low if len(low) == 1 else ch


def pre_tokenize(text: str) -> list[tuple[int, int]]:
    """Word ranges: runs of non-space, non-punctuation chars; each punctuation char alone."""
    spans = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace() or _is_punct(ch):
            if start is not None:
                spans.append((start, i))
                start = None
            if not ch.isspace():
                spans.append((i, i + 1))
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, len(text)))
    return spans


@dataclass
class Encoding:
    ids: list[int]
    offsets: list[tuple[int, int]]


class Tokenizer:
    """Greedy longest-match subword tokenizer.

    Word-initial pieces are stored as-is, continuation pieces with a ``##``
    prefix.  Ids 0-4 are the special tokens.
    """

    def __init__(self, vocab: list[str], lowercase: bool = True):
        if list(vocab[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")
        self.vocab = list(vocab)
        self.lowercase = lowercase
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        self.max_piece = max((len(t) for t in self.vocab), default=1)

    def __len__(self) -> int:
        return len(self.vocab)

    pad_id = property(lambda self: self.token_to_id[PAD])
    unk_id = property(lambda self: self.token_to_id[UNK])
    cls_id = property(lambda self: self.token_to_id[CLS])
    sep_id = property(lambda self: self.token_to_id[SEP])
    mask_id = property(lambda self: self.token_to_id[MASK])

    def normalize(self, text: str) -> str:
        return "".join(_lower(c) for c in text) if self.lowercase else text

    def encode(self, text: str) -> Encoding:
        norm = self.normalize(text)
        ids: list[int] = []
        offsets: list[tuple[int, int]] = []
        for ws, we in pre_tokenize(norm):
            i = ws
            while i < we:
                j = min(we, i + self.max_piece)
                while j > i:
                    piece = norm[i:j] if i == ws else CONTINUATION + norm[i:j]
                    tid = self.token_to_id.get(piece)
                    if tid is not None:
                        break
                    j -= 1
                if j == i:
                    ids.append(self.unk_id)
                    offsets.append((i, i + 1))
                    i += 1
                else:
                    ids.append(tid)
                    offsets.append((i, j))
                    i = j
        return Encoding(ids, offsets)

    def decode(self, ids: list[int]) -> str:
        out = []
        for tid in ids:
            tok = self.vocab[tid]
            if tok in SPECIALS:
                continue
            if tok.startswith(CONTINUATION) and out:
                out[-1] += tok[len(CONTINUATION):]
            else:
                out.append(tok)
        return " ".join(out)

    def to_json(self) -> str:
        return json.dumps({"lowercase": self.lowercase, "vocab": self.vocab}, ensure_ascii=False, indent=0)

    @classmethod
    def from_json(cls, raw: str) -> Tokenizer:
        d = json.loads(raw)
        return cls(d["vocab"], d.get("lowercase", True))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> Tokenizer:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def tokenize_with_offsets(tokenizer: Tokenizer, text: str) -> Encoding:
    return tokenizer.encode(text)


def detokenize(tokenizer: Tokenizer, encoding: Encoding) -> str:
    """Rebuild text from pieces and offsets; whitespace gaps become single spaces."""
    out = []
    cursor = None
    for tid, (s, e) in zip(encoding.ids, encoding.offsets):
        piece = tokenizer.vocab[tid]
        if piece == UNK:
            raise ValueError(f"cannot detokenize unknown character at {s}")
        surface = piece[len(CONTINUATION):] if piece.startswith(CONTINUATION) else piece
        if cursor is not None and s > cursor:
            out.append(" ")
        out.append(surface)
        cursor = e
    return "".join(out)


def train_tokenizer(corpus: Iterable[str], vocab_size: int, lowercase: bool = True) -> Tokenizer:
    """Frequency-ranked vocabulary: whole words and word suffixes, then every base character.

    Multi-character pieces are ranked by occurrence count, then by length,
    then lexicographically, and take whatever room the specials and base
    characters leave.
    """
    words: Counter[str] = Counter()
    for line in corpus:
        norm = "".join(_lower(c) for c in line) if lowercase else line
        for s, e in pre_tokenize(norm):
            words[norm[s:e]] += 1
    chars: Counter[str] = Counter()
    for w, c in words.items():
        for ch in w:
            chars[ch] += c
    base_chars = sorted(chars, key=lambda ch: (-chars[ch], ch))
    base = base_chars + [CONTINUATION + ch for ch in base_chars]
    budget = vocab_size - len(SPECIALS) - len(base)
    if budget < 0:
        raise ValueError(
            f"vocab_size {vocab_size} too small: needs at least {len(SPECIALS) + len(base)} "
            "for the special tokens and base characters"
        )
    candidates: Counter[str] = Counter()
    for w, c in words.items():
        if len(w) > 1:
            candidates[w] += c
        for k in range(1, len(w) - 1):
            candidates[CONTINUATION + w[k:]] += c

    def surface_len(p: str) -> int:
        return len(p) - len(CONTINUATION) if p.startswith(CONTINUATION) else len(p)

    ranked = sorted(candidates, key=lambda p: (-candidates[p], -surface_len(p), p))
    return Tokenizer(list(SPECIALS) + ranked[:budget] + base, lowercase)


# ---------------------------------------------------------------- featurization


@dataclass
class Feature:
    example_id: str
    window_index: int
    input_ids: list[int]
    attention_mask: list[int]
    token_types: list[int]
    offsets: list[tuple[int, int] | None]
    start_position: int | None
    end_position: int | None
    context: str

    @property
    def has_answer(self) -> bool:
        return self.start_position is not None


def window_starts(n_tokens: int, capacity: int, stride: int) -> list[int]:
    step = max(1, min(stride, capacity))
    starts = [0]
    while starts[-1] + capacity < n_tokens:
        starts.append(starts[-1] + step)
    return starts


def featurize(example: QAExample, context: str, tokenizer: Tokenizer,
              max_len: int = 384, stride: int = 128) -> list[Feature]:
    """Split one example into ``[CLS] question [SEP] window [SEP]`` features.

    ``stride`` is the number of context tokens between consecutive window
    starts; gold positions are set only in windows holding the full answer.
    """
    q_ids = tokenizer.encode(example.question).ids
    capacity = max_len - len(q_ids) - 3
    if capacity < 1:
        raise ValueError(
            f"max_len {max_len} leaves no room for context after a {len(q_ids)}-token question ({example.id})"
        )
    enc = tokenizer.encode(context)
    gold = example.answers[0] if example.answers else None
    tok_start = tok_end = None
    if gold is not None:
        a0, a1 = gold.answer_start, gold.answer_start + len(gold.text)
        inside = [i for i, (s, e) in enumerate(enc.offsets) if e > a0 and s < a1]
        if inside:
            tok_start, tok_end = inside[0], inside[-1]
    features = []
    n = len(enc.ids)
    for w, start in enumerate(window_starts(n, capacity, stride)):
        stop = min(n, start + capacity)
        ids = [tokenizer.cls_id] + q_ids + [tokenizer.sep_id]
        prefix = len(ids)
        ids += enc.ids[start:stop] + [tokenizer.sep_id]
        offsets: list[tuple[int, int] | None] = [None] * prefix + enc.offsets[start:stop] + [None]
        types = [0] * prefix + [1] * (stop - start + 1)
        sp = ep = None
        if tok_start is not None and start <= tok_start and tok_end < stop:
            sp, ep = prefix + tok_start - start, prefix + tok_end - start
        features.append(Feature(example.id, w, ids, [1] * len(ids), types, offsets, sp, ep, context))
    return features


def featurize_dataset(dataset: Dataset, tokenizer: Tokenizer, max_len: int = 384,
                      stride: int = 128) -> list[Feature]:
    feats = []
    for para, qa in dataset.examples():
        feats.extend(featurize(qa, para.context, tokenizer, max_len, stride))
    return feats


# ---------------------------------------------------------------- dataset ops


def _filter(dataset: Dataset, keep: set[str]) -> Dataset:
    articles = []
    for art in dataset.articles:
        paras = [Paragraph(p.context, [qa for qa in p.qas if qa.id in keep]) for p in art.paragraphs]
        paras = [p for p in paras if p.qas]
        if paras:
            articles.append(Article(art.title, paras))
    return Dataset(articles, dataset.version)


def split_validation(dataset: Dataset, fraction: float = 0.10, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Hold out ``round(fraction * N)`` questions chosen uniformly without replacement."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    ids = dataset.question_ids()
    if not ids:
        raise DatasetError("cannot split an empty dataset")
    n_val = int(round(fraction * len(ids)))
    order = stream(seed, "data-split").permutation(len(ids))
    val_ids = {ids[i] for i in order[:n_val]}
    return _filter(dataset, set(ids) - val_ids), _filter(dataset, val_ids)


def concat_datasets(a: Dataset, b: Dataset, tags: tuple[str, str] = ("a", "b")) -> Dataset:
    """Concatenate article lists.

    If any question id occurs in both inputs, every id is prefixed with its
    source tag so the result stays unique.
    """
    clash = set(a.question_ids()) & set(b.question_ids())

    def copy(ds: Dataset, tag: str) -> list[Article]:
        out = []
        for art in ds.articles:
            paras = []
            for p in art.paragraphs:
                qas = [QAExample(f"{tag}:{qa.id}" if clash else qa.id, qa.question,
                                 [Answer(x.text, x.answer_start) for x in qa.answers]) for qa in p.qas]
                paras.append(Paragraph(p.context, qas))
            out.append(Article(art.title, paras))
        return out

    return Dataset(copy(a, tags[0]) + copy(b, tags[1]), a.version)


# ---------------------------------------------------------------- statistics

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def count_sentences(text: str) -> int:
    return sum(1 for s in _SENTENCE_END.split(text.strip()) if s.strip())


@dataclass
class StatsReport:
    titles: int = 0
    paragraphs: int = 0
    paragraph_sentences: float = 0.0
    paragraph_tokens: float = 0.0
    paragraph_chars: float = 0.0
    questions: int = 0
    question_tokens: float = 0.0
    question_chars: float = 0.0
    answers: int = 0
    answer_tokens: float = 0.0
    answer_chars: float = 0.0
    paragraph_subwords: float | None = None

    def rows(self) -> list[tuple[str, str]]:
        rows = [
            ("# titles", f"{self.titles:,}"),
            ("# paragraphs", f"{self.paragraphs:,}"),
            ("# sentences / # tokens / # characters",
             f"{self.paragraph_sentences:.1f} / {self.paragraph_tokens:.1f} / {self.paragraph_chars:.1f}"),
            ("# questions", f"{self.questions:,}"),
            ("# tokens / # characters", f"{self.question_tokens:.1f} / {self.question_chars:.1f}"),
            ("# answers", f"{self.answers:,}"),
            ("# tokens / # characters ", f"{self.answer_tokens:.1f} / {self.answer_chars:.1f}"),
        ]
        if self.paragraph_subwords is not None:
            rows.append(("# subword tokens per paragraph", f"{self.paragraph_subwords:.1f}"))
        return rows

    def to_text(self, name: str = "dataset") -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        vwidth = max(len(name), max(len(v) for _, v in rows))
        lines = [f"{'':<{width}}  {name:>{vwidth}}"]
        lines += [f"{k:<{width}}  {v:>{vwidth}}" for k, v in rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["statistic", "value"])
        for key, value in vars(self).items():
            if value is not None:
                w.writerow([key, f"{value:.4f}" if isinstance(value, float) else value])
        return buf.getvalue()


def corpus_stats(dataset: Dataset, tokenizer: Tokenizer | None = None) -> StatsReport:
    """Table-style descriptives; tokens are whitespace words unless noted."""
    paras = [p for art in dataset.articles for p in art.paragraphs]
    qas = [qa for p in paras for qa in p.qas]
    answers = [a for qa in qas for a in qa.answers]

    def avg(values) -> float:
        values = list(values)
        return float(np.mean(values)) if values else 0.0

    report = StatsReport(
        titles=len(dataset.articles),
        paragraphs=len(paras),
        paragraph_sentences=avg(count_sentences(p.context) for p in paras),
        paragraph_tokens=avg(len(p.context.split()) for p in paras),
        paragraph_chars=avg(len(p.context) for p in paras),
        questions=len(qas),
        question_tokens=avg(len(q.question.split()) for q in qas),
        question_chars=avg(len(q.question) for q in qas),
        answers=len(answers),
        answer_tokens=avg(len(a.text.split()) for a in answers),
        answer_chars=avg(len(a.text) for a in answers),
    )
    if tokenizer is not None:
        report.paragraph_subwords = avg(len(tokenizer.encode(p.context).ids) for p in paras)
    return report
