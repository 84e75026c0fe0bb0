"""Re-anchor translated answers inside translated contexts.

An answer found verbatim in its context is kept as is.  Otherwise every
word-boundary span of plausible length is scored with ChrF against the
translated answer and the best one is kept, or the example is dropped when
even the best span scores below the threshold.
"""

from __future__ import annotations

import json
import math
import re
import subprocess
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable

from .data import Answer, Article, Dataset, Paragraph, QAExample, validate

_WS = re.compile(r"\s+")
_WORD = re.compile(r"\w+|[^\w\s]")


@dataclass
class NGramProfile:
    n: int
    level: str
    counts: Counter

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _units(text: str, level: str) -> list[str] | str:
    if level == "char":
        return _WS.sub(" ", text)
    if level == "word":
        return text.split()
    raise ValueError(f"level must be 'char' or 'word', got {level!r}")


def ngram_counts(text: str, n: int, level: str = "char") -> NGramProfile:
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    units = _units(text, level)
    if level == "char":
        grams = (units[i:i + n] for i in range(len(units) - n + 1))
    else:
        grams = (" ".join(units[i:i + n]) for i in range(len(units) - n + 1))
    return NGramProfile(n, level, Counter(grams))


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def chrf(hypothesis: str, reference: str, max_char_n: int = 6, max_word_n: int = 2, beta: float = 2.0) -> float:
    """Character n-gram F-score extended with word n-grams, in [0, 1]."""
    if max_char_n < 1:
        raise ValueError("max_char_n must be >= 1")
    precisions, recalls = [], []
    orders = [("char", n) for n in range(1, max_char_n + 1)] + [("word", n) for n in range(1, max_word_n + 1)]
    for level, n in orders:
        hyp = ngram_counts(hypothesis, n, level)
        ref = ngram_counts(reference, n, level)
        matches = sum((hyp.counts & ref.counts).values())
        if hyp.total:
            precisions.append(matches / hyp.total)
        if ref.total:
            recalls.append(matches / ref.total)
    p, r = _mean(precisions), _mean(recalls)
    b2 = beta * beta
    denom = b2 * p + r
    return (1 + b2) * p * r / denom if denom > 0 else 0.0


def bleu(hypotheses: list[str], references: list[str], max_n: int = 4) -> float:
    """Corpus BLEU over whitespace tokens with one reference per hypothesis."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU needs at least one sentence pair")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp.split())
        ref_len += len(ref.split())
        for n in range(1, max_n + 1):
            h = ngram_counts(hyp, n, "word")
            r = ngram_counts(ref, n, "word")
            matches[n - 1] += sum((h.counts & r.counts).values())
            totals[n - 1] += h.total
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------- span search


@dataclass(frozen=True)
class AlignParams:
    max_char_n: int = 6
    max_word_n: int = 2
    beta: float = 2.0
    threshold: float = 0.5
    len_band: tuple[float, float] = (0.5, 2.0)


@dataclass
class SpanMatch:
    start: int | None
    end: int | None
    method: str
    score: float
    candidates_scored: int = 0


def word_boundaries(text: str) -> tuple[list[int], list[int]]:
    """Start and end offsets of word and punctuation tokens."""
    spans = [(m.start(), m.end()) for m in _WORD.finditer(text)]
    return [s for s, _ in spans], [e for _, e in spans]


def candidate_spans(context: str, answer: str, len_band=(0.5, 2.0)) -> list[tuple[int, int]]:
    starts, ends = word_boundaries(context)
    lo, hi = len_band[0] * len(answer), len_band[1] * len(answer)
    return [(s, e) for s in starts for e in ends if e > s and lo <= e - s <= hi]


def find_answer_span(context: str, answer: str, params: AlignParams = AlignParams(),
                     scorer: Callable[..., float] = chrf) -> SpanMatch:
    if not context or not answer:
        raise ValueError("context and answer must be non-empty")
    pos = context.find(answer)
    if pos >= 0:
        return SpanMatch(pos, pos + len(answer), "exact", 1.0)
    best: tuple[float, int, int] | None = None
    scored = 0
    for s, e in candidate_spans(context, answer, params.len_band):
        score = scorer(context[s:e], answer, params.max_char_n, params.max_word_n, params.beta)
        scored += 1
        # candidates come ordered by start then end, so strict > keeps earliest, shortest
        if best is None or score > best[0]:
            best = (score, s, e)
    if best is None or best[0] < params.threshold:
        return SpanMatch(None, None, "dropped", best[0] if best else 0.0, scored)
    return SpanMatch(best[1], best[2], "chrf", best[0], scored)


# ---------------------------------------------------------------- corpus alignment


@dataclass
class Translation:
    id: str
    context_fr: str
    question_fr: str
    answer_fr: str


@dataclass
class AlignmentRecord:
    id: str
    context: str
    question: str
    answer: str
    start_char: int | None
    end_char: int | None
    method: str
    score: float


@dataclass
class AlignReport:
    total: int
    exact: int
    chrf: int
    dropped: int
    chrf_calls: int
    histogram: list[int] = field(default_factory=list)
    records: list[AlignmentRecord] = field(default_factory=list)

    @property
    def drop_rate(self) -> float:
        return self.dropped / self.total if self.total else 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["drop_rate"] = self.drop_rate
        return json.dumps(d, ensure_ascii=False, indent=1) + "\n"

    def to_text(self) -> str:
        t = max(self.total, 1)
        lines = [
            f"aligned examples: {self.total}",
            f"  exact   {self.exact:6d}  {100 * self.exact / t:6.2f}%",
            f"  chrf    {self.chrf:6d}  {100 * self.chrf / t:6.2f}%",
            f"  dropped {self.dropped:6d}  {100 * self.dropped / t:6.2f}%",
            f"drop rate: {100 * self.drop_rate:.2f}%",
            f"chrf evaluations: {self.chrf_calls}",
            "score histogram (10 bins over [0, 1]): " + " ".join(str(c) for c in self.histogram),
        ]
        return "\n".join(lines) + "\n"


def load_translations(path) -> dict[str, Translation]:
    out: dict[str, Translation] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                t = Translation(str(d["id"]), d["context_fr"], d["question_fr"], d["answer_fr"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad translation record ({exc})") from exc
            out[t.id] = t
    return out


def save_translations(translations: list[Translation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in translations:
            fh.write(json.dumps(asdict(t), ensure_ascii=False) + "\n")


class MissingTranslationError(KeyError):
    def __init__(self, ids: list[str]):
        super().__init__(f"missing translations for {len(ids)} ids: {', '.join(ids)}")
        self.ids = ids


def align_corpus(source: Dataset, translations: dict[str, Translation],
                 params: AlignParams = AlignParams()) -> tuple[Dataset, AlignReport]:
    """Build a SQuAD-format dataset from translated triples.

    Questions whose translated contexts are identical share one paragraph.
    """
    missing = [qa.id for _, qa in source.examples() if qa.id not in translations]
    if missing:
        raise MissingTranslationError(missing)
    records: list[AlignmentRecord] = []
    articles = []
    counts = Counter()
    calls = 0
    histogram = [0] * 10
    for art in source.articles:
        paragraphs: dict[str, Paragraph] = {}
        for para in art.paragraphs:
            for qa in para.qas:
                t = translations[qa.id]
                m = find_answer_span(t.context_fr, t.answer_fr, params)
                calls += m.candidates_scored
                counts[m.method] += 1
                histogram[min(9, int(m.score * 10))] += 1
                records.append(AlignmentRecord(qa.id, t.context_fr, t.question_fr, t.answer_fr,
                                               m.start, m.end, m.method, m.score))
                if m.method == "dropped":
                    continue
                text = t.context_fr[m.start:m.end]
                target = paragraphs.setdefault(t.context_fr, Paragraph(t.context_fr))
                target.qas.append(QAExample(qa.id, t.question_fr, [Answer(text, m.start)]))
        if paragraphs:
            articles.append(Article(art.title, list(paragraphs.values())))
    dataset = validate(Dataset(articles, source.version))
    report = AlignReport(len(records), counts["exact"], counts["chrf"], counts["dropped"], calls,
                         histogram, records)
    return dataset, report


def audit_translation_quality(hypotheses: dict[str, list[str]], corrected: dict[str, list[str]]) -> dict[str, float]:
    """Corpus BLEU (x100, two decimals) of machine output against corrected text.

    Both arguments map ``"questions"`` and ``"contexts"`` to parallel lists.
    """
    out = {}
    for key in ("questions", "contexts"):
        hyp, ref = hypotheses.get(key, []), corrected.get(key, [])
        if len(hyp) != len(ref):
            raise ValueError(f"{key}: {len(hyp)} hypotheses but {len(ref)} corrections")
        out[f"bleu_{key}"] = round(100.0 * bleu(hyp, ref), 2) if hyp else float("nan")
    return out


def translate_with_command(command: list[str], lines: list[str]) -> list[str]:
    """Pipe ``lines`` through an external line-in/line-out translator process."""
    payload = "".join(line.replace("\n", " ") + "\n" for line in lines)
    proc = subprocess.run(command, input=payload, capture_output=True, text=True, check=True)
    out = proc.stdout.splitlines()
    if len(out) != len(lines):
        raise RuntimeError(f"translator returned {len(out)} lines for {len(lines)} inputs")
    return out


def translate_dataset(dataset: Dataset, command: list[str]) -> list[Translation]:
    """Translate every (context, question, answer) triple with ``command``."""
    triples = [(qa.id, para.context, qa.question, qa.answers[0].text if qa.answers else "")
               for para, qa in dataset.examples()]
    flat = [x for _, c, q, a in triples for x in (c, q, a)]
    done = translate_with_command(command, flat)
    return [Translation(tid, *done[3 * i:3 * i + 3]) for i, (tid, *_rest) in enumerate(triples)]
