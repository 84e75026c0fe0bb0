"""Shared builders and independent brute-force oracles for the test suite."""

from __future__ import annotations

import math
import re
import string
import unicodedata
from pathlib import Path

import numpy as np

import lrqa
from lrqa.data import featurize_dataset, load_squad, train_tokenizer
from lrqa.model import EncoderConfig, build_model
from lrqa.trainer import TrainConfig, _masked_span_logits, collate, qa_loss

FIXTURES = Path(lrqa.__file__).parent / "fixtures"
TESTDATA = Path(__file__).parent / "data"

TOY_MODEL = EncoderConfig(vocab_size=200, embedding_size=8, hidden_size=32, layers=2, heads=2,
                          intermediate_size=64, max_positions=64, dropout=0.0)
TINY_MODEL = EncoderConfig(vocab_size=13, embedding_size=4, hidden_size=8, layers=2, heads=2,
                           intermediate_size=16, max_positions=16, dropout=0.0)


def toy_setup():
    ds = load_squad(FIXTURES / "toy_qa.json")
    texts = [p.context for a in ds.articles for p in a.paragraphs] + [q.question for _, q in ds.examples()]
    tok = train_tokenizer(texts, 200)
    feats = featurize_dataset(ds, tok, max_len=64, stride=32)
    return ds, tok, feats


def toy_train_config(**changes) -> TrainConfig:
    base = dict(learning_rate=3e-3, batch_size=4, epochs=200, warmup_fraction=0.1, weight_decay=0.0,
                max_len=64, stride=32)
    base.update(changes)
    return TrainConfig(**base)


def tiny_qa_problem(seed: int = 0):
    """Tiny encoder at a generic parameter point plus a closure computing its QA loss.

    At the 0.02-std initialization most gradients are ~1e-8, where central
    differences are dominated by rounding, so parameters are redrawn at unit-ish
    scale before checking.
    """
    model = build_model(TINY_MODEL, seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in model.params.items():
        if name.endswith("gain"):
            p.data[...] = 1.0 + 0.1 * rng.standard_normal(p.shape)
        else:
            p.data[...] = 0.5 * rng.standard_normal(p.shape)
    ids = rng.integers(5, 13, size=(2, 7))
    ids[:, 0] = 2
    types = np.zeros_like(ids)
    types[:, 4:] = 1
    mask = np.ones_like(ids)
    mask[1, 6] = 0
    starts, ends = [4, 5], [5, 5]

    def loss():
        s, e = _masked_span_logits(model, ids, types, mask)
        return qa_loss(s, e, starts, ends)

    return model, loss


# ---------------------------------------------------------------- metric oracles

_PUNCT = set(string.punctuation) | {
    chr(i) for i in range(0x110000) if unicodedata.category(chr(i)).startswith("P")
}
_DETS = {"le", "la", "les", "l'", "du", "des", "au", "aux", "un", "une"}


def oracle_normalize(text: str, dets=_DETS) -> list[str]:
    punct = _PUNCT
    text = text.lower().replace("’", "'")
    # cut after every apostrophe so "l'école" yields "l'" and "école"
    text = re.sub(r"'", "' ", text)
    kept = [w for w in text.split() if w not in dets]
    out = []
    for w in kept:
        cleaned = "".join(" " if c in punct else c for c in w)
        out.extend(x for x in cleaned.split() if x not in dets)
    return out


def oracle_em(pred: str, golds: list[str]) -> int:
    p = oracle_normalize(pred)
    return max(int(p == oracle_normalize(g)) for g in golds)


def oracle_f1(pred: str, golds: list[str]) -> float:
    best = 0.0
    p = oracle_normalize(pred)
    for g in golds:
        gt = oracle_normalize(g)
        if not p or not gt:
            score = 1.0 if p == gt else 0.0
        else:
            pool = list(gt)
            common = 0
            for tok in p:
                if tok in pool:
                    pool.remove(tok)
                    common += 1
            score = 0.0 if common == 0 else 2 * common / (len(p) + len(gt))
        best = max(best, score)
    return best


def _grams(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def _clipped(h, r):
    return sum(min(h.count(g), r.count(g)) for g in set(h))


def oracle_chrf(hyp: str, ref: str, cn: int = 6, wn: int = 2, beta: float = 2.0) -> float:
    hc, rc = list(re.sub(r"\s+", " ", hyp)), list(re.sub(r"\s+", " ", ref))
    ps, rs = [], []
    units = [(hc, rc, n) for n in range(1, cn + 1)] + [(hyp.split(), ref.split(), n) for n in range(1, wn + 1)]
    for h_units, r_units, n in units:
        h, r = _grams(h_units, n), _grams(r_units, n)
        m = _clipped(h, r)
        if h:
            ps.append(m / len(h))
        if r:
            rs.append(m / len(r))
    p = sum(ps) / len(ps) if ps else 0.0
    r = sum(rs) / len(rs) if rs else 0.0
    if p == 0 and r == 0:
        return 0.0
    return (1 + beta ** 2) * p * r / (beta ** 2 * p + r)


def oracle_bleu(hyps: list[str], refs: list[str], max_n: int = 4) -> float:
    logs = []
    for n in range(1, max_n + 1):
        num = den = 0
        for h, r in zip(hyps, refs):
            hg, rg = _grams(h.split(), n), _grams(r.split(), n)
            num += _clipped(hg, rg)
            den += len(hg)
        if num == 0:
            return 0.0
        logs.append(math.log(num) - math.log(den))
    c = sum(len(h.split()) for h in hyps)
    r = sum(len(x.split()) for x in refs)
    bp = math.exp(min(0.0, 1 - r / c))
    return bp * math.exp(sum(logs) / max_n)


# ---------------------------------------------------------------- search oracles


def oracle_span(context: str, answer: str, threshold=0.5, band=(0.5, 2.0)):
    """Every (start, end) pair over token boundaries, scored and ranked explicitly."""
    if answer in context:
        i = context.index(answer)
        return i, i + len(answer), "exact"
    toks = [(m.start(), m.end()) for m in re.finditer(r"\w+|[^\w\s]", context)]
    pool = []
    for s, _ in toks:
        for _, e in toks:
            if e > s and band[0] * len(answer) <= e - s <= band[1] * len(answer):
                pool.append((oracle_chrf(context[s:e], answer), s, e))
    if not pool:
        return None, None, "dropped"
    pool.sort(key=lambda t: (-t[0], t[1], t[2] - t[1]))
    score, s, e = pool[0]
    if score < threshold:
        return None, None, "dropped"
    return s, e, "chrf"


def oracle_decode(start, end, valid, max_len=30):
    best = None
    for s in range(len(start)):
        for e in range(s, min(len(end), s + max_len)):
            if valid[s] and valid[e]:
                sc = start[s] + end[e]
                if best is None or sc > best[2]:
                    best = (s, e, sc)
    return best


def numeric_grad(f, x: np.ndarray, eps=1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f(x)
        x[i] = old - eps
        dn = f(x)
        x[i] = old
        g[i] = (up - dn) / (2 * eps)
    return g

