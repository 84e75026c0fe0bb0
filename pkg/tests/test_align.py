import json
import random
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrqa.align import (
    AlignParams,
    MissingTranslationError,
    Translation,
    align_corpus,
    audit_translation_quality,
    bleu,
    candidate_spans,
    chrf,
    find_answer_span,
    load_translations,
    ngram_counts,
    save_translations,
    translate_dataset,
)
from lrqa.data import load_squad

from _support import FIXTURES, oracle_bleu, oracle_chrf, oracle_span

WORDS = ["la", "tour", "Eiffel", "se", "trouve", "à", "Paris", ",", ".", "Victor", "Hugo", "écrivit",
         "Les", "Misérables", "en", "1862", "roi", "château", "l'", "ancien"]


def sentence(rng: random.Random, lo=1, hi=12) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(lo, hi)))


def mutate(rng: random.Random, text: str) -> str:
    chars = list(text)
    for _ in range(rng.randint(1, 3)):
        i = rng.randrange(len(chars))
        op = rng.random()
        if op < 0.4:
            chars[i] = rng.choice("aeiouxyz")
        elif op < 0.7:
            chars.insert(i, rng.choice("aeiouxyz"))
        elif len(chars) > 1:
            del chars[i]
    return "".join(chars)


def test_chrf_identity_and_bounds():
    assert chrf("Victor Hugo", "Victor Hugo") == 1.0
    assert chrf("abc", "xyz") == 0.0
    assert 0 < chrf("Victor Hugot", "Victor Hugo") < 1


def test_chrf_and_bleu_match_brute_force_on_100_pairs():
    rng = random.Random(11)
    for _ in range(100):
        h, r = sentence(rng), sentence(rng)
        if rng.random() < 0.5:
            h = mutate(rng, r)
        assert abs(chrf(h, r) - oracle_chrf(h, r)) <= 1e-12
        hs = [sentence(rng, 4, 12) for _ in range(3)]
        rs = [mutate(rng, x) if rng.random() < 0.7 else sentence(rng, 4, 12) for x in hs]
        assert abs(bleu(hs, rs) - oracle_bleu(hs, rs)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="ab cé.", max_size=20), st.text(alphabet="ab cé.", max_size=20))
def test_chrf_properties(h, r):
    s = chrf(h, r)
    assert 0.0 <= s <= 1.0
    if h.strip():
        assert chrf(h, h) == 1.0


def test_bleu_known_values():
    assert bleu(["a b c d"], ["a b c d"]) == 1.0
    assert bleu(["a b c"], ["x y z"]) == 0.0
    # brevity penalty only: 4-gram-perfect hypothesis half as long as its reference
    assert bleu(["a b c d"], ["a b c d e f g h"]) == pytest.approx(2.718281828459045 ** (1 - 2))
    with pytest.raises(ValueError):
        bleu(["a"], [])


def test_ngram_counts_char_level_collapses_whitespace():
    prof = ngram_counts("a  b", 2, "char")
    assert prof.counts == {"a ": 1, " b": 1}
    with pytest.raises(ValueError):
        ngram_counts("x", 0)


def test_exact_substring_wins_without_scoring():
    calls = []

    def spy(*args):
        calls.append(args)
        return chrf(*args)

    m = find_answer_span("Il vit à Paris depuis 1998.", "Paris", scorer=spy)
    assert (m.start, m.end, m.method, m.candidates_scored) == (9, 14, "exact", 0)
    assert calls == []


def test_fuzzy_match_and_drop():
    ctx = "Le roman fut écrit par Victor Hugo en exil."
    m = find_answer_span(ctx, "Victor Hugot")
    assert m.method == "chrf" and ctx[m.start:m.end] == "Victor Hugo"
    assert find_answer_span(ctx, "quelque chose d'autre").method == "dropped"
    with pytest.raises(ValueError):
        find_answer_span("", "x")


def test_candidates_respect_length_band_and_boundaries():
    ctx = "un deux, trois quatre."
    starts = {0, 3, 7, 9, 15, 21}
    ends = {2, 7, 8, 14, 21, 22}
    for s, e in candidate_spans(ctx, "abcdef", (0.5, 2.0)):
        assert s in starts and e in ends and 3 <= e - s <= 12


def test_search_equals_exhaustive_oracle_on_100_fixtures():
    rng = random.Random(5)
    for trial in range(100):
        ctx = sentence(rng, 4, 14)
        if trial % 3 == 0:
            ans = sentence(rng, 1, 3)
        else:
            toks = ctx.split()
            i = rng.randrange(len(toks))
            ans = mutate(rng, " ".join(toks[i:i + rng.randint(1, 3)]))
        m = find_answer_span(ctx, ans)
        assert (m.start, m.end, m.method) == oracle_span(ctx, ans), (ctx, ans)


def test_align_corpus_fixture(tmp_path):
    source = load_squad(FIXTURES / "align_source_en.json")
    translations = load_translations(FIXTURES / "align_translations.jsonl")
    ds, report = align_corpus(source, translations)
    assert len(ds) == 8 and report.dropped == 2
    for para, qa in ds.examples():
        a = qa.answers[0]
        span = para.context[a.answer_start:a.answer_start + len(a.text)]
        assert span.encode("utf-8") == a.text.encode("utf-8")
    exact = [r for r in report.records if r.method == "exact"]
    assert report.exact == len(exact) == 6
    assert report.chrf_calls == sum(
        len(candidate_spans(r.context, r.answer)) for r in report.records if r.method != "exact")
    assert sum(report.histogram) == 10 and report.drop_rate == pytest.approx(0.2)
    assert json.loads(report.to_json())["dropped"] == 2
    assert "drop rate: 20.00%" in report.to_text()


def test_align_groups_identical_contexts():
    source = load_squad(FIXTURES / "align_source_en.json")
    translations = load_translations(FIXTURES / "align_translations.jsonl")
    ds, _ = align_corpus(source, translations)
    contexts = [p.context for a in ds.articles for p in a.paragraphs]
    assert len(contexts) == len(set(contexts))


def test_missing_translation_is_reported():
    source = load_squad(FIXTURES / "align_source_en.json")
    translations = load_translations(FIXTURES / "align_translations.jsonl")
    del translations["al03"]
    with pytest.raises(MissingTranslationError) as err:
        align_corpus(source, translations)
    assert err.value.ids == ["al03"]


def test_threshold_controls_dropping():
    source = load_squad(FIXTURES / "align_source_en.json")
    translations = load_translations(FIXTURES / "align_translations.jsonl")
    lenient, _ = align_corpus(source, translations, AlignParams(threshold=0.0))
    strict, _ = align_corpus(source, translations, AlignParams(threshold=1.0))
    assert len(lenient) >= 8 >= len(strict) == 6


def test_translations_round_trip(tmp_path):
    ts = [Translation("a", "Le ciel « bleu ».", "Quoi ?", "bleu")]
    save_translations(ts, tmp_path / "t.jsonl")
    assert load_translations(tmp_path / "t.jsonl") == {"a": ts[0]}
    (tmp_path / "bad.jsonl").write_text('{"id": "x"}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        load_translations(tmp_path / "bad.jsonl")


def test_audit_translation_quality():
    out = audit_translation_quality({"questions": ["a b c d"], "contexts": ["w x y z"]},
                                    {"questions": ["a b c d"], "contexts": ["w x y q"]})
    assert out["bleu_questions"] == 100.0 and out["bleu_contexts"] == 0.0
    with pytest.raises(ValueError):
        audit_translation_quality({"questions": ["a"]}, {"questions": []})


def test_translate_dataset_with_identity_command():
    source = load_squad(FIXTURES / "align_source_en.json")
    out = translate_dataset(source, [sys.executable, "-c", "import sys; sys.stdout.write(sys.stdin.read())"])
    assert len(out) == len(source)
    first_para, first_qa = next(source.examples())
    assert out[0] == Translation(first_qa.id, first_para.context, first_qa.question, first_qa.answers[0].text)


# ---------------------------------------------------------------- documented examples


def test_ngram_counts_documented_examples():
    assert ngram_counts("abc", 2).counts == {"ab": 1, "bc": 1}
    assert ngram_counts("aaaa", 2).counts == {"aa": 3}
    assert ngram_counts("a", 2).total == 0


def test_chrf_documented_examples():
    assert chrf("abcd", "wxyz") == 0.0
    assert chrf("le chat", "le chien") == pytest.approx(oracle_chrf("le chat", "le chien"), abs=1e-12)


def test_two_sentence_bleu_matches_oracle():
    hyp = ["le chat est sur le tapis rouge", "il fait beau aujourd'hui à Paris"]
    ref = ["le chat est sur le tapis", "il fait très beau aujourd'hui à Paris"]
    assert bleu(hyp, ref) == pytest.approx(oracle_bleu(hyp, ref), abs=1e-12)


def test_exact_span_skips_scoring():
    def never(*_):
        raise AssertionError("scorer called on an exact match")

    m = find_answer_span("la tour Eiffel est à Paris", "tour Eiffel", scorer=never)
    assert (m.start, m.end, m.method) == (3, 14, "exact")


def test_case_mismatch_goes_through_chrf():
    context, answer = "la tour Eiffel est à Paris", "la tour eiffel"
    m = find_answer_span(context, answer)
    s, e, method = oracle_span(context, answer)
    assert m.method == method == "chrf"
    assert (m.start, m.end) == (s, e)
    assert m.score == pytest.approx(oracle_chrf(context[s:e], answer), abs=1e-12)


def test_unrelated_answer_is_dropped():
    assert find_answer_span("la tour Eiffel est à Paris", "photosynthèse").method == "dropped"


def test_all_verbatim_corpus_drops_nothing():
    source = load_squad(FIXTURES / "align_source_en.json")
    translations = {}
    for para, qa in source.examples():
        translations[qa.id] = Translation(qa.id, para.context, qa.question, qa.answers[0].text)
    _, report = align_corpus(source, translations)
    assert report.dropped == 0 and report.exact == report.total


def test_audit_documented_examples():
    same = {"questions": ["Qui a écrit ce livre ?"], "contexts": ["Le livre fut écrit par un auteur connu ."]}
    assert audit_translation_quality(same, same) == {"bleu_questions": 100.0, "bleu_contexts": 100.0}
    hyp = {"questions": ["Qui a écrit ce roman ?"], "contexts": same["contexts"]}
    out = audit_translation_quality(hyp, same)
    assert out["bleu_questions"] == round(100 * oracle_bleu(hyp["questions"], same["questions"]), 2)
    assert out["bleu_contexts"] == 100.0
