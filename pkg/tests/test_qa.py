import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import eval_items, random_samples
from m3pipe.backends import MockTranslator
from m3pipe.errors import ValidationError
from m3pipe.evaluation import EvalResult, ItemOutcome
from m3pipe.qa import build_report, chrf, corpus_chrf, report_from_accuracies, round_trip


def brute_chrf(ref, hyp, order=6, beta=2.0):
    """Brute force: strip whitespace, match n-grams by marking used positions."""
    ref = "".join(c for c in ref if not c.isspace())
    hyp = "".join(c for c in hyp if not c.isspace())
    if not ref or not hyp:
        return 1.0 if ref == hyp else 0.0
    ps, rs = [], []
    for n in range(1, order + 1):
        ref_grams = [ref[i:i + n] for i in range(len(ref) - n + 1)]
        hyp_grams = [hyp[i:i + n] for i in range(len(hyp) - n + 1)]
        if not ref_grams or not hyp_grams:
            continue
        used = [False] * len(ref_grams)
        matched = 0
        for g in hyp_grams:
            for j, r in enumerate(ref_grams):
                if not used[j] and r == g:
                    used[j] = True
                    matched += 1
                    break
        ps.append(matched / len(hyp_grams))
        rs.append(matched / len(ref_grams))
    p, r = sum(ps) / len(ps), sum(rs) / len(rs)
    if p == 0 and r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (beta**2 * p + r)


def test_chrf_identity():
    for x in ["a", "hello world", "中文测试", "<image> x"]:
        assert chrf(x, x) == 1.0


def test_chrf_disjoint():
    assert chrf("aaaa", "zzzz") == 0.0


def test_chrf_abcd_abce():
    # orders 1..4 exist; P = R = (3/4 + 2/3 + 1/2 + 0) / 4 = 23/48
    assert brute_chrf("abcd", "abce") == pytest.approx(23 / 48, abs=1e-15)
    assert chrf("abcd", "abce") == pytest.approx(brute_chrf("abcd", "abce"), abs=1e-12)


def test_chrf_whitespace_and_empty():
    assert chrf("a b", "ab") == 1.0
    assert chrf("", "") == 1.0
    assert chrf("abc", "") == 0.0


@given(st.text(alphabet="abcd é", max_size=20), st.text(alphabet="abcd é", max_size=20))
def test_chrf_matches_oracle(a, b):
    v = chrf(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(brute_chrf(a, b), abs=1e-12)


def test_round_trip_mock_is_identity():
    recs = random_samples(50)
    assert round_trip(recs, "ur", MockTranslator()) == recs
    items = eval_items(10)
    back = round_trip(items, "ar", MockTranslator())
    assert back == items
    assert [i.answer_index for i in back] == [i.answer_index for i in items]


class DropLastWord:
    """Lossy backend: drops the last plain word of every text (sentinels kept)."""

    def translate(self, texts, src, tgt):
        out = []
        for t in texts:
            words = t.split(" ")
            for i in range(len(words) - 1, 0, -1):
                if "⟦PH" not in words[i]:
                    del words[i]
                    break
            out.append(" ".join(words))
        return out


def test_lossy_backend_detected():
    recs = random_samples(30, seed=4)
    rt = round_trip(recs, "hi", DropLastWord())
    assert corpus_chrf(recs, rt) < 1.0
    assert corpus_chrf(recs, round_trip(recs, "hi", MockTranslator())) == 1.0


@pytest.mark.parametrize(
    "orig, bt, delta, verdict",
    [
        (34.61, 34.45, 0.16, "consistent"),  # pretrained row
        (34.14, 33.02, 1.12, "consistent"),  # finetuned row
        (34.61, 30.00, 4.61, "flagged"),
    ],
)
def test_table1_arithmetic(orig, bt, delta, verdict):
    rep = report_from_accuracies({"row": (orig, bt)}, flag_threshold=2.0)
    (row,) = rep.rows
    assert row.delta == delta
    assert rep.verdicts["row"] == verdict


def test_threshold_boundary_is_consistent():
    rep = report_from_accuracies({"x": (10.0, 8.0)}, 2.0)
    assert rep.verdicts == {"x": "consistent"}


def outcomes(ids, correct_ids, lang="en"):
    return [ItemOutcome(i, lang, "A", 0, "letter", i in correct_ids) for i in ids]


def test_build_report_from_results():
    ids = [f"q{i}" for i in range(10)]
    orig = EvalResult.from_outcomes(outcomes(ids, set(ids[:5])))
    bt = {"zh": EvalResult.from_outcomes(outcomes(ids, set(ids[:4]))),
          "hi": EvalResult.from_outcomes(outcomes(ids, set(ids[:2])))}
    rep = build_report(orig, bt, 2.0, {"zh": 0.99, "hi": 0.5})
    assert {r.label: r.delta for r in rep.rows} == {"zh": 10.0, "hi": 30.0}
    assert rep.verdicts == {"zh": "flagged", "hi": "flagged"}
    text = rep.render()
    assert "E-MMMU" in text and "BT-MMMU" in text and "supplementary" in text
    assert "| average |" in text


def test_build_report_item_mismatch():
    orig = EvalResult.from_outcomes(outcomes(["a", "b", "c"], {"a"}))
    bt = EvalResult.from_outcomes(outcomes(["a", "b"], {"a"}))
    with pytest.raises(ValidationError, match="missing \\['c'\\]"):
        build_report(orig, {"fr": bt})


def test_delta_recomputed_not_stored():
    rep = report_from_accuracies({"x": (50.0, 49.0)})
    row = rep.rows[0]
    assert row.delta == 1.0
    assert not hasattr(row, "__dict__") or "delta" not in vars(row)


def test_thousand_random_pairs_match_oracle():
    rng = random.Random(7)
    alphabet = "abcde fgh中"
    for _ in range(1000):
        a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 25)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 25)))
        assert abs(chrf(a, b) - brute_chrf(a, b)) <= 1e-12
