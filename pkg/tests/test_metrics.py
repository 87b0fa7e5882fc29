import math

import numpy as np
import pytest

from oracles import oracle_bleu4, oracle_cider_d, oracle_ngrams, oracle_rouge_l
from waftm import metrics as M


# ---------------------------------------------------------------------------
# BLEU-4


def test_bleu4_identity_corpus():
    cands = ["a man is riding a horse", "two dogs play in the park"]
    assert M.bleu4(cands, [[c] for c in cands]) == pytest.approx(1.0)


def test_bleu4_zero_overlap():
    assert M.bleu4(["aa bb cc dd ee"], [["vv ww xx yy zz"]]) == 0.0


def test_bleu4_hand_case():
    cand = "the cat sat on the mat"
    ref = "the cat sat on a mat"
    # hand arithmetic: p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3, BP = 1
    expected = (5 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** 0.25
    assert M.bleu4([cand], [[ref]]) == pytest.approx(expected, abs=1e-12)


def test_bleu4_brevity_penalty():
    # candidate shorter than reference: matched but penalized
    cand = "the cat sat on the"
    ref = "the cat sat on the mat"
    expected = math.exp(1 - 6 / 5)  # p_n all 1.0
    assert M.bleu4([cand], [[ref]]) == pytest.approx(expected, abs=1e-12)


def test_bleu4_matches_oracle_random_corpus():
    rng = np.random.default_rng(11)
    words = ["a", "b", "c", "d", "e", "f"]
    for _ in range(10):
        cands, refs = [], []
        for _ in range(4):
            cands.append(" ".join(rng.choice(words, rng.integers(4, 9))))
            refs.append([" ".join(rng.choice(words, rng.integers(4, 9)))
                         for _ in range(rng.integers(1, 4))])
        assert M.bleu4(cands, refs) == pytest.approx(oracle_bleu4(cands, refs), abs=1e-12)


def test_bleu4_empty_corpus():
    with pytest.raises(M.MetricError):
        M.bleu4([], [])


# ---------------------------------------------------------------------------
# ROUGE-L


def test_rouge_identity_and_disjoint():
    assert M.rouge_l(["the cat sat"], [["the cat sat"]]) == pytest.approx(1.0)
    assert M.rouge_l(["aa bb"], [["cc dd"]]) == 0.0


def test_rouge_hand_case():
    # candidate "the cat", reference "the cat sat": LCS=2, P=2/2, R=2/3
    p, r, b2 = 1.0, 2 / 3, 1.2 ** 2
    expected = (1 + b2) * r * p / (r + b2 * p)
    assert M.rouge_l(["the cat"], [["the cat sat"]]) == pytest.approx(expected, abs=1e-12)


def test_rouge_empty_candidate_scores_zero():
    assert M.rouge_l([""], [["the cat"]]) == 0.0


def test_rouge_matches_oracle_random_corpus():
    rng = np.random.default_rng(13)
    words = ["a", "b", "c", "d", "e"]
    for _ in range(10):
        cands, refs = [], []
        for _ in range(3):
            cands.append(" ".join(rng.choice(words, rng.integers(3, 8))))
            refs.append([" ".join(rng.choice(words, rng.integers(3, 8)))
                         for _ in range(rng.integers(1, 4))])
        assert M.rouge_l(cands, refs) == pytest.approx(
            oracle_rouge_l(cands, refs), abs=1e-12)


def test_rouge_extra_reference_never_hurts():
    rng = np.random.default_rng(12)
    words = ["a", "b", "c", "d"]
    for _ in range(20):
        cand = " ".join(rng.choice(words, 5))
        ref = " ".join(rng.choice(words, 5))
        extra = " ".join(rng.choice(words, 4))
        base = M.rouge_l([cand], [[ref]])
        widened = M.rouge_l([cand], [[ref, extra]])
        assert widened >= base - 1e-15


# ---------------------------------------------------------------------------
# idf / CIDEr-D


TOY_REFS = {
    "v1": ["a man rides a horse", "a man is riding a horse"],
    "v2": ["a dog runs in the park", "the dog is running"],
    "v3": ["a man plays a guitar", "someone plays the guitar"],
}


def test_build_idf_degenerate():
    with pytest.raises(M.MetricError, match="degenerate"):
        M.build_idf({"v1": ["a cat"]})


def test_build_idf_values():
    idf = M.build_idf(TOY_REFS)
    # "a" appears in all three videos' reference sets
    assert idf.lookup(("a",)) == pytest.approx(0.0)
    # "horse" appears in exactly one of three
    assert idf.lookup(("horse",)) == pytest.approx(math.log(3))
    # unseen n-grams take the maximal idf
    assert idf.lookup(("zebra",)) == pytest.approx(math.log(3))


def test_build_idf_matches_recount():
    idf = M.build_idf(TOY_REFS)
    docs = {
        vid: set().union(
            *(oracle_ngrams(M.caption_tokens(r), n) for r in refs for n in range(1, 5))
        )
        for vid, refs in TOY_REFS.items()
    }
    for gram, value in idf.idf.items():
        df = sum(1 for d in docs.values() if gram in d)
        assert value == pytest.approx(math.log(3 / df), abs=1e-12)


def test_cider_zero_overlap():
    idf = M.build_idf(TOY_REFS)
    assert M.cider_d({"v1": "xxxx yyyy zzzz"}, TOY_REFS, idf) == 0.0


def test_cider_upper_bound():
    idf = M.build_idf(TOY_REFS)
    scores = M.cider_d_scores(
        {vid: refs[0] for vid, refs in TOY_REFS.items()}, TOY_REFS, idf
    )
    assert all(0.0 <= s <= 10.0 + 1e-12 for s in scores.values())


def test_cider_matches_independent_oracle():
    idf = M.build_idf(TOY_REFS)
    ids = sorted(TOY_REFS)
    cands = {"v1": "a man rides a horse", "v2": "the dog runs", "v3": "a man plays the guitar"}
    ours = M.cider_d_scores(cands, TOY_REFS, idf)
    oracle = oracle_cider_d(
        [cands[v] for v in ids], [TOY_REFS[v] for v in ids], [TOY_REFS[v] for v in ids]
    )
    for vid, expect in zip(ids, oracle):
        assert abs(ours[vid] - expect) < 1e-9


def test_cider_unknown_video_id():
    idf = M.build_idf(TOY_REFS)
    with pytest.raises(M.MetricError, match="absent"):
        M.cider_d({"v9": "a man"}, {"v9": ["a man"]}, idf)


def test_cider_self_match_is_maximal_same_length():
    idf = M.build_idf(TOY_REFS)
    ref = TOY_REFS["v1"][0]
    n = len(ref.split())
    best = M.cider_d_sentence(ref, TOY_REFS["v1"], idf)
    words = ["a", "man", "rides", "horse", "is"]
    stack = [[]]
    for _ in range(n):
        stack = [s + [w] for s in stack for w in words]
    for cand_words in stack[:500]:
        cand = " ".join(cand_words)
        assert M.cider_d_sentence(cand, TOY_REFS["v1"], idf) <= best + 1e-12


# ---------------------------------------------------------------------------
# aggregation + invariances


def test_score_all_identity():
    refs = {k: [v[0]] for k, v in TOY_REFS.items()}
    cands = {k: v[0] for k, v in refs.items()}
    out = M.score_all(cands, refs)
    assert out["B@4"] == pytest.approx(1.0)
    assert out["R"] == pytest.approx(1.0)
    assert out["M"] == "n/a"


def test_score_all_empty():
    with pytest.raises(M.MetricError):
        M.score_all({}, {})


def test_score_all_composition():
    idf = M.build_idf(TOY_REFS)
    cands = {"v1": "a man rides", "v2": "a dog runs", "v3": "plays the guitar"}
    out = M.score_all(cands, TOY_REFS, idf)
    ids = sorted(cands)
    assert out["B@4"] == M.bleu4([cands[v] for v in ids], [TOY_REFS[v] for v in ids])
    assert out["R"] == M.rouge_l([cands[v] for v in ids], [TOY_REFS[v] for v in ids])
    assert out["C"] == M.cider_d(cands, TOY_REFS, idf)


def test_reordering_invariance():
    cands = ["a man rides a horse", "the dog is running", "someone plays"]
    refs = [TOY_REFS["v1"], TOY_REFS["v2"], TOY_REFS["v3"]]
    perm = [2, 0, 1]
    assert M.bleu4(cands, refs) == pytest.approx(
        M.bleu4([cands[i] for i in perm], [refs[i] for i in perm]), abs=1e-12
    )
    assert M.rouge_l(cands, refs) == pytest.approx(
        M.rouge_l([cands[i] for i in perm], [refs[i] for i in perm]), abs=1e-12
    )


def test_metric_tokenization_strips_punctuation():
    assert M.caption_tokens("The cat, sat!") == ["the", "cat", "sat"]
    assert M.bleu4(["the cat sat on the mat."], [["The cat sat on the mat"]]) == 1.0
