from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidisum.rouge import RougeScore, lcs_length, ngrams, rouge_l, rouge_n, rouge_report

tokens = st.lists(st.sampled_from("abcde"), max_size=10)


def brute_lcs(a, b):
    best = 0
    for k in range(min(len(a), len(b)) + 1):
        subs = {tuple(a[i] for i in idx) for idx in combinations(range(len(a)), k)}
        if any(tuple(b[i] for i in idx) in subs for idx in combinations(range(len(b)), k)):
            best = k
    return best


class TestRougeN:
    def test_identical(self):
        assert rouge_n("a b c".split(), "a b c".split()) == RougeScore(1.0, 1.0, 1.0)

    def test_disjoint(self):
        assert rouge_n("a b".split(), "c d".split()) == RougeScore(0.0, 0.0, 0.0)

    def test_clipped_counts(self):
        s = rouge_n("a b a".split(), "a b c".split(), 1)
        assert (s.precision, s.recall, s.f1) == (2 / 3, 2 / 3, 2 / 3)

    def test_bigrams(self):
        s = rouge_n("a b c d".split(), "a b d".split(), 2)
        assert (s.precision, s.recall) == (1 / 3, 1 / 2)
        assert s.f1 == pytest.approx(0.4, rel=1e-15)

    def test_too_short_for_n(self):
        assert rouge_n(["a"], ["a"], 2) == RougeScore(0.0, 0.0, 0.0)

    def test_ngram_counts(self):
        assert ngrams("a b a b".split(), 2) == {("a", "b"): 2, ("b", "a"): 1}
        with pytest.raises(ValueError):
            ngrams(["a"], 0)

    @settings(max_examples=200, deadline=None)
    @given(tokens, tokens, st.integers(1, 3))
    def test_swap_symmetry(self, c, r, n):
        a, b = rouge_n(c, r, n), rouge_n(r, c, n)
        assert (a.precision, a.recall) == (b.recall, b.precision)
        assert a.f1 == pytest.approx(b.f1, rel=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(tokens, tokens, st.permutations("abcde"))
    def test_relabeling_invariance(self, c, r, perm):
        relabel = dict(zip("abcde", perm))
        mapped = lambda seq: [relabel[t] for t in seq]  # noqa: E731
        assert rouge_n(mapped(c), mapped(r), 1) == rouge_n(c, r, 1)
        assert rouge_n(mapped(c), mapped(r), 2) == rouge_n(c, r, 2)


class TestRougeL:
    def test_identical(self):
        assert rouge_l("x y z".split(), "x y z".split()) == RougeScore(1.0, 1.0, 1.0)

    def test_hand_lcs(self):
        s = rouge_l("a c b".split(), "a b c".split())
        assert lcs_length("a c b".split(), "a b c".split()) == 2
        assert (s.precision, s.recall, s.f1) == (2 / 3, 2 / 3, 2 / 3)

    def test_empty_candidate(self):
        assert rouge_l([], "a b".split()) == RougeScore(0.0, 0.0, 0.0)

    @settings(max_examples=300, deadline=None)
    @given(tokens, tokens)
    def test_lcs_matches_brute_force(self, a, b):
        assert lcs_length(a, b) == brute_lcs(a, b)

    @settings(max_examples=200, deadline=None)
    @given(tokens, tokens)
    def test_swap_symmetry(self, c, r):
        a, b = rouge_l(c, r), rouge_l(r, c)
        assert (a.precision, a.recall) == (b.recall, b.precision)
        assert a.f1 == pytest.approx(b.f1, rel=1e-15)


class TestReport:
    def test_means_over_pairs(self):
        rep = rouge_report(["a b a".split(), "x".split()], ["a b c".split(), "x".split()])
        assert set(rep) == {"rouge-1", "rouge-2", "rouge-l"}
        assert rep["rouge-1"].f1 == pytest.approx((2 / 3 + 1) / 2)
        # second pair has no bigrams at all
        assert rep["rouge-2"].recall == pytest.approx(0.5 / 2)

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            rouge_report([["a"]], [])
        with pytest.raises(ValueError):
            rouge_report([], [])
