import itertools

import numpy as np
import pytest
from scipy.stats import rankdata

from metafolio.metrics import (
    NormalizationStats,
    adtm,
    average_rank,
    normalize_loss,
    sign_test,
    wilcoxon_signed_rank,
)

STATS = NormalizationStats({"a": (0.1, 0.5), "b": (0.2, 0.2), "c": (0.0, 1.0)})


def exhaustive_wilcoxon(a, b):
    """Two-sided p over all 2^n sign flips of the nonzero differences."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    stats = [sum(x for x, s in zip(r, signs) if s) for signs in itertools.product((0, 1), repeat=len(r))]
    lower = sum(s <= w + 1e-9 for s in stats)
    upper = sum(s >= w - 1e-9 for s in stats)
    return min(1.0, 2 * min(lower, upper) / len(stats))


class TestNormalization:
    def test_examples(self):
        assert normalize_loss(0.3, STATS, "a") == pytest.approx(0.5)
        assert normalize_loss(0.1, STATS, "a") == 0.0
        assert normalize_loss(0.2, STATS, "b") == 0.0

    def test_clamped(self):
        assert normalize_loss(0.9, STATS, "a") == 1.0
        assert normalize_loss(0.0, STATS, "a") == 0.0

    def test_unknown_dataset(self):
        with pytest.raises(KeyError):
            normalize_loss(0.1, STATS, "zz")

    def test_adtm(self):
        assert adtm({"a": 0.1, "c": 1.0}, STATS) == 0.5
        assert adtm({"a": 0.1, "b": 0.2, "c": 0.0}, STATS) == 0.0
        rng = np.random.default_rng(0)
        losses = {"a": float(rng.uniform(0.1, 0.5)), "c": float(rng.uniform())}
        expected = ((losses["a"] - 0.1) / 0.4 + losses["c"]) / 2
        assert adtm(losses, STATS) == pytest.approx(expected)
        with pytest.raises(ValueError):
            adtm({}, STATS)

    def test_from_table(self):
        s = NormalizationStats.from_table({"p": {"a": 0.3, "b": 0.1}, "q": {"a": 0.1, "b": 0.4}})
        assert s["a"] == (0.1, 0.3) and s["b"] == (0.1, 0.4)
        with pytest.raises(ValueError):
            NormalizationStats({"x": (1.0, 0.0)})


class TestAverageRank:
    def test_strict_winner(self):
        res = {"A": {"d1": [0.1, 0.2], "d2": [0.0]}, "B": {"d1": [0.5], "d2": [0.3, 0.4]}}
        assert average_rank(res, 50, 0) == {"A": 1.0, "B": 2.0}

    def test_ties(self):
        res = {"A": {"d": [0.3]}, "B": {"d": [0.3]}}
        assert average_rank(res, 10, 0) == {"A": 1.5, "B": 1.5}

    def test_mismatched_datasets(self):
        with pytest.raises(ValueError):
            average_rank({"A": {"d": [1]}, "B": {"e": [1]}})

    def test_matches_enumeration(self):
        rng = np.random.default_rng(5)
        res = {m: {d: list(rng.uniform(size=2)) for d in ("d1", "d2")} for m in "ABC"}
        exact = {m: 0.0 for m in res}
        for d in ("d1", "d2"):
            combos = list(itertools.product(*(res[m][d] for m in res)))
            for combo in combos:
                for m, r in zip(res, rankdata(combo)):
                    exact[m] += r / len(combos) / 2
        # 2000 draws put the 0.05 tolerance at more than 4 standard errors
        got = average_rank(res, 2000, 0)
        for m in res:
            assert got[m] == pytest.approx(exact[m], abs=0.05)

    def test_relabeling_permutes_output(self):
        rng = np.random.default_rng(1)
        res = {m: {d: list(rng.uniform(size=3)) for d in ("x", "y")} for m in "ABC"}
        relabeled = {"Q": res["C"], "R": res["A"], "S": res["B"]}
        a, b = average_rank(res, 100, 7), average_rank(relabeled, 100, 7)
        assert (a["A"], a["B"], a["C"]) == (b["R"], b["S"], b["Q"])

    def test_seeded(self):
        res = {m: {"d": [0.1, 0.5, 0.3]} for m in "AB"}
        assert average_rank(res, 30, 3) == average_rank(res, 30, 3)


class TestSignTest:
    @pytest.mark.parametrize("w,l,p", [(28, 11, 0.009475), (26, 13, 0.053252)])
    def test_reference_values(self, w, l, p):
        assert sign_test(w, l) == pytest.approx(p, abs=1e-6)

    def test_symmetry_and_extremes(self):
        assert sign_test(11, 28) == sign_test(28, 11)
        assert sign_test(39, 0) < 1e-3
        assert sign_test(5, 5) == 1.0
        with pytest.raises(ValueError):
            sign_test(0, 0)


class TestWilcoxon:
    def test_equal_samples(self):
        assert wilcoxon_signed_rank([1, 2, 3], [1, 2, 3]) == 1.0

    def test_dominating_ten_pairs(self):
        a = np.arange(10) + 1.0
        assert wilcoxon_signed_rank(a, np.zeros(10)) == pytest.approx(2 / 2**10)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_eight_pairs(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert wilcoxon_signed_rank(a, b) == exhaustive_wilcoxon(a, b)

    def test_ties_exact(self):
        a = [1, 2, 2, 3, 0, 5, 5]
        b = [0, 0, 0, 0, 1, 0, 0]
        assert wilcoxon_signed_rank(a, b) == exhaustive_wilcoxon(a, b)

    def test_normal_approximation_close_to_scipy(self):
        from scipy.stats import wilcoxon

        rng = np.random.default_rng(0)
        a, b = rng.normal(size=60), rng.normal(0.3, 1, size=60)
        ref = wilcoxon(a, b, method="approx", correction=False).pvalue
        assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2], [1])
