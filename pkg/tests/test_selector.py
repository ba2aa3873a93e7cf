import itertools
import json
import statistics

import numpy as np
import pytest

from metafolio.errors import ParseError, ValidationError
from metafolio.forest import Forest, TreeParams, predict_tree
from metafolio.selector import (
    MetaFeatures,
    PolicySelector,
    SelectorHyperparams,
    SelectorSpace,
    compute_pair_weights,
    default_fallback,
    dump_meta_features,
    dump_policy_table,
    fallback_check,
    inner_cv_train_eval,
    load_meta_features,
    load_policy_table,
    normalize_table,
    oracle_policy,
    random_policy,
    single_best,
    train_pairwise_selector,
    tune_selector,
)
from metafolio.synthetic import PLANTED_THRESHOLD, planted_table

FAST = SelectorHyperparams(n_trees=10)


def random_table(seed, n_pol=4, n_data=10):
    rng = np.random.default_rng(seed)
    pols = [f"p{i}" for i in range(n_pol)]
    ds = [f"d{j}" for j in range(n_data)]
    table = {p: {d: float(rng.integers(0, 8)) / 8 for d in ds} for p in pols}
    meta = {d: (int(rng.integers(10, 10**5)), int(rng.integers(1, 100))) for d in ds}
    return table, meta


class TestForest:
    def test_pure_split(self):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([0, 0, 1, 1.0])
        f = Forest.fit(X, y, np.ones(4), TreeParams(min_samples_split=2, min_samples_leaf=1), 1, 0)
        assert f.trees[0]["threshold"] == 2.5
        assert f.predict_proba([1.5]) == 0.0 and f.predict_proba([3.5]) == 1.0

    def test_weights_decide_constant_leaf(self):
        X = np.array([[1.0], [2.0], [3.0]])
        y = np.array([1, 0, 0.0])
        w = np.array([3.0, 1.0, 1.0])
        f = Forest.fit(X, y, w, TreeParams(max_depth=0), 1, 0)
        assert f.trees == [{"prob": 0.6}]

    def test_min_leaf_respected(self):
        X = np.arange(6.0).reshape(-1, 1)
        y = np.array([1, 0, 0, 0, 0, 0.0])
        f = Forest.fit(X, y, np.ones(6), TreeParams(min_samples_split=2, min_samples_leaf=2), 1, 0)

        def leaves(node):
            return [node] if "prob" in node else leaves(node["left"]) + leaves(node["right"])

        def sizes(node, rows):
            if "prob" in node:
                return [len(rows)]
            left = [r for r in rows if r[node["feature"]] <= node["threshold"]]
            right = [r for r in rows if r[node["feature"]] > node["threshold"]]
            return sizes(node["left"], left) + sizes(node["right"], right)

        assert min(sizes(f.trees[0], list(X))) >= 2
        assert leaves(f.trees[0])

    def test_empty_data(self):
        f = Forest.fit(np.empty((0, 2)), np.empty(0), np.empty(0), TreeParams(), 5, 0)
        assert f.predict_proba([1, 1]) == 0.5

    def test_seeded_bootstrap(self):
        rng = np.random.default_rng(0)
        X, y = rng.uniform(size=(30, 2)), rng.integers(0, 2, 30).astype(float)
        p = TreeParams(bootstrap=True, max_features=1)
        assert Forest.fit(X, y, np.ones(30), p, 5, 3) == Forest.fit(X, y, np.ones(30), p, 5, 3)
        assert Forest.fit(X, y, np.ones(30), p, 5, 3) != Forest.fit(X, y, np.ones(30), p, 5, 4)
        assert 0.0 <= Forest.fit(X, y, np.ones(30), p, 5, 3).predict_proba([0.5, 0.5]) <= 1.0
        assert predict_tree({"prob": 0.25}, [0, 0]) == 0.25


class TestPairWeights:
    def test_identical(self):
        assert list(compute_pair_weights([0.2, 0.5], [0.2, 0.5], "raw")) == [0.0, 0.0]

    def test_raw(self):
        assert compute_pair_weights([0.2, 0.5], [0.4, 0.5], "raw") == pytest.approx([0.2, 0.0])

    def test_rank_diff_hand_ranked(self):
        # dataset columns; policy rows A, B, C, D
        allm = np.array([[0.1, 0.4], [0.3, 0.4], [0.2, 0.1], [0.4, 0.2]])
        # column 0 ranks: A1 B3 C2 D4; column 1: A3.5 B3.5 C1 D2
        assert list(compute_pair_weights(allm[0], allm[1], "rank_diff", allm)) == [2.0, 0.0]
        assert list(compute_pair_weights(allm[0], allm[3], "rank_diff", allm)) == [3.0, 1.5]

    def test_scalings(self):
        a, b = np.array([0.2, 0.6]), np.array([0.4, 0.6])
        allm = np.array([a, b, [0.0, 0.8]])
        assert list(compute_pair_weights(a, b, "minmax_pair")) == [1.0, 0.0]
        assert compute_pair_weights(a, b, "min1_pair") == pytest.approx([0.25, 0.0])
        assert compute_pair_weights(a, b, "minmax_all", allm) == pytest.approx([0.5, 0.0])
        assert compute_pair_weights(a, b, "min1_all", allm) == pytest.approx([0.2, 0.0])

    def test_errors(self):
        with pytest.raises(ValidationError):
            compute_pair_weights([0.1], [0.2, 0.3], "raw")
        with pytest.raises(ValidationError):
            compute_pair_weights([0.1], [0.2], "minmax_all")
        with pytest.raises(ValidationError):
            compute_pair_weights([0.1], [0.2], "bogus")


class TestFallback:
    TRAIN = [(1000, 10), (500, 50)]

    def test_examples(self):
        assert fallback_check((800, 8), self.TRAIN) is False
        assert fallback_check((2000, 5), self.TRAIN) is True
        assert fallback_check((500, 50), self.TRAIN) is False

    def test_monotone_grid(self):
        grid = np.unique(np.geomspace(1, 5000, 50).astype(int))
        feats = np.unique(np.linspace(1, 80, 50).astype(int))
        for n, f in itertools.product(grid, feats):
            if fallback_check((n, f), self.TRAIN):
                assert fallback_check((n + 1, f), self.TRAIN)
                assert fallback_check((n, f + 1), self.TRAIN)

    def test_default_fallback_choice(self):
        assert default_fallback(["cv5-fb", "holdout-sh", "cv3-sh"]) == "holdout-sh"
        assert default_fallback(["cv5-sh", "cv3-sh", "cv3-fb"]) == "cv3-sh"
        assert default_fallback(["cv5-fb", "holdout-fb"]) == "holdout-fb"
        assert default_fallback(["x", "y"]) == "x"

    def test_meta_features_positive(self):
        with pytest.raises(ValidationError):
            MetaFeatures(0, 3)


class TestTrainAndSelect:
    def test_unanimous_winner(self):
        table = {"A": {f"d{i}": 0.1 for i in range(5)}, "B": {f"d{i}": 0.5 for i in range(5)}}
        meta = {f"d{i}": (100 * (i + 1), 5 + i) for i in range(5)}
        sel = train_pairwise_selector(meta, table, FAST, 0)
        for q in [(10, 1), (300, 7), (500, 9)]:
            assert sel.select(q).policy == "A"

    def test_out_of_distribution_routes_to_fallback(self):
        table, meta = planted_table(0, 20)
        sel = train_pairwise_selector(meta, table, FAST, 0)
        out = sel.select((10**9, 10**6))
        assert (out.policy, out.fallback) == ("holdout-sh", True)

    def test_depth_zero_matches_single_best(self):
        table, meta = random_table(1)
        hp = SelectorHyperparams(max_depth=0, bootstrap=False, weight_scaling="minmax_all", voting="hard", n_trees=3)
        sel = train_pairwise_selector(meta, table, hp, 0, use_fallback=False)
        for q in [(1, 1), (10**6, 10**4), (500, 20)]:
            assert sel.select(q).policy == single_best(table)

    def test_hard_and_soft_tallies(self):
        # crafted constant pairwise models: P(a beats b)
        probs = {("a", "b"): 0.6, ("a", "c"): 0.55, ("b", "c"): 0.9}
        pairs = {k: Forest([{"prob": v}]) for k, v in probs.items()}
        hard = PolicySelector(["a", "b", "c"], pairs, [(10, 10)], SelectorHyperparams(voting="hard"), "a")
        soft = PolicySelector(["a", "b", "c"], pairs, [(10, 10)], SelectorHyperparams(voting="soft"), "a")
        assert hard.tally((1, 1)) == {"a": 2.0, "b": 1.0, "c": 0.0}
        assert soft.tally((1, 1)) == pytest.approx({"a": 1.15, "b": 1.3, "c": 0.55})
        assert hard.select((1, 1)).policy == "a"
        assert soft.select((1, 1)).policy == "b"

    def test_hard_vote_split_on_half(self):
        pairs = {("a", "b"): Forest([{"prob": 0.5}])}
        sel = PolicySelector(["a", "b"], pairs, [(10, 10)], SelectorHyperparams(), "b")
        assert sel.tally((1, 1)) == {"a": 0.5, "b": 0.5}
        assert sel.select((1, 1)).policy == "a"  # list order breaks the tie

    def test_all_tied_pair_is_constant_half(self):
        table = {"A": {f"d{i}": 0.3 for i in range(4)}, "B": {f"d{i}": 0.3 for i in range(4)}}
        meta = {f"d{i}": (10 * (i + 1), 2) for i in range(4)}
        sel = train_pairwise_selector(meta, table, FAST, 0)
        assert sel.pairs[("A", "B")].predict_proba([15, 2]) == 0.5

    def test_planted_threshold_recovered(self):
        table, meta = planted_table(3, 60)
        train, held = list(meta)[:40], list(meta)[40:]
        sub = {p: {d: table[p][d] for d in train} for p in table}
        sel = train_pairwise_selector(meta, sub, SelectorHyperparams(n_trees=20), 0, use_fallback=False)
        correct = 0
        for d in held:
            want = "cv10-fb" if meta[d][0] < PLANTED_THRESHOLD else "holdout-sh"
            correct += sel.select(meta[d]).policy == want
        assert correct / len(held) >= 0.9

    def test_pairs_and_determinism(self):
        table, meta = random_table(2, 5)
        a = train_pairwise_selector(meta, table, FAST, 7)
        b = train_pairwise_selector(meta, table, FAST, 7, jobs=4)
        assert len(a.pairs) == 10
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_serialization_round_trip(self):
        table, meta = random_table(3)
        sel = train_pairwise_selector(meta, table, FAST, 1)
        doc = json.loads(json.dumps(sel.to_dict()))
        again = PolicySelector.from_dict(doc)
        for q in [(50, 3), (10**4, 50), (10**7, 1)]:
            assert again.select(q) == sel.select(q)
        with pytest.raises(ParseError):
            PolicySelector.from_dict({**doc, "version": 99})

    def test_relabeling_invariance(self):
        table, meta = random_table(4, 3)
        rename = {"p0": "zz", "p1": "aa", "p2": "mm"}
        relabeled = {rename[p]: row for p, row in table.items()}
        a = train_pairwise_selector(meta, table, FAST, 0)
        b = train_pairwise_selector(meta, relabeled, FAST, 0, fallback_policy=rename[a.fallback_policy])
        for d in meta:
            assert rename[a.select(meta[d]).policy] == b.select(meta[d]).policy

    def test_preconditions(self):
        table, meta = random_table(0, 2, 2)
        with pytest.raises(ValidationError):
            train_pairwise_selector(meta, table, FAST, 0)
        table, meta = random_table(0, 1, 5)
        with pytest.raises(ValidationError):
            train_pairwise_selector(meta, table, FAST, 0)
        table, meta = random_table(0, 2, 5)
        with pytest.raises(ValidationError):
            train_pairwise_selector(meta, table, FAST, 0, fallback_policy="nope")

    def test_hyperparameter_ranges(self):
        for bad in [dict(min_samples_split=2), dict(min_samples_leaf=1), dict(max_depth=21), dict(max_features=3), dict(voting="x")]:
            with pytest.raises(ValidationError):
                SelectorHyperparams(**bad)


class TestBaselines:
    def test_single_best(self):
        assert single_best({"only": {"d": 0.4}}) == "only"
        table = {"a": {"d1": 0.3, "d2": 0.3}, "b": {"d1": 0.2, "d2": 0.2}}
        assert single_best(table) == "b"

    def test_single_best_mean_scan(self):
        table, _ = random_table(9, 8, 12)
        norm = normalize_table(table)
        means = {p: sum(norm[p].values()) / 12 for p in table}
        expected = min(table, key=lambda p: (means[p], list(table).index(p)))
        assert single_best(table) == expected

    def test_oracle(self):
        table = {
            "a": {"w": 0.1, "x": 0.5, "y": 0.3, "z": 0.2},
            "b": {"w": 0.2, "x": 0.1, "y": 0.3, "z": 0.4},
            "c": {"w": 0.3, "x": 0.4, "y": 0.2, "z": 0.2},
            "d": {"w": 0.4, "x": 0.3, "y": 0.1, "z": 0.5},
        }
        assert oracle_policy(table) == {"w": "a", "x": "b", "y": "d", "z": "a"}

    def test_oracle_not_worse_than_single_best(self):
        for seed in range(10):
            table, _ = random_table(seed)
            norm = normalize_table(table)
            oracle = oracle_policy(table)
            sb = single_best(table)
            assert sum(norm[oracle[d]][d] for d in oracle) <= sum(norm[sb][d] for d in oracle)

    def test_random_reproducible(self):
        pols, ds = ["a", "b", "c"], [f"d{i}" for i in range(20)]
        assert random_policy(pols, ds, 4) == random_policy(pols, ds, 4)
        assert random_policy(pols, ds, 4) != random_policy(pols, ds, 5)
        assert set(random_policy(pols, ds, 4).values()) <= set(pols)


class TestInnerCV:
    def test_constant_winner_zero_regret(self):
        table, meta = random_table(0, 3, 10)
        table["p0"] = {d: -1.0 for d in table["p0"]}
        res = inner_cv_train_eval(table, meta, 5, FAST, 0, use_fallback=False)
        assert res.per_fold == (0.0,) * 5 and res.mean == 0.0

    def test_leave_one_out(self):
        table, meta = random_table(1, 3, 6)
        res = inner_cv_train_eval(table, meta, 6, FAST, 0)
        assert len(res.per_fold) == 6 and len(res.choices) == 6

    def test_too_few_datasets(self):
        table, meta = random_table(1, 3, 4)
        with pytest.raises(ValidationError):
            inner_cv_train_eval(table, meta, 5, FAST, 0)

    def test_planted_beats_random(self):
        table, meta = planted_table(1, 40)
        res = inner_cv_train_eval(table, meta, 5, FAST, 0)
        norm = normalize_table(table)
        random_regret = np.mean([np.mean([norm[p][d] for p in table]) for d in meta])
        assert res.mean < random_regret


class TestTuning:
    def test_budget_one(self):
        table, meta = planted_table(0, 20)
        res = tune_selector(table, meta, budget=1, seed=3, n_trees=5)
        expected = SelectorSpace().sample(np.random.default_rng(3), 5)
        assert res.hyperparams == expected and len(res.history) == 1

    def test_collapsed_space(self):
        table, meta = planted_table(0, 20)
        point = SelectorSpace((4, 4), (3, 3), (2, 2), (1, 1), (False,), ("soft",), ("raw",))
        res = tune_selector(table, meta, point, budget=3, seed=0, n_trees=5)
        assert res.hyperparams == SelectorHyperparams(4, 3, 2, 1, False, "soft", "raw", 5)

    def test_incumbent_not_worse_than_median(self):
        table, meta = planted_table(2, 30)
        res = tune_selector(table, meta, budget=50, folds=3, seed=0, n_trees=5)
        assert res.score <= statistics.median(s for _, s in res.history)
        assert res.score == min(s for _, s in res.history)

    def test_budget_must_be_positive(self):
        table, meta = planted_table(0, 20)
        with pytest.raises(ValidationError):
            tune_selector(table, meta, budget=0)


class TestCSV:
    def test_round_trip(self):
        table, meta = planted_table(0, 10)
        assert load_policy_table(dump_policy_table(table)) == table
        assert {d: (m.n_samples, m.n_features) for d, m in load_meta_features(dump_meta_features(meta)).items()} == meta

    def test_errors(self):
        with pytest.raises(ParseError):
            load_policy_table("policy,dataset\na,b\n")
        with pytest.raises(ParseError) as info:
            load_policy_table("policy,dataset,loss\na,d,x\n")
        assert info.value.index == 0
        with pytest.raises(ValidationError):
            load_policy_table("policy,dataset,loss\na,d,1\nb,e,1\n")
        with pytest.raises(ParseError):
            load_meta_features("dataset,n_samples,n_features\nd,1.5,2\n")
