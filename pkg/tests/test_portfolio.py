import itertools

import pytest
from helpers import curve_matrix, final_matrix

from metafolio.errors import CapacityError, ValidationError
from metafolio.meta_data import Policy
from metafolio.metrics import normalize_loss
from metafolio.portfolio import brute_force_portfolio, greedy_portfolio, penalty_reduction, replay_with_budget
from metafolio.strategies import ge_s
from metafolio.synthetic import random_matrix

HOLDOUT = Policy.from_id("holdout-fb")
SH = Policy.from_id("holdout-sh")

# test losses c1:(.2,.4) c2:(.4,.1) c3:(.3,.3); bounds come from the observed values
FIXTURE = final_matrix(
    {
        ("c1", "d1"): (0.2, 0.2),
        ("c1", "d2"): (0.4, 0.4),
        ("c2", "d1"): (0.4, 0.4),
        ("c2", "d2"): (0.1, 0.1),
        ("c3", "d1"): (0.3, 0.3),
        ("c3", "d2"): (0.3, 0.3),
    }
)
DS = ["d1", "d2"]


def adtm_of(members, m=FIXTURE, ds=DS, policy=HOLDOUT):
    return ge_s(members, m, ds, policy, target="test", average=True)


class TestGreedy:
    def test_first_pick_is_single_best(self):
        pf = greedy_portfolio(FIXTURE.candidates, FIXTURE, DS, 1, HOLDOUT)
        best = min(FIXTURE.candidates, key=lambda c: (adtm_of([c]), FIXTURE.candidates.index(c)))
        assert pf.members == (best,)

    def test_fixture_pair(self):
        pf = greedy_portfolio(FIXTURE.candidates, FIXTURE, DS, 2, HOLDOUT)
        assert pf.members == ("c1", "c2")
        assert adtm_of(pf.members) == 0.0
        assert pf.strategy == "holdout-fb/test"
        # provenance: marginal ADTM gains, starting from 1.0 for the empty portfolio
        assert sum(pf.provenance) == pytest.approx(1.0 - adtm_of(pf.members))

    def test_pair_oracle(self):
        ordered = min(itertools.permutations(FIXTURE.candidates, 2), key=lambda pair: adtm_of(list(pair)))
        assert adtm_of(list(ordered)) == adtm_of(["c1", "c2"])

    def test_identical_candidates_keep_order(self):
        m = final_matrix({(c, d): (0.3, 0.3) for c in ("x", "y", "z", "w") for d in ("a", "b")}, bounds={"a": (0, 1), "b": (0, 1)})
        assert greedy_portfolio(m.candidates, m, ["a", "b"], 3, HOLDOUT).members == ("x", "y", "z")

    def test_invalid_size(self):
        with pytest.raises(ValidationError):
            greedy_portfolio(FIXTURE.candidates, FIXTURE, DS, 0, HOLDOUT)

    def test_stops_when_candidates_run_out(self):
        assert len(greedy_portfolio(FIXTURE.candidates, FIXTURE, DS, 10, HOLDOUT)) == 3

    def test_early_stop(self):
        pf = greedy_portfolio(FIXTURE.candidates, FIXTURE, DS, 3, HOLDOUT, early_stop=True)
        assert pf.members == ("c1", "c2")

    @pytest.mark.parametrize("policy", [HOLDOUT, SH, Policy.from_id("cv3-fb")])
    def test_fast_path_matches_definition(self, policy):
        m = random_matrix(3, 8, 4)
        pf = greedy_portfolio(m.candidates, m, m.dataset_ids, 4, policy)
        # reference: plain argmin of ge_S over the remaining candidates each step
        members = []
        for _ in range(4):
            rest = [c for c in m.candidates if c not in members]
            scores = [ge_s(members + [c], m, m.dataset_ids, policy, target="test") for c in rest]
            members.append(rest[min(range(len(rest)), key=lambda i: (scores[i], i))])
        assert list(pf.members) == members

    def test_jobs_and_renaming_invariance(self):
        m = random_matrix(5, 8, 5)
        a = greedy_portfolio(m.candidates, m, m.dataset_ids, 4, SH)
        b = greedy_portfolio(m.candidates, m, m.dataset_ids, 4, SH, jobs=4)
        assert a == b
        rename = {c: f"z{9 - i}" for i, c in enumerate(m.candidates)}
        from metafolio.meta_data import PerformanceMatrix

        renamed = PerformanceMatrix(m.datasets, [rename[c] for c in m.candidates], {(rename[c], d): v for (c, d), v in m.entries.items()})
        c = greedy_portfolio(renamed.candidates, renamed, m.dataset_ids, 4, SH)
        assert c.members == tuple(rename[x] for x in a.members)

    @pytest.mark.parametrize("seed", range(5))
    def test_objective_nonincreasing(self, seed):
        m = random_matrix(seed, 8, 5)
        pf = greedy_portfolio(m.candidates, m, m.dataset_ids, 8, HOLDOUT)
        values = [adtm_of(list(pf.members[:k]), m, m.dataset_ids) for k in range(9)]
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


class TestBruteForce:
    def test_full_set(self):
        pf, value = brute_force_portfolio(FIXTURE.candidates, FIXTURE, DS, 3, HOLDOUT)
        assert pf.members == ("c1", "c2", "c3") and value == 0.0

    def test_fixture_value(self):
        _, value = brute_force_portfolio(FIXTURE.candidates, FIXTURE, DS, 2, HOLDOUT)
        assert value == 0.0

    def test_p1_equals_greedy(self):
        m = random_matrix(11, 6, 4)
        pf, _ = brute_force_portfolio(m.candidates, m, m.dataset_ids, 1, HOLDOUT)
        assert pf.members == greedy_portfolio(m.candidates, m, m.dataset_ids, 1, HOLDOUT).members

    def test_cap(self):
        m = random_matrix(0, 8, 1)
        with pytest.raises(CapacityError, match="smaller"):
            brute_force_portfolio(m.candidates, m, m.dataset_ids, 3, HOLDOUT, cap=50)


class TestPenaltyReduction:
    def test_empty(self):
        assert penalty_reduction([], FIXTURE, DS, HOLDOUT) == 0.0

    def test_all_minima(self):
        assert penalty_reduction(["c1", "c2"], FIXTURE, DS, HOLDOUT) == 2.0

    def test_recomputed(self):
        m = random_matrix(6, 6, 4)
        pf = ["c0", "c3", "c5"]
        total = 0.0
        for d in m.dataset_ids:
            losses = [m.worst_loss(d) if m.curve(c, d) is None else m.curve(c, d).final.test_loss for c in pf]
            total += 1.0 - normalize_loss(min(losses), m.stats(), d)
        assert penalty_reduction(pf, m, m.dataset_ids, HOLDOUT) == pytest.approx(total)


class TestReplay:
    def test_horizon_too_short(self):
        m = curve_matrix({"a": [(1, 0.2, 0.3, 50.0)]}, bounds=(0.1, 0.9))
        tr = replay_with_budget(["a"], m, "d", 10.0)
        assert {p["test_loss"] for p in tr.points} == {0.9}

    def test_capped_member(self):
        m = curve_matrix(
            {
                "a": [(1, 0.5, 0.5, 25.0), (2, 0.4, 0.45, 50.0)],
                "b": [(1, 0.35, 0.3, 40.0), (2, 0.1, 0.1, 70.0)],
                "c": [(1, 0.3, 0.35, 40.0)],
            }
        )
        tr = replay_with_budget(["a", "b", "c"], m, "d", 600.0, per_eval_cap=60.0)
        assert tr.attempted == ["a", "b", "c"]
        assert tr.elapsed == 150.0
        # b only reaches its first checkpoint inside the cap
        assert [(p["candidate"], p["test_loss"]) for p in tr.points[1:]] == [("a", 0.45), ("b", 0.3), ("c", 0.35)]

    def test_single_member_full_budget(self):
        m = curve_matrix({"a": [(1, 0.5, 0.5, 5.0), (4, 0.2, 0.25, 20.0)]})
        tr = replay_with_budget(["a"], m, "d", 1e9)
        assert tr.final_loss == 0.25

    def test_stops_at_horizon(self):
        m = curve_matrix({c: [(1, 0.5 - i / 10, 0.5, 40.0)] for i, c in enumerate("abcd")})
        tr = replay_with_budget(list("abcd"), m, "d", 100.0, per_eval_cap=50.0)
        assert tr.attempted == ["a", "b"] and tr.elapsed == 80.0

    def test_default_cap_is_tenth(self):
        m = curve_matrix({"a": [(1, 0.5, 0.5, 20.0)]})
        assert replay_with_budget(["a"], m, "d", 600.0).cap_s == 60.0

    def test_failed_costs_cap(self):
        m = curve_matrix({"a": None, "b": [(1, 0.1, 0.1, 1.0)]}, bounds=(0.0, 0.8))
        tr = replay_with_budget(["a", "b"], m, "d", 100.0)
        assert tr.points[1] == {"elapsed_s": 10.0, "test_loss": 0.8, "val_loss": 0.8, "candidate": "a"}
        assert tr.final_loss == 0.1

    def test_incumbent_validation_nonincreasing(self):
        m = random_matrix(2, 12, 3)
        for d in m.dataset_ids:
            tr = replay_with_budget(m.candidates, m, d, 50.0, policy=SH)
            vals = [p["val_loss"] for p in tr.points]
            assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_sh_replay_follows_schedule(self):
        rows = [(32, 0.5, 0.5, 1.0), (128, 0.4, 0.4, 2.0), (512, 0.3, 0.3, 4.0)]
        m = curve_matrix({c: rows for c in "abcde"})
        tr = replay_with_budget(list("abcde"), m, "d", 1e6, policy=SH)
        # floor(5/4) = 1 survivor, which then runs the two remaining rungs
        assert tr.attempted == ["a", "b", "c", "d", "e", "a", "a"]
        assert tr.elapsed == 5 * 1.0 + 2.0 + 4.0

    def test_invalid_horizon(self):
        with pytest.raises(ValidationError):
            replay_with_budget(["a"], FIXTURE, "d1", 0.0)
