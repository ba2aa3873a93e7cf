"""Greedy portfolio construction, an exhaustive oracle, and time-bounded replay."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

from ._parallel import ordered_map
from .errors import CapacityError, ValidationError
from .meta_data import PerformanceMatrix, Policy, Portfolio
from .metrics import NormalizationStats, normalize_loss
from .strategies import (
    Evaluation,
    Source,
    _folds,
    _run_sh,
    ge_s,
    lookup,
    tie_key,
    policy_folds,
    schedule_for,
    sh_evaluations,
)

__all__ = [
    "greedy_portfolio",
    "brute_force_portfolio",
    "penalty_reduction",
    "replay_with_budget",
    "Trajectory",
]


def _final_lookup(source, policy):
    """Cached final-budget lookup for full-budget policies, ``None`` for SH."""
    folds = policy_folds(policy, source)
    if policy.uses_sh:
        return None
    # full budget: P + [c] keeps the incumbent unless c is strictly better
    cache: dict[tuple[str, str], Evaluation] = {}

    def ev(c, d):
        k = (c, d)
        if k not in cache:
            cache[k] = lookup(folds, c, d, None)
        return cache[k]

    return ev


def _memo_lookup(folds, dataset):
    cache: dict[tuple[str, int], Evaluation] = {}

    def ev(c, budget):
        k = (c, budget)
        if k not in cache:
            cache[k] = lookup(folds, c, dataset, budget)
        return cache[k]

    return ev


def greedy_portfolio(
    candidates: Sequence[str],
    source: Source,
    datasets: Sequence[str],
    p: int,
    policy: Policy,
    target: str = "test",
    stats: NormalizationStats | None = None,
    early_stop: bool = False,
    jobs: int = 1,
) -> Portfolio:
    """Greedily add the candidate minimizing the summed normalized loss.

    Ties go to the earlier candidate. The loop runs until ``p`` members (or
    the candidates run out) unless ``early_stop`` is set, in which case it
    also stops once no candidate strictly improves the objective.
    Provenance records each member's marginal ADTM improvement.
    """
    if p < 1:
        raise ValidationError(f"portfolio size must be >= 1, got {p}")
    candidates = list(candidates)
    datasets = list(datasets)
    if not candidates:
        raise ValidationError("no candidates to choose from")
    if not datasets:
        raise ValidationError("need at least one dataset")
    if stats is None:
        stats = _folds(source)[0].stats()
    n = len(datasets)
    ev = _final_lookup(source, policy)
    if ev is None:
        folds, schedule = policy_folds(policy, source), schedule_for(policy)
        sh_lookups = {d: _memo_lookup(folds, d) for d in datasets}
    key = (lambda e: tie_key(e.test_loss)) if target == "test" else (lambda e: tie_key(e.val_loss))

    members: list[str] = []
    gains: list[float] = []
    incumbents: list[Evaluation | None] = [None] * n
    current = float(n)  # empty portfolio: worst normalized loss everywhere
    remaining = list(candidates)

    while len(members) < p and remaining:
        if ev is not None:

            def score(c):
                total = []
                for j, d in enumerate(datasets):
                    e, inc = ev(c, d), incumbents[j]
                    best = e if inc is None or key(e) < key(inc) else inc
                    total.append(normalize_loss(best.test_loss, stats, d))
                return math.fsum(total)

        else:

            def score(c):
                return math.fsum(
                    normalize_loss(
                        _run_sh(members + [c], folds, d, schedule, target, None, sh_lookups[d]).loss, stats, d
                    )
                    for d in datasets
                )

        values = ordered_map(score, remaining, jobs)
        best_i = min(range(len(values)), key=lambda i: (values[i], i))
        if early_stop and members and not values[best_i] < current:
            break
        chosen = remaining.pop(best_i)
        gains.append((current - values[best_i]) / n)
        current = values[best_i]
        members.append(chosen)
        if ev is not None:
            for j, d in enumerate(datasets):
                e, inc = ev(chosen, d), incumbents[j]
                if inc is None or key(e) < key(inc):
                    incumbents[j] = e

    return Portfolio(tuple(members), tuple(gains), f"{policy.id}/{target}")


def brute_force_portfolio(
    candidates: Sequence[str],
    source: Source,
    datasets: Sequence[str],
    p: int,
    policy: Policy,
    target: str = "test",
    stats: NormalizationStats | None = None,
    cap: int = 10**6,
) -> tuple[Portfolio, float]:
    """Exact minimizer of the summed normalized loss over subsets of size <= ``p``.

    Members are kept in candidate order. Larger subsets are enumerated first,
    so among equal values the largest, lexicographically first subset wins.
    """
    if p < 1:
        raise ValidationError(f"portfolio size must be >= 1, got {p}")
    candidates = list(candidates)
    p = min(p, len(candidates))
    count = sum(math.comb(len(candidates), k) for k in range(1, p + 1))
    if count > cap:
        raise CapacityError(
            f"{count} subsets exceed the brute-force cap of {cap}; use fewer candidates or a smaller p"
        )
    best, best_value = (), math.inf
    for k in range(p, 0, -1):
        for subset in itertools.combinations(candidates, k):
            v = ge_s(subset, source, datasets, policy, stats, target)
            if v < best_value:
                best, best_value = subset, v
    return Portfolio(best, (), f"{policy.id}/{target}/optimal"), best_value


def penalty_reduction(
    portfolio,
    source: Source,
    datasets: Sequence[str],
    policy: Policy,
    stats: NormalizationStats | None = None,
    target: str = "test",
) -> float:
    """Reduction of the summed normalized loss relative to the empty portfolio."""
    datasets = list(datasets)
    return float(len(datasets)) - ge_s(list(portfolio), source, datasets, policy, stats, target)


# ------------------------------------------------------------------ replay


@dataclass
class Trajectory:
    """Incumbent over simulated wall time; the first point is the empty start."""

    dataset: str
    horizon_s: float
    cap_s: float
    points: list[dict] = field(default_factory=list)
    attempted: list[str] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.points[-1]["test_loss"]

    @property
    def elapsed(self) -> float:
        return self.points[-1]["elapsed_s"]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "horizon_s": self.horizon_s,
            "cap_s": self.cap_s,
            "attempted": list(self.attempted),
            "trajectory": list(self.points),
        }


def _capped_run(matrix: PerformanceMatrix, candidate: str, dataset: str, budget: int | None, cap: float):
    """``(cost, val, test)`` of training ``candidate`` up to ``budget`` under a time cap."""
    worst = matrix.worst_loss(dataset)
    curve = matrix.curve(candidate, dataset)
    if curve is None:
        return cap, worst, worst
    if budget is None:
        budget = curve.final.budget
    cost = curve.time_to_reach(budget)
    if cost > cap:
        cost = cap
    cp = curve.within_time(cost, budget)
    if cp is None:
        return cost, worst, worst
    return cost, cp.val_loss, cp.test_loss


def replay_with_budget(
    portfolio,
    matrix: PerformanceMatrix,
    dataset: str,
    horizon_s: float,
    per_eval_cap: float | None = None,
    policy: Policy | None = None,
) -> Trajectory:
    """Simulate running the portfolio on ``dataset`` within ``horizon_s`` seconds.

    Each evaluation is charged the recorded wall time needed to reach its
    budget, truncated at ``per_eval_cap`` (default ``horizon_s / 10``); a
    truncated run yields its last checkpoint within the cap, or the worst
    loss. Replay stops before the first evaluation that would push the
    elapsed time past the horizon. With an SH policy evaluations follow the
    bracket schedule and promotions use the (capped) validation losses.
    The incumbent is the best result so far by validation loss.
    """
    if not horizon_s > 0:
        raise ValidationError("horizon must be positive")
    cap = horizon_s / 10.0 if per_eval_cap is None else float(per_eval_cap)
    worst = matrix.worst_loss(dataset)
    traj = Trajectory(dataset, float(horizon_s), cap)
    traj.points.append({"elapsed_s": 0.0, "test_loss": worst, "val_loss": worst, "candidate": None})
    members = list(portfolio)
    if not members:
        return traj

    def run(c, budget):
        cost, val, test = _capped_run(matrix, c, dataset, budget, cap)
        return Evaluation(c, budget, val, test, cost)

    if policy is not None and policy.uses_sh:
        stream = (ev for _, _, ev in sh_evaluations(members, schedule_for(policy), run, lambda e: e.val_loss))
    else:
        stream = (run(c, None) for c in members)

    elapsed = 0.0
    incumbent = None
    for ev in stream:
        if elapsed + ev.wall_time_s > horizon_s:
            break
        elapsed += ev.wall_time_s
        traj.attempted.append(ev.candidate)
        if incumbent is None or tie_key(ev.val_loss) < tie_key(incumbent.val_loss):
            incumbent = ev
        traj.points.append(
            {
                "elapsed_s": elapsed,
                "test_loss": incumbent.test_loss,
                "val_loss": incumbent.val_loss,
                "candidate": incumbent.candidate,
            }
        )
    return traj
