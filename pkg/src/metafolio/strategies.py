"""Model-selection and budget-allocation evaluators.

Every evaluator picks one portfolio member per dataset and reports that
choice's test loss. ``target="validation"`` selects on validation loss, as a
deployed system would; ``target="test"`` selects on test loss, which is the
offline construction convention under which holdout/CV portfolio losses
become monotone and submodular.

A *source* is either one :class:`PerformanceMatrix` or a sequence of
per-fold matrices; with several folds, losses and wall times are combined
across folds (mean losses, summed time).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence, Union

from .errors import NoResultYet, ValidationError
from .meta_data import PerformanceMatrix, Policy
from .metrics import NormalizationStats, normalize_loss

__all__ = [
    "Evaluation",
    "SelectionTrace",
    "SHSchedule",
    "make_sh_schedule",
    "select_holdout",
    "portfolio_loss_cv",
    "run_sh_bracket",
    "portfolio_loss_sh",
    "portfolio_loss",
    "evaluate_portfolio",
    "ge_s",
]

Source = Union[PerformanceMatrix, Sequence[PerformanceMatrix]]
TARGETS = ("validation", "test")


@dataclass(frozen=True)
class Evaluation:
    candidate: str
    budget: int | None
    val_loss: float
    test_loss: float
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "candidate": self.candidate,
            "budget": self.budget,
            "val_loss": self.val_loss,
            "test_loss": self.test_loss,
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class SelectionTrace:
    """All evaluations on one dataset, in order, plus the selected one."""

    dataset: str
    evaluations: list[Evaluation] = field(default_factory=list)
    chosen: str | None = None
    loss: float = math.nan
    brackets: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "chosen": self.chosen,
            "test_loss": self.loss,
            "brackets": self.brackets,
            "evaluations": [e.to_dict() for e in self.evaluations],
        }


@dataclass(frozen=True)
class SHSchedule:
    eta: float
    b_min: int
    b_max: int
    s_max: int
    rung_budgets: tuple[int, ...]
    n_slots: int
    survivors: tuple[int, ...]


def make_sh_schedule(eta: float, b_min: int, b_max: int) -> SHSchedule:
    """Successive-halving bracket geometry for budgets ``b_min .. b_max``.

    ``s_max = floor(log_eta(b_max / b_min))``; rung ``i`` runs at
    ``b_min * eta**i`` with ``floor(n * eta**-i)`` survivors where
    ``n = eta**s_max``.
    """
    if not eta > 1:
        raise ValidationError(f"eta must be > 1, got {eta}")
    if not 1 <= b_min <= b_max:
        raise ValidationError(f"need 1 <= b_min <= b_max, got {b_min}, {b_max}")
    ratio = b_max / b_min
    s_max = 0
    # integer search instead of floor(log(...)) to dodge 2.9999999 rounding
    while eta ** (s_max + 1) <= ratio * (1 + 1e-12):
        s_max += 1
    rungs = tuple(int(round(b_min * eta**i)) for i in range(s_max + 1))
    n = int(math.ceil(eta**s_max - 1e-9))
    survivors = tuple(int(math.floor(n * eta**-i + 1e-9)) for i in range(s_max + 1))
    return SHSchedule(float(eta), int(b_min), int(b_max), s_max, rungs, n, survivors)


# ------------------------------------------------------------------ lookups


def _folds(source: Source) -> list[PerformanceMatrix]:
    if isinstance(source, PerformanceMatrix):
        return [source]
    folds = list(source)
    if not folds:
        raise ValidationError("need at least one matrix")
    return folds


def _check_target(target: str) -> None:
    if target not in TARGETS:
        raise ValidationError(f"selection target must be one of {TARGETS}, got {target!r}")


def lookup(folds: Sequence[PerformanceMatrix], candidate: str, dataset: str, budget: int | None) -> Evaluation:
    """Fold-averaged losses of ``candidate`` at ``budget`` (``None`` = final checkpoint).

    FAILED or missing entries and budgets below the first checkpoint yield
    the dataset's worst loss.
    """
    vals, tests, wall = [], [], 0.0
    for m in folds:
        worst = m.worst_loss(dataset)
        curve = m.curve(candidate, dataset)
        if curve is None:
            vals.append(worst)
            tests.append(worst)
            continue
        if budget is None:
            cp = curve.final
            wall += cp.wall_time_s
        else:
            wall += curve.time_to_reach(budget)
            try:
                cp = curve.at(budget)
            except NoResultYet:
                vals.append(worst)
                tests.append(worst)
                continue
        vals.append(cp.val_loss)
        tests.append(cp.test_loss)
    k = len(folds)
    return Evaluation(candidate, budget, math.fsum(vals) / k, math.fsum(tests) / k, wall)


def tie_key(loss: float) -> float:
    """Comparison key for losses; values equal to 12 decimals count as ties.

    Fold means such as (0.2 + 0.4) / 2 and (0.31 + 0.29) / 2 differ in the
    last bit; rounding keeps such ties with the earlier candidate.
    """
    return round(loss, 12)


def _key(ev: Evaluation, target: str) -> float:
    return tie_key(ev.test_loss if target == "test" else ev.val_loss)


def _select_full_budget(members, folds, dataset, target) -> SelectionTrace:
    trace = SelectionTrace(dataset)
    best = None
    for c in members:
        ev = lookup(folds, c, dataset, None)
        trace.evaluations.append(ev)
        # strict < keeps the member evaluated first on ties
        if best is None or _key(ev, target) < _key(best, target):
            best = ev
    if best is not None:
        trace.chosen, trace.loss = best.candidate, best.test_loss
    return trace


def select_holdout(portfolio, matrix: PerformanceMatrix, dataset: str, target: str = "validation") -> SelectionTrace:
    """Pick the member with the lowest holdout loss at its final checkpoint."""
    _check_target(target)
    members = list(portfolio)
    if not members:
        raise ValidationError("portfolio is empty")
    return _select_full_budget(members, [matrix], dataset, target)


def _cv_folds(matrix_folds: Source, k: int | None) -> list[PerformanceMatrix]:
    folds = _folds(matrix_folds)
    if k is None:
        k = len(folds)
    if k < 2:
        raise ValidationError(f"cross-validation needs K >= 2, got {k}")
    if len(folds) == 1 and k > 1:
        return folds * k
    if len(folds) != k:
        raise ValidationError(f"expected {k} fold matrices, got {len(folds)}")
    return folds


def portfolio_loss_cv(
    portfolio, matrix_folds: Source, dataset: str, k: int | None = None, target: str = "validation"
) -> SelectionTrace:
    """K-fold selection: average each member's fold losses, then take the argmin.

    A single matrix is replicated across all ``k`` folds.
    """
    _check_target(target)
    members = list(portfolio)
    if not members:
        raise ValidationError("portfolio is empty")
    return _select_full_budget(members, _cv_folds(matrix_folds, k), dataset, target)


# ------------------------------------------------------- successive halving


def sh_evaluations(
    members: Sequence[str],
    schedule: SHSchedule,
    evaluate: Callable[[str, int], Evaluation],
    key: Callable[[Evaluation], float],
    bracket_size: int | None = None,
) -> Iterator[tuple[int, int, Evaluation]]:
    """Yield ``(bracket, rung, evaluation)`` in execution order.

    Members are consumed in order, up to ``bracket_size`` (default
    ``schedule.n_slots``) per bracket. After each non-final rung the best
    ``max(1, floor(m / eta))`` of the ``m`` current survivors advance; ties go
    to the earlier member. For a full bracket this is exactly the schedule's
    survivor count.
    """
    size = bracket_size or schedule.n_slots
    members = list(members)
    last = len(schedule.rung_budgets) - 1
    for b, start in enumerate(range(0, len(members), size)):
        alive = members[start : start + size]
        for i, budget in enumerate(schedule.rung_budgets):
            scored = []
            for pos, c in enumerate(alive):
                ev = evaluate(c, budget)
                yield b, i, ev
                scored.append((tie_key(key(ev)), pos, c))
            if i < last:
                keep = max(1, int(math.floor(len(alive) / schedule.eta + 1e-9)))
                scored.sort(key=lambda t: (t[0], t[1]))
                alive = [c for _, _, c in scored[:keep]]


def _run_sh(members, folds, dataset, schedule, target, bracket_size, evaluate=None) -> SelectionTrace:
    trace = SelectionTrace(dataset)
    best = None
    if evaluate is None:
        evaluate = lambda c, budget: lookup(folds, c, dataset, budget)  # noqa: E731
    for b, _, ev in sh_evaluations(
        members,
        schedule,
        evaluate,
        lambda ev: _key(ev, target),
        bracket_size,
    ):
        trace.brackets = b + 1
        trace.evaluations.append(ev)
        # running best over every (candidate, rung) result, first wins ties
        if best is None or _key(ev, target) < _key(best, target):
            best = ev
    if best is not None:
        trace.chosen, trace.loss = best.candidate, best.test_loss
    return trace


def run_sh_bracket(
    candidates: Sequence[str], matrix: Source, dataset: str, schedule: SHSchedule, target: str = "validation"
) -> SelectionTrace:
    """Run one SH bracket over all ``candidates``.

    The trace's ``loss`` is the test loss of the best evaluation (by the
    selection target) across every rung, i.e. a running minimum as in the
    portfolio-loss bookkeeping.
    """
    _check_target(target)
    candidates = list(candidates)
    if not candidates:
        raise ValidationError("SH bracket needs at least one candidate")
    return _run_sh(candidates, _folds(matrix), dataset, schedule, target, bracket_size=len(candidates))


def portfolio_loss_sh(
    portfolio, matrix: Source, dataset: str, schedule: SHSchedule, target: str = "validation"
) -> SelectionTrace:
    """Consume the portfolio in order, ``schedule.n_slots`` members per bracket."""
    _check_target(target)
    members = list(portfolio)
    if not members:
        raise ValidationError("portfolio is empty")
    return _run_sh(members, _folds(matrix), dataset, schedule, target, bracket_size=None)


# ---------------------------------------------------------------- dispatch


def schedule_for(policy: Policy) -> SHSchedule:
    return make_sh_schedule(policy.eta, policy.b_min, policy.b_max)


def policy_folds(policy: Policy, source: Source) -> list[PerformanceMatrix]:
    """Fold matrices to use for ``policy``.

    Holdout uses a single matrix. CV uses per-fold matrices when exactly
    ``policy.folds`` are given and otherwise treats the single matrix as
    already holding cross-validated losses.
    """
    folds = _folds(source)
    if policy.validation == "holdout":
        if len(folds) != 1:
            raise ValidationError("holdout takes a single matrix")
        return folds
    if len(folds) == 1:
        return folds
    if len(folds) != policy.folds:
        raise ValidationError(f"expected {policy.folds} fold matrices, got {len(folds)}")
    return folds


def evaluate_portfolio(portfolio, source: Source, dataset: str, policy: Policy, target: str = "validation") -> SelectionTrace:
    _check_target(target)
    members = list(portfolio)
    folds = policy_folds(policy, source)
    if not members:
        worst = max(m.worst_loss(dataset) for m in folds)
        return SelectionTrace(dataset, loss=worst)
    if policy.uses_sh:
        return _run_sh(members, folds, dataset, schedule_for(policy), target, None)
    return _select_full_budget(members, folds, dataset, target)


def portfolio_loss(portfolio, source: Source, dataset: str, policy: Policy, target: str = "validation") -> float:
    """Test loss of the member the policy's strategy selects on ``dataset``."""
    return evaluate_portfolio(portfolio, source, dataset, policy, target).loss


def ge_s(
    portfolio,
    source: Source,
    datasets: Sequence[str],
    policy: Policy,
    stats: NormalizationStats | None = None,
    target: str = "validation",
    average: bool = False,
) -> float:
    """Normalized portfolio loss summed (or averaged) over ``datasets``.

    An empty portfolio scores the worst normalized loss, 1.0, per dataset.
    ``stats`` defaults to the bounds stored in the (first) matrix.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValidationError("need at least one dataset")
    if stats is None:
        stats = _folds(source)[0].stats()
    members = list(portfolio)
    if members:
        values = [
            normalize_loss(portfolio_loss(members, source, d, policy, target), stats, d) for d in datasets
        ]
    else:
        values = [1.0] * len(datasets)
    total = math.fsum(values)
    return total / len(datasets) if average else total
