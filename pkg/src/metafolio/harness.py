"""End-to-end experiment pipeline.

Training: per policy, build a greedy portfolio on the training meta-datasets
and replay it under each horizon to get the loss the policy would reach.
Losses are computed out-of-fold at the meta level, so no dataset is scored
with a portfolio built on it. Testing: pick a policy per held-out dataset and
compare the outcome with the single-best, random and oracle baselines.

Every system's per-dataset value is a normalized test loss in ``[0, 1]``, so
its mean is the ADTM.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._parallel import ordered_map
from .errors import ValidationError
from .meta_data import PerformanceMatrix, Policy, Portfolio
from .metrics import NormalizationStats, average_rank, normalize_loss, sign_test, wilcoxon_signed_rank
from .portfolio import greedy_portfolio, replay_with_budget
from .selector import (
    PolicySelector,
    SelectorHyperparams,
    fold_assignment,
    oracle_policy,
    random_policy,
    single_best,
    table_datasets,
    train_pairwise_selector,
    tune_selector,
)

__all__ = [
    "TrainingTable",
    "ABLATIONS",
    "combined_stats",
    "build_training_table",
    "system_choices",
    "compare_systems",
    "evaluate_system",
    "cross_evaluate",
    "ablation_subsets",
    "run_pipeline",
]

REPORT_VERSION = 1


@dataclass
class TrainingTable:
    """Policy losses for one horizon plus the portfolios of the final system."""

    horizon_s: float
    losses: dict[str, dict[str, float]]
    raw_losses: dict[str, dict[str, float]]
    portfolios: dict[str, Portfolio]
    meta_features: dict[str, tuple[int, int]]

    @property
    def datasets(self) -> list[str]:
        return table_datasets(self.losses)

    def to_dict(self) -> dict:
        return {
            "horizon_s": self.horizon_s,
            "losses": self.losses,
            "raw_losses": self.raw_losses,
            "portfolios": {p: pf.to_dict() for p, pf in self.portfolios.items()},
            "meta_features": {d: list(m) for d, m in self.meta_features.items()},
        }


def _policy(key: str, policy: Policy | None) -> Policy:
    return policy if policy is not None else Policy.from_id(key)


def combined_stats(matrices: Mapping[str, PerformanceMatrix], datasets: Sequence[str]) -> NormalizationStats:
    """Per-dataset bounds spanning every policy's matrix."""
    bounds = {}
    for d in datasets:
        metas = [m.dataset(d) for m in matrices.values()]
        bounds[d] = (min(x.loss_min for x in metas), max(x.loss_max for x in metas))
    return NormalizationStats(bounds)


def _check_datasets(matrices: Mapping[str, PerformanceMatrix]) -> list[str]:
    if not matrices:
        raise ValidationError("need at least one policy")
    keys = list(matrices)
    datasets = list(matrices[keys[0]].dataset_ids)
    for k in keys[1:]:
        if set(matrices[k].dataset_ids) != set(datasets):
            raise ValidationError(f"policy {k!r} covers a different set of datasets")
    return datasets


def build_training_table(
    matrices: Mapping[str, PerformanceMatrix],
    horizons: Sequence[float],
    meta_level_folds: int | None = 5,
    seed: int = 0,
    size: int = 32,
    policies: Mapping[str, Policy] | None = None,
    jobs: int = 1,
) -> dict[float, TrainingTable]:
    """One :class:`TrainingTable` per horizon.

    ``matrices`` maps a policy id to the matrix its portfolio is built and
    replayed on; CV matrices are expected to hold cross-validated losses and
    the total time of all folds. With ``meta_level_folds`` set, a dataset's
    loss comes from the portfolio built on the other folds; ``None`` uses
    the in-sample portfolio. Final portfolios always use every dataset.
    """
    datasets = _check_datasets(matrices)
    if not horizons:
        raise ValidationError("need at least one horizon")
    policies = {k: _policy(k, (policies or {}).get(k)) for k in matrices}
    stats = combined_stats(matrices, datasets)
    if meta_level_folds is None:
        splits = [(datasets, datasets)]
    else:
        folds = fold_assignment(datasets, min(meta_level_folds, len(datasets)), seed)
        splits = [([d for d in datasets if d not in set(held)], held) for held in folds]

    def build(key, train):
        m = matrices[key]
        # greedy always runs on the policy's own matrix and bounds
        return greedy_portfolio(m.candidates, m, train, size, policies[key], target="test")

    def fold_portfolios(key):
        per_split = [build(key, train) for train, _ in splits]
        return per_split, build(key, datasets)

    built = dict(zip(matrices, ordered_map(fold_portfolios, list(matrices), jobs)))
    meta = next(iter(matrices.values())).meta_features()

    tables = {}
    for horizon in horizons:
        raw: dict[str, dict[str, float]] = {}
        for key, m in matrices.items():
            per_split, _ = built[key]
            row = {}
            for pf, (_, held) in zip(per_split, splits):
                for d in held:
                    row[d] = replay_with_budget(pf, m, d, horizon, policy=policies[key]).final_loss
            raw[key] = {d: row[d] for d in datasets}
        norm = {k: {d: normalize_loss(v, stats, d) for d, v in row.items()} for k, row in raw.items()}
        tables[float(horizon)] = TrainingTable(
            float(horizon), norm, raw, {k: built[k][1] for k in matrices}, meta
        )
    return tables


# ------------------------------------------------------------ evaluation


def system_choices(selector: PolicySelector, held_out: Sequence[str], meta_features, training: Sequence[str]) -> dict:
    """Selector choice per held-out dataset, refusing any training dataset."""
    held_out = list(held_out)
    if not held_out:
        raise ValidationError("held-out set is empty")
    leaked = sorted(set(held_out) & set(training))
    if leaked:
        raise ValidationError(f"held-out dataset {leaked[0]!r} was used for training")
    return {d: selector.select(meta_features[d]) for d in held_out}


def _mean(xs):
    return math.fsum(xs) / len(xs)


def compare_systems(
    results: Mapping[str, Mapping[str, Sequence[float]]],
    horizon_s: float | None = None,
    reference: str | None = None,
    tests: Sequence[str] = ("wilcoxon", "sign"),
    rank_draws: int = 200,
    seed: int = 0,
    policies: Mapping[str, Mapping[str, str | None]] | None = None,
) -> dict:
    """Report rows from ``system -> dataset -> normalized losses (one per run)``.

    ``adtm_std`` is the spread of ADTM across runs, so deterministic systems
    report 0. Tests pair each system's per-dataset mean with ``reference``
    (default: the first system).
    """
    systems = list(results)
    if not systems:
        raise ValidationError("nothing to report")
    reference = reference or systems[0]
    if reference not in results:
        raise ValidationError(f"unknown reference system {reference!r}")
    datasets = list(results[reference])
    if not datasets:
        raise ValidationError("report over an empty dataset set")
    for s in systems:
        if set(results[s]) != set(datasets):
            raise ValidationError(f"system {s!r} covers a different set of datasets")
    unknown = set(tests) - {"wilcoxon", "sign"}
    if unknown:
        raise ValidationError(f"unknown test {sorted(unknown)[0]!r}")
    ranks = average_rank(results, rank_draws, seed) if rank_draws > 0 else {}
    ref = [_mean(results[reference][d]) for d in datasets]
    rows = []
    for s in systems:
        per = [_mean(results[s][d]) for d in datasets]
        n_runs = {len(results[s][d]) for d in datasets}
        if len(n_runs) == 1:
            runs = np.array([results[s][d] for d in datasets], dtype=float).mean(axis=0)
            spread = float(np.std(runs))
        else:
            spread = None  # runs do not line up across datasets
        row_tests = {}
        if "wilcoxon" in tests:
            row_tests["wilcoxon_p"] = wilcoxon_signed_rank(per, ref)
        if "sign" in tests:
            wins = sum(a < b for a, b in zip(per, ref))
            losses = sum(a > b for a, b in zip(per, ref))
            row_tests["sign_test_p"] = sign_test(wins, losses) if wins + losses else 1.0
        chosen = (policies or {}).get(s, {})
        rows.append(
            {
                "system": s,
                "horizon_s": horizon_s,
                "adtm_mean": _mean(per),
                "adtm_std": spread,
                "per_dataset": [
                    {"dataset": d, "policy": chosen.get(d), "loss": v} for d, v in zip(datasets, per)
                ],
                "ranks": dict(ranks),
                "tests": row_tests,
            }
        )
    return {"version": REPORT_VERSION, "horizon_s": horizon_s, "reference": reference, "rows": rows}


def _baseline_results(train_losses, held_losses, held, seed, random_draws):
    policies = list(held_losses)
    sb = single_best(train_losses)
    oracle = oracle_policy({p: {d: held_losses[p][d] for d in held} for p in policies})
    draws = [random_policy(policies, held, seed + k) for k in range(random_draws)]
    results = {
        "single_best": {d: [held_losses[sb][d]] for d in held},
        "random": {d: [held_losses[a[d]][d] for a in draws] for d in held},
        "oracle": {d: [held_losses[oracle[d]][d]] for d in held},
    }
    chosen = {"single_best": {d: sb for d in held}, "oracle": oracle, "random": {d: None for d in held}}
    return results, chosen


def evaluate_system(
    selector: PolicySelector,
    train_losses: Mapping[str, Mapping[str, float]],
    held_out_losses: Mapping[str, Mapping[str, float]],
    meta_features,
    horizon_s: float | None = None,
    seed: int = 0,
    random_draws: int = 100,
    rank_draws: int = 200,
) -> dict:
    """Score the selector on held-out datasets next to the three baselines.

    Both tables hold normalized losses. Raises if a held-out dataset also
    appears in the training table.
    """
    held = table_datasets(held_out_losses)
    choice = system_choices(selector, held, meta_features, table_datasets(train_losses))
    results, chosen = _baseline_results(train_losses, held_out_losses, held, seed, random_draws)
    results = {"selector": {d: [held_out_losses[choice[d].policy][d]] for d in held}, **results}
    chosen = {"selector": {d: choice[d].policy for d in held}, **chosen}
    return compare_systems(results, horizon_s, "selector", rank_draws=rank_draws, seed=seed, policies=chosen)


def _subtable(table, datasets):
    keep = set(datasets)
    return {p: {d: v for d, v in row.items() if d in keep} for p, row in table.items()}


def cross_evaluate(
    losses: Mapping[str, Mapping[str, float]],
    meta_features,
    folds: int = 5,
    hp: SelectorHyperparams = SelectorHyperparams(),
    seed: int = 0,
    tune_budget: int = 0,
    inner_folds: int = 5,
    horizon_s: float | None = None,
    random_draws: int = 100,
    rank_draws: int = 200,
    use_fallback: bool = True,
    jobs: int = 1,
) -> dict:
    """Outer K-fold over datasets: train (optionally tune) on K-1 folds, choose on the rest.

    Choices from all folds are pooled into one report, and each fold goes
    through the same leakage guard as :func:`evaluate_system`.
    """
    datasets = table_datasets(losses)
    policies = list(losses)
    splits = fold_assignment(datasets, folds, seed)

    def run_fold(k):
        held = splits[k]
        train = [d for d in datasets if d not in set(held)]
        train_table = _subtable(losses, train)
        fold_hp = hp
        if tune_budget > 0:
            fold_hp = tune_selector(
                train_table, meta_features, budget=tune_budget,
                folds=min(inner_folds, len(train)), seed=seed + k, n_trees=hp.n_trees,
                use_fallback=use_fallback,
            ).hyperparams
        sel = train_pairwise_selector(meta_features, train_table, fold_hp, seed + k, use_fallback=use_fallback)
        return system_choices(sel, held, meta_features, train), single_best(train_table)

    picks = ordered_map(run_fold, range(len(splits)), jobs)
    selector_choice, sb_choice = {}, {}
    for (choice, sb), held in zip(picks, splits):
        for d in held:
            selector_choice[d] = choice[d].policy
            sb_choice[d] = sb
    ordered = list(datasets)
    oracle = oracle_policy(losses)
    draws = [random_policy(policies, ordered, seed + k) for k in range(random_draws)]
    results = {
        "selector": {d: [losses[selector_choice[d]][d]] for d in ordered},
        "single_best": {d: [losses[sb_choice[d]][d]] for d in ordered},
        "random": {d: [losses[a[d]][d] for a in draws] for d in ordered},
        "oracle": {d: [losses[oracle[d]][d]] for d in ordered},
    }
    chosen = {
        "selector": {d: selector_choice[d] for d in ordered},
        "single_best": {d: sb_choice[d] for d in ordered},
        "random": {d: None for d in ordered},
        "oracle": oracle,
    }
    return compare_systems(results, horizon_s, "selector", rank_draws=rank_draws, seed=seed, policies=chosen)


# -------------------------------------------------------------- ablations


def _filter(ids: Sequence[str], kind: str) -> list[str]:
    out = []
    for pid in ids:
        p = Policy.from_id(pid)
        if (
            kind == "all"
            or (kind == "only_holdout" and p.validation == "holdout")
            or (kind == "only_cv" and p.validation == "cv")
            or (kind == "only_fb" and not p.uses_sh)
            or (kind == "only_sh" and p.uses_sh)
        ):
            out.append(pid)
    return out


ABLATIONS = ("all", "only_holdout", "only_cv", "only_fb", "only_sh")


def ablation_policies(ids: Sequence[str], kind: str) -> list[str]:
    if kind not in ABLATIONS:
        raise ValidationError(f"ablation must be one of {ABLATIONS}, got {kind!r}")
    return _filter(ids, kind)


def ablation_subsets(
    losses: Mapping[str, Mapping[str, float]],
    meta_features,
    kinds: Sequence[str] = ABLATIONS,
    folds: int = 5,
    hp: SelectorHyperparams = SelectorHyperparams(),
    seed: int = 0,
    random_draws: int = 100,
) -> dict:
    """Selector, random and oracle ADTM when only a subset of policies is allowed.

    Subsets that keep fewer than two policies cannot train a selector and
    raise.
    """
    out = {}
    for kind in kinds:
        keep = ablation_policies(list(losses), kind)
        if len(keep) < 2:
            raise ValidationError(f"ablation {kind!r} leaves {len(keep)} policies, need at least two")
        report = cross_evaluate(
            {p: losses[p] for p in keep}, meta_features, folds, hp, seed,
            random_draws=random_draws, rank_draws=0,
        )
        rows = {r["system"]: r["adtm_mean"] for r in report["rows"]}
        out[kind] = {
            "policies": keep,
            "selector": rows["selector"],
            "random": rows["random"],
            "oracle": rows["oracle"],
        }
    return out


# -------------------------------------------------------------- pipeline


def run_pipeline(
    matrices: Mapping[str, PerformanceMatrix],
    horizons: Sequence[float] = (600.0, 3600.0),
    size: int = 32,
    seed: int = 0,
    folds: int = 5,
    meta_level_folds: int | None = 5,
    hp: SelectorHyperparams = SelectorHyperparams(),
    tune_budget: int = 0,
    random_draws: int = 100,
    rank_draws: int = 200,
    jobs: int = 1,
) -> dict:
    """Training table plus cross-validated comparison, one block per horizon."""
    tables = build_training_table(matrices, horizons, meta_level_folds, seed, size, jobs=jobs)
    out = {"version": REPORT_VERSION, "seed": seed, "horizons": []}
    for horizon, table in tables.items():
        report = cross_evaluate(
            table.losses, table.meta_features, folds, hp, seed, tune_budget,
            horizon_s=horizon, random_draws=random_draws, rank_draws=rank_draws, jobs=jobs,
        )
        out["horizons"].append({"horizon_s": horizon, "table": table.to_dict(), "report": report})
    return out
