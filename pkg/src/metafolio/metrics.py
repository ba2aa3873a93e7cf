"""Normalized regret (ADTM), average ranks and significance tests."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import binomtest, rankdata

__all__ = [
    "NormalizationStats",
    "normalize_loss",
    "adtm",
    "average_rank",
    "sign_test",
    "wilcoxon_signed_rank",
    "signed_rank_statistic",
]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-dataset ``(loss_min, loss_max)`` used for zero-one scaling."""

    bounds: Mapping[str, tuple[float, float]]

    def __post_init__(self):
        bounds = {k: (float(lo), float(hi)) for k, (lo, hi) in dict(self.bounds).items()}
        for k, (lo, hi) in bounds.items():
            if lo > hi:
                raise ValueError(f"dataset {k!r}: loss_min {lo} > loss_max {hi}")
        object.__setattr__(self, "bounds", bounds)

    def __contains__(self, dataset) -> bool:
        return dataset in self.bounds

    def __getitem__(self, dataset) -> tuple[float, float]:
        return self.bounds[dataset]

    @classmethod
    def from_table(cls, table: Mapping[str, Mapping[str, float]]) -> "NormalizationStats":
        """Min/max per dataset across all rows of a ``row -> dataset -> loss`` table."""
        bounds: dict[str, tuple[float, float]] = {}
        for per_dataset in table.values():
            for d, v in per_dataset.items():
                lo, hi = bounds.get(d, (v, v))
                bounds[d] = (min(lo, v), max(hi, v))
        return cls(bounds)


def normalize_loss(loss: float, stats: NormalizationStats, dataset: str) -> float:
    """Distance to the best observed loss, scaled into ``[0, 1]``.

    Degenerate bounds (``loss_min == loss_max``) map everything to 0.
    """
    lo, hi = stats[dataset]
    if hi == lo:
        return 0.0
    return min(1.0, max(0.0, (loss - lo) / (hi - lo)))


def adtm(per_dataset_losses: Mapping[str, float], stats: NormalizationStats) -> float:
    if not per_dataset_losses:
        raise ValueError("adtm of an empty set of datasets is undefined")
    values = [normalize_loss(v, stats, d) for d, v in per_dataset_losses.items()]
    return math.fsum(values) / len(values)


def average_rank(
    results: Mapping[str, Mapping[str, Sequence[float]]],
    n_draws: int = 200,
    seed: int = 0,
) -> dict[str, float]:
    """Average rank per method under repeated one-run-per-method sampling.

    For every dataset, ``n_draws`` times one repetition per method is drawn
    and ranked (ascending loss, mean rank on ties). Ranks are averaged over
    draws, then over datasets.

    Each dataset gets its own child stream of ``seed``; within a dataset
    methods draw in an order fixed by their data rather than their names, so
    relabeling methods permutes the output exactly.
    """
    methods = list(results)
    if not methods:
        return {}
    datasets = sorted(results[methods[0]])
    for m in methods:
        if sorted(results[m]) != datasets:
            raise ValueError(f"method {m!r} covers a different set of datasets")
        for d in datasets:
            if len(results[m][d]) == 0:
                raise ValueError(f"method {m!r} has no repetitions on dataset {d!r}")

    children = np.random.SeedSequence(seed).spawn(len(datasets))
    totals = np.zeros(len(methods))
    for d, child in zip(datasets, children):
        rng = np.random.Generator(np.random.Philox(child))
        reps = [np.asarray(results[m][d], dtype=float) for m in methods]
        order = sorted(range(len(methods)), key=lambda j: (len(reps[j]), tuple(reps[j])))
        draws = np.empty((n_draws, len(methods)))
        for j in order:
            idx = rng.integers(0, len(reps[j]), size=n_draws)
            draws[:, j] = reps[j][idx]
        ranks = rankdata(draws, axis=1)
        totals += ranks.mean(axis=0)
    return {m: float(totals[j] / len(datasets)) for j, m in enumerate(methods)}


def sign_test(wins: int, losses: int) -> float:
    """Two-sided exact binomial sign test with success probability 1/2."""
    if wins < 0 or losses < 0 or wins + losses < 1:
        raise ValueError("sign test needs nonnegative counts with wins + losses >= 1")
    return float(binomtest(wins, wins + losses, 0.5, alternative="two-sided").pvalue)


def signed_rank_statistic(a: Sequence[float], b: Sequence[float]) -> tuple[float, np.ndarray]:
    """``(W+, ranks)`` over nonzero differences ``a - b``; ranks use mean ties."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    if d.size == 0:
        return 0.0, np.empty(0)
    ranks = rankdata(np.abs(d))
    return float(ranks[d > 0].sum()), ranks


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact_max_n: int = 25) -> float:
    """Two-sided Wilcoxon signed-rank p-value.

    Zero differences are dropped. Up to ``exact_max_n`` remaining pairs the
    null distribution of W+ is enumerated exactly (ties handled through
    doubled mid-ranks); above that a tie-corrected normal approximation is
    used. All-zero differences give ``p = 1``.
    """
    if len(a) != len(b):
        raise ValueError("wilcoxon needs paired samples of equal length")
    w_plus, ranks = signed_rank_statistic(a, b)
    n = ranks.size
    if n == 0:
        return 1.0
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(np.int64)
        total = int(doubled.sum())
        counts = np.zeros(total + 1, dtype=object)
        counts[0] = 1
        for r in doubled:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[: total + 1 - r]
            counts = counts + shifted
        w2 = int(round(2 * w_plus))
        lower = sum(counts[: w2 + 1])
        upper = sum(counts[w2:])
        return min(1.0, 2 * min(lower, upper) / 2**n)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
