"""Seeded synthetic meta-data for tests, fixtures and the demo pipeline."""
from __future__ import annotations

import numpy as np

from .meta_data import Checkpoint, DatasetMeta, LearningCurve, PerformanceMatrix, STANDARD_POLICY_IDS

__all__ = ["random_matrix", "random_fold_matrices", "planted_table", "policy_matrices", "PLANTED_THRESHOLD"]

PLANTED_THRESHOLD = 10**4


def _curve(rng, budgets, final_val, final_test, seconds_per_unit):
    """Losses shrink toward their final values as the budget grows."""
    scale = budgets[-1]
    points = []
    for b in budgets:
        gap = rng.uniform(0.0, 0.4) * (1.0 - b / scale)
        v = min(1.0, final_val + gap)
        t = min(1.0, final_test + gap * rng.uniform(0.5, 1.0))
        points.append(Checkpoint(int(b), round(v, 4), round(t, 4), round(b * seconds_per_unit, 3)))
    return LearningCurve(tuple(points))


def _datasets(rng, n, prefix="d"):
    ids = [f"{prefix}{j}" for j in range(n)]
    meta = {
        d: (int(10 ** rng.uniform(2, 6)), int(rng.integers(1, 500)))
        for d in ids
    }
    return ids, meta


def random_matrix(
    seed,
    n_candidates: int = 8,
    n_datasets: int = 6,
    budgets=(32, 128, 512),
    fail_rate: float = 0.05,
    rng: np.random.Generator | None = None,
    datasets=None,
    base=None,
) -> PerformanceMatrix:
    """Candidates x datasets with geometric-budget learning curves.

    Bounds per dataset are the observed min/max test loss (worst loss 1.0
    when any run failed).
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    cands = [f"c{i}" for i in range(n_candidates)]
    ids, meta = datasets if datasets is not None else _datasets(rng, n_datasets)
    entries = {}
    for d in ids:
        speed = rng.uniform(0.01, 0.5)
        for c in cands:
            if rng.uniform() < fail_rate:
                entries[(c, d)] = None
                continue
            quality = base[(c, d)] if base is not None else rng.uniform(0.0, 0.8)
            val = min(1.0, max(0.0, quality + rng.normal(0, 0.05)))
            test = min(1.0, max(0.0, quality + rng.normal(0, 0.05)))
            entries[(c, d)] = _curve(rng, budgets, val, test, speed * rng.uniform(0.5, 2.0))
    metas = []
    for d in ids:
        tests = [cp.test_loss for c in cands if entries[(c, d)] is not None for cp in entries[(c, d)].checkpoints]
        failed = any(entries[(c, d)] is None for c in cands)
        lo = min(tests) if tests else 0.0
        hi = 1.0 if failed or not tests else max(tests)
        metas.append(DatasetMeta(d, meta[d][0], meta[d][1], lo, hi))
    return PerformanceMatrix(metas, cands, entries)


def random_fold_matrices(seed, k: int = 3, n_candidates: int = 8, n_datasets: int = 6, **kw) -> list[PerformanceMatrix]:
    """``k`` fold matrices sharing datasets and a per-(candidate, dataset) quality."""
    rng = np.random.default_rng(seed)
    ids, meta = _datasets(rng, n_datasets)
    base = {(f"c{i}", d): rng.uniform(0.0, 0.8) for i in range(n_candidates) for d in ids}
    return [
        random_matrix(None, n_candidates, n_datasets, rng=rng, datasets=(ids, meta), base=base, **kw)
        for _ in range(k)
    ]


def planted_table(seed, n_datasets: int = 40, noise: float = 0.05):
    """Three-policy table whose best policy flips at ``n_samples = 10**4``.

    Below the threshold ``cv10-fb`` wins and ``holdout-sh`` is worst; above
    it the roles swap. ``cv3-fb`` is always in between.
    """
    rng = np.random.default_rng(seed)
    ids = [f"d{j:03d}" for j in range(n_datasets)]
    meta = {d: (int(10 ** rng.uniform(2, 6)), int(rng.integers(1, 500))) for d in ids}
    table = {"holdout-sh": {}, "cv3-fb": {}, "cv10-fb": {}}
    for d in ids:
        small = meta[d][0] < PLANTED_THRESHOLD
        good, bad = (0.1, 0.6) if small else (0.6, 0.1)
        table["cv10-fb"][d] = round(good + rng.uniform(0, noise), 6)
        table["holdout-sh"][d] = round(bad + rng.uniform(0, noise), 6)
        table["cv3-fb"][d] = round(0.3 + rng.uniform(0, noise), 6)
    return table, meta


def policy_matrices(seed, n_candidates: int = 24, n_datasets: int = 20, policies=STANDARD_POLICY_IDS) -> dict:
    """One matrix per policy over shared datasets, for the end-to-end pipeline.

    Datasets with many samples make CV slow (time grows with folds), so
    cheaper policies tend to win there within a fixed horizon.
    """
    rng = np.random.default_rng(seed)
    cands = [f"c{i:02d}" for i in range(n_candidates)]
    ids, meta = _datasets(rng, n_datasets)
    quality = {(c, d): rng.uniform(0.05, 0.6) for c in cands for d in ids}
    out = {}
    for pid in policies:
        folds = 1 if pid.startswith("holdout") else int(pid.split("-")[0][2:])
        entries, metas = {}, []
        for d in ids:
            per_unit = meta[d][0] * 1e-5 * folds * rng.uniform(0.8, 1.2)
            for c in cands:
                # more folds give a less noisy estimate of the same quality
                sd = 0.08 / np.sqrt(folds)
                q = quality[(c, d)]
                entries[(c, d)] = _curve(
                    rng, (32, 128, 512),
                    min(1.0, max(0.0, q + rng.normal(0, sd))),
                    min(1.0, max(0.0, q + rng.normal(0, 0.02))),
                    per_unit * rng.uniform(0.5, 2.0),
                )
            tests = [cp.test_loss for c in cands for cp in entries[(c, d)].checkpoints]
            metas.append(DatasetMeta(d, meta[d][0], meta[d][1], min(tests), max(tests)))
        out[pid] = PerformanceMatrix(metas, cands, entries)
    return out
