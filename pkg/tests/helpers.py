"""Small builders shared by the test modules."""
from metafolio.meta_data import DatasetMeta, LearningCurve, PerformanceMatrix


def final_matrix(losses, bounds=None, meta=None, l_max=1.0):
    """Matrix of one-checkpoint curves from ``{(cand, dataset): (val, test)}`` or ``None`` (FAILED).

    Candidate and dataset order follow first appearance in ``losses``.
    """
    cands, datasets = [], []
    for c, d in losses:
        if c not in cands:
            cands.append(c)
        if d not in datasets:
            datasets.append(d)
    entries = {}
    for key, v in losses.items():
        entries[key] = None if v is None else LearningCurve.from_rows([(1, v[0], v[1], v[2] if len(v) > 2 else 1.0)])
    metas = []
    for d in datasets:
        if bounds and d in bounds:
            lo, hi = bounds[d]
        else:
            tests = [v[1] for (c, dd), v in losses.items() if dd == d and v is not None]
            lo, hi = min(tests), max(tests)
        n, f = (meta or {}).get(d, (100, 10))
        metas.append(DatasetMeta(d, n, f, lo, hi))
    return PerformanceMatrix(metas, cands, entries, l_max)


def curve_matrix(curves, dataset="d", bounds=(0.0, 1.0), l_max=1.0):
    """Single-dataset matrix from ``{cand: [(budget, val, test, wall), ...]}``; ``None`` = FAILED."""
    entries = {
        (c, dataset): None if rows is None else LearningCurve.from_rows(rows) for c, rows in curves.items()
    }
    return PerformanceMatrix([DatasetMeta(dataset, 100, 10, *bounds)], list(curves), entries, l_max)
