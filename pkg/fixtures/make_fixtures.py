"""Regenerate the bundled fixtures (run from the repository root).

    python3 fixtures/make_fixtures.py
"""
from pathlib import Path

import numpy as np

from metafolio.cli import main
from metafolio.ensemble import write_predictions
from metafolio.meta_data import save_matrix
from metafolio.selector import dump_meta_features, dump_policy_table
from metafolio.synthetic import planted_table, policy_matrices

ROOT = Path(__file__).resolve().parent
SEED = 0


def pipeline_args(out):
    args = ["pipeline", "--seed", "1", "--size", "8", "--n-trees", "20", "--ranks", "50", "--random-draws", "20"]
    for pid in sorted((ROOT / "matrices").glob("*.json")):
        args += ["--matrix", f"{pid.stem}={pid}"]
    return args + ["--out", str(out)]


def predictions(seed, n_models=5, n=60, k=3):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, k, n)
    logits = rng.normal(size=(n_models, n, k))
    logits[:, np.arange(n), y] += rng.uniform(0, 2, (n_models, 1))
    p = np.exp(logits)
    return p / p.sum(axis=2, keepdims=True), y


if __name__ == "__main__":
    (ROOT / "matrices").mkdir(exist_ok=True)
    for pid, m in policy_matrices(SEED, n_candidates=16, n_datasets=15).items():
        (ROOT / "matrices" / f"{pid}.json").write_bytes(save_matrix(m))
    table, meta = planted_table(SEED, n_datasets=40)
    (ROOT / "planted_table.csv").write_text(dump_policy_table(table))
    (ROOT / "planted_meta.csv").write_text(dump_meta_features(meta))
    (ROOT / "preds_val.bin").write_bytes(write_predictions(*predictions(1)))
    (ROOT / "preds_test.bin").write_bytes(write_predictions(*predictions(2)))
    main(pipeline_args(ROOT / "golden_report.json"))
