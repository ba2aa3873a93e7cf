"""Command-line interface.

Outputs are JSON on stdout (or ``--out``) unless ``--format table`` is given.
Exit codes: 0 success, 2 usage error, 3 validation error, 4 capacity error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .ensemble import LOSSES, PredictionSet, ensemble_predict, ensemble_select, read_predictions
from .errors import CapacityError, ValidationError
from .harness import ABLATIONS, ablation_subsets, compare_systems, run_pipeline
from .meta_data import Policy, Portfolio, load_matrix
from .metrics import normalize_loss
from .portfolio import brute_force_portfolio, greedy_portfolio, replay_with_budget
from .selector import (
    PolicySelector,
    SelectorHyperparams,
    WEIGHT_SCALINGS,
    load_meta_features,
    load_policy_table,
    oracle_policy,
    random_policy,
    single_best,
    table_datasets,
    train_pairwise_selector,
    tune_selector,
)
from .strategies import evaluate_portfolio
from .synthetic import policy_matrices

EXIT_USAGE, EXIT_VALIDATION, EXIT_CAPACITY = 2, 3, 4


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ output


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, bool):
        return "true" if v else "false"
    return "-" if v is None else str(v)


def _table(obj, prefix="") -> list[str]:
    """Flat ``key=value`` lines; lists of flat records become aligned columns."""
    lines = []
    if isinstance(obj, list) and obj and all(isinstance(r, dict) for r in obj):
        cols = [k for k in obj[0] if not isinstance(obj[0][k], (dict, list))]
        rows = [[_fmt(r.get(c)) for c in cols] for r in obj]
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        if prefix:
            lines.append(f"[{prefix}]")
        lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip())
        lines += ["  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip() for r in rows]
        for i, r in enumerate(obj):
            for k, v in r.items():
                if isinstance(v, (dict, list)) and v:
                    lines += _table(v, f"{prefix}[{i}].{k}" if prefix else f"{i}.{k}")
        return lines
    if isinstance(obj, dict):
        for k, v in obj.items():
            key = f"{prefix}.{k}" if prefix else str(k)
            if isinstance(v, (dict, list)):
                lines += _table(v, key)
            else:
                lines.append(f"{key}={_fmt(v)}")
        return lines
    if isinstance(obj, list):
        return [f"{prefix}={','.join(_fmt(x) for x in obj)}"]
    return [f"{prefix}={_fmt(obj)}"]


def _emit(args, obj) -> None:
    text = _dumps(obj) if args.format == "json" else "\n".join(_table(obj)) + "\n"
    if getattr(args, "out", None):
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------- input


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None


def _json(path):
    try:
        return json.loads(_read(path))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _matrix(path, fmt):
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "json"
    return load_matrix(_read(path), fmt)


def _policy(args) -> Policy:
    """Map ``--strategy`` (holdout | cv:K | sh | policy id) plus SH flags to a policy."""
    s = args.strategy
    sh_flags = any(getattr(args, f) is not None for f in ("sh_eta", "sh_min", "sh_max"))
    eta = args.sh_eta if args.sh_eta is not None else 4.0
    b_min = args.sh_min if args.sh_min is not None else 32
    b_max = args.sh_max if args.sh_max is not None else 512
    if s == "holdout":
        pid = "holdout-fb"
    elif s == "sh":
        pid = "holdout-sh"
    elif s.startswith("cv:"):
        k = s[3:]
        if not k.isdigit():
            raise UsageError(f"bad strategy {s!r}: expected cv:K with integer K")
        pid = f"cv{int(k)}-fb"
    else:
        pid = s
    policy = Policy.from_id(pid, eta, b_min, b_max)
    if sh_flags and not policy.uses_sh:
        raise UsageError(f"--sh-* flags contradict the full-budget strategy {s!r}")
    return policy


def _source(args):
    mats = [_matrix(p, args.matrix_format) for p in args.matrix]
    return mats[0] if len(mats) == 1 else mats


def _first(source):
    return source if not isinstance(source, list) else source[0]


def _hp(args) -> SelectorHyperparams:
    return SelectorHyperparams(
        min_samples_split=args.min_samples_split,
        min_samples_leaf=args.min_samples_leaf,
        max_depth=args.max_depth,
        max_features=args.max_features,
        bootstrap=not args.no_bootstrap,
        voting=args.voting,
        weight_scaling=args.weight_scaling,
        n_trees=args.n_trees,
        log_features=args.log_features,
    )


# ---------------------------------------------------------------- commands


def cmd_build_portfolio(args):
    policy = _policy(args)
    source = _source(args)
    m = _first(source)
    datasets = list(m.dataset_ids)
    if args.brute_force:
        pf, value = brute_force_portfolio(m.candidates, source, datasets, args.size, policy, args.target, cap=args.cap)
        doc = pf.to_dict()
        doc["objective"] = value
    else:
        doc = greedy_portfolio(
            m.candidates, source, datasets, args.size, policy, args.target, jobs=args.jobs
        ).to_dict()
    _emit(args, doc)


def cmd_eval_portfolio(args):
    policy = _policy(args)
    source = _source(args)
    m = _first(source)
    pf = Portfolio.from_dict(_json(args.portfolio))
    stats = m.stats()
    rows, traces = [], []
    for d in m.dataset_ids:
        tr = evaluate_portfolio(pf.members, source, d, policy, args.target)
        rows.append({"dataset": d, "chosen": tr.chosen, "test_loss": tr.loss, "normalized": normalize_loss(tr.loss, stats, d)})
        traces.append(tr.to_dict())
    doc = {
        "strategy": policy.id,
        "target": args.target,
        "adtm": math.fsum(r["normalized"] for r in rows) / len(rows),
        "per_dataset": rows,
    }
    if args.trace:
        doc["traces"] = traces
    _emit(args, doc)


def cmd_replay(args):
    m = _matrix(args.matrix[0], args.matrix_format)
    pf = Portfolio.from_dict(_json(args.portfolio))
    policy = _policy(args)
    if args.cap == "auto":
        cap = None
    else:
        try:
            cap = float(args.cap)
        except ValueError:
            raise UsageError(f"--cap must be 'auto' or seconds, got {args.cap!r}") from None
        if not cap > 0:
            raise UsageError("--cap must be positive")
    datasets = args.dataset or list(m.dataset_ids)
    for d in datasets:
        if d not in m.dataset_ids:
            raise ValidationError(f"unknown dataset {d!r}")
    trajs = [replay_with_budget(pf.members, m, d, args.horizon, cap, policy).to_dict() for d in datasets]
    _emit(args, {"strategy": policy.id, "horizon_s": args.horizon, "trajectories": trajs})


def cmd_train_selector(args):
    table = load_policy_table(_read(args.table))
    meta = load_meta_features(_read(args.meta))
    hp = _hp(args)
    tuning = None
    if args.tune_budget:
        res = tune_selector(
            table, meta, budget=args.tune_budget, folds=args.tune_folds, seed=args.seed,
            n_trees=hp.n_trees, use_fallback=not args.no_fallback, jobs=args.jobs,
        )
        hp = res.hyperparams
        tuning = {"budget": args.tune_budget, "score": res.score}
    sel = train_pairwise_selector(
        meta, table, hp, args.seed, args.fallback_policy, not args.no_fallback, jobs=args.jobs
    )
    doc = sel.to_dict()
    if tuning:
        doc["tuning"] = tuning
    _emit(args, doc)


def cmd_select_policy(args):
    sel = PolicySelector.from_dict(_json(args.selector))
    out = sel.select((args.n_samples, args.n_features))
    _emit(args, {"policy": out.policy, "fallback": out.fallback, "tally": out.tally})


def cmd_ensemble(args):
    vp, vl = read_predictions(_read(args.preds))
    tp = tl = None
    if args.test_preds:
        tp, tl = read_predictions(_read(args.test_preds))
    preds = PredictionSet(vp, vl, tp, tl, args.loss)
    w = ensemble_select(preds, args.size, args.jobs)
    res = ensemble_predict(w, preds)
    fn = preds.loss_fn()
    singles = [fn(vp[j], vl) for j in range(preds.n_models)]
    _emit(
        args,
        {
            "loss": args.loss,
            "size": args.size,
            "weights": [int(x) for x in w],
            "val_loss": res["val_loss"],
            "test_loss": res["test_loss"],
            "best_single_val_loss": min(singles),
        },
    )


def _report_inputs(paths):
    """Collect ``system -> dataset -> [losses]`` from row or report JSON files."""
    results = {}
    for p in paths:
        doc = _json(p)
        rows = doc.get("rows") if isinstance(doc, dict) and "rows" in doc else [doc]
        for r in rows:
            if not isinstance(r, dict) or "system" not in r or not isinstance(r.get("per_dataset"), list):
                raise ValidationError(f"{p}: expected rows with 'system' and 'per_dataset'")
            if r["system"] in results:
                raise ValidationError(f"{p}: system {r['system']!r} given twice")
            per = {}
            for i, e in enumerate(r["per_dataset"]):
                try:
                    per[e["dataset"]] = [float(x) for x in e["losses"]] if "losses" in e else [float(e["loss"])]
                except (KeyError, TypeError, ValueError):
                    raise ValidationError(f"{p}: per_dataset[{i}] needs 'dataset' and 'loss'") from None
            results[r["system"]] = per
    return results


def cmd_report(args):
    tests = [t for t in args.tests.split(",") if t]
    results = _report_inputs(args.inputs)
    _emit(args, compare_systems(results, args.horizon, args.reference, tests, args.ranks, args.seed))


def cmd_oracle(args):
    table = load_policy_table(_read(args.table))
    _emit(args, {"oracle": oracle_policy(table)})


def cmd_single_best(args):
    table = load_policy_table(_read(args.table))
    _emit(args, {"single_best": single_best(table)})


def cmd_random(args):
    table = load_policy_table(_read(args.table))
    _emit(args, {"seed": args.seed, "random": random_policy(list(table), table_datasets(table), args.seed)})


def cmd_ablation(args):
    table = load_policy_table(_read(args.table))
    meta = load_meta_features(_read(args.meta))
    _emit(args, ablation_subsets(table, meta, args.subsets, args.folds, _hp(args), args.seed))


def cmd_pipeline(args):
    if args.synthetic is not None and args.matrix:
        raise UsageError("--synthetic and --matrix are mutually exclusive")
    if args.synthetic is not None:
        matrices = policy_matrices(args.synthetic)
    elif args.matrix:
        matrices = {}
        for item in args.matrix:
            pid, sep, path = item.partition("=")
            if not sep:
                raise UsageError(f"--matrix expects POLICY=PATH, got {item!r}")
            Policy.from_id(pid)
            matrices[pid] = _matrix(path, args.matrix_format)
    else:
        raise UsageError("pipeline needs --matrix POLICY=PATH entries or --synthetic SEED")
    try:
        horizons = [float(h) for h in args.horizons.split(",")]
    except ValueError:
        raise UsageError(f"bad --horizons {args.horizons!r}") from None
    doc = run_pipeline(
        matrices, horizons, args.size, args.seed, args.folds,
        None if args.meta_folds == 0 else args.meta_folds,
        _hp(args), args.tune_budget, args.random_draws, args.ranks, args.jobs,
    )
    _emit(args, doc)


# ------------------------------------------------------------------ parser


def _common(p, out=True):
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--jobs", type=int, default=1, help="worker threads; output does not depend on it")
    if out:
        p.add_argument("--out", help="write output here instead of stdout")


def _matrix_args(p):
    p.add_argument("--matrix", action="append", required=True, help="matrix file; repeat for per-fold matrices")
    p.add_argument("--matrix-format", choices=("json", "csv"), help="default: by file extension")


def _strategy_args(p, default=None):
    p.add_argument(
        "--strategy", required=default is None, default=default,
        help="holdout, cv:K, sh, or a policy id such as cv5-sh",
    )
    p.add_argument("--sh-eta", type=float)
    p.add_argument("--sh-min", type=int)
    p.add_argument("--sh-max", type=int)


def _hp_args(p):
    d = SelectorHyperparams()
    p.add_argument("--min-samples-split", type=int, default=d.min_samples_split)
    p.add_argument("--min-samples-leaf", type=int, default=d.min_samples_leaf)
    p.add_argument("--max-depth", type=int, default=d.max_depth)
    p.add_argument("--max-features", type=int, default=d.max_features)
    p.add_argument("--no-bootstrap", action="store_true")
    p.add_argument("--voting", choices=("soft", "hard"), default=d.voting)
    p.add_argument("--weight-scaling", choices=WEIGHT_SCALINGS, default=d.weight_scaling)
    p.add_argument("--n-trees", type=int, default=d.n_trees)
    p.add_argument("--log-features", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metafolio", description="Portfolio and policy-selection tools for AutoML meta-data.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-portfolio", help="greedy (or exhaustive) portfolio from a matrix")
    _matrix_args(p)
    _strategy_args(p)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--target", choices=("test", "validation"), default="test")
    p.add_argument("--brute-force", action="store_true", help="exact search, small inputs only")
    p.add_argument("--cap", type=int, default=10**6, help="max subsets for --brute-force")
    _common(p)
    p.set_defaults(fn=cmd_build_portfolio)

    p = sub.add_parser("eval-portfolio", help="per-dataset losses and ADTM of a portfolio")
    _matrix_args(p)
    _strategy_args(p)
    p.add_argument("--portfolio", required=True)
    p.add_argument("--target", choices=("test", "validation"), default="validation")
    p.add_argument("--trace", action="store_true", help="include every evaluation")
    _common(p)
    p.set_defaults(fn=cmd_eval_portfolio)

    p = sub.add_parser("replay", help="simulate a portfolio run within a time horizon")
    _matrix_args(p)
    _strategy_args(p, default="holdout")
    p.add_argument("--portfolio", required=True)
    p.add_argument("--horizon", type=float, default=600.0)
    p.add_argument("--cap", default="auto", help="per-evaluation cap in seconds, or auto (horizon/10)")
    p.add_argument("--dataset", action="append", help="restrict to these datasets")
    _common(p)
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("train-selector", help="fit the pairwise policy selector")
    p.add_argument("--table", required=True, help="CSV policy,dataset,loss")
    p.add_argument("--meta", required=True, help="CSV dataset,n_samples,n_features")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tune-budget", type=int, default=0, help="random-search evaluations (0 = no tuning)")
    p.add_argument("--tune-folds", type=int, default=5)
    p.add_argument("--fallback-policy")
    p.add_argument("--no-fallback", action="store_true")
    _hp_args(p)
    _common(p)
    p.set_defaults(fn=cmd_train_selector)

    p = sub.add_parser("select-policy", help="choose a policy for one dataset")
    p.add_argument("--selector", required=True)
    p.add_argument("--n-samples", type=int, required=True)
    p.add_argument("--n-features", type=int, required=True)
    _common(p)
    p.set_defaults(fn=cmd_select_policy)

    p = sub.add_parser("ensemble", help="greedy ensemble selection over stored predictions")
    p.add_argument("--preds", required=True, help="validation predictions (binary layout)")
    p.add_argument("--test-preds")
    p.add_argument("--size", type=int, default=50)
    p.add_argument("--loss", choices=sorted(LOSSES), default="ber")
    _common(p)
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("report", help="ADTM, ranks and tests over system results")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--tests", default="wilcoxon,sign")
    p.add_argument("--ranks", type=int, default=200, help="rank sampling draws (0 = skip)")
    p.add_argument("--reference", help="system the tests compare against (default: first)")
    p.add_argument("--horizon", type=float)
    p.add_argument("--seed", type=int, required=True)
    _common(p)
    p.set_defaults(fn=cmd_report)

    for name, fn, help_ in (
        ("oracle", cmd_oracle, "per-dataset best policy"),
        ("single-best", cmd_single_best, "policy with the lowest mean normalized loss"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--table", required=True)
        _common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("random", help="seeded uniform policy per dataset")
    p.add_argument("--table", required=True)
    p.add_argument("--seed", type=int, required=True)
    _common(p)
    p.set_defaults(fn=cmd_random)

    p = sub.add_parser("ablation", help="selector vs baselines on policy subsets")
    p.add_argument("--table", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--subsets", nargs="+", choices=ABLATIONS, default=list(ABLATIONS))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    _hp_args(p)
    _common(p)
    p.set_defaults(fn=cmd_ablation)

    p = sub.add_parser("pipeline", help="portfolios, replay, selector and report end to end")
    p.add_argument("--matrix", action="append", help="POLICY=PATH, one per policy")
    p.add_argument("--matrix-format", choices=("json", "csv"))
    p.add_argument("--synthetic", type=int, metavar="SEED", help="use the built-in synthetic matrices")
    p.add_argument("--horizons", default="600,3600")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--folds", type=int, default=5, help="outer folds over datasets")
    p.add_argument("--meta-folds", type=int, default=5, help="out-of-fold portfolio folds (0 = in-sample)")
    p.add_argument("--tune-budget", type=int, default=0)
    p.add_argument("--random-draws", type=int, default=100)
    p.add_argument("--ranks", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    _hp_args(p)
    _common(p)
    p.set_defaults(fn=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"metafolio: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as exc:
        print(f"metafolio: capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except ValidationError as exc:
        print(f"metafolio: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
