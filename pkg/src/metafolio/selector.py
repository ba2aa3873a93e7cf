"""Per-dataset policy selection from two meta-features.

For every pair of policies a weighted random forest predicts whether the
first policy beats the second; at query time all pairwise models vote.
Queries outside the training data (no training dataset at least as large
in both meta-features) fall back to a fixed cheap policy.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._parallel import ordered_map
from .errors import ParseError, ValidationError
from .forest import Forest, TreeParams
from .meta_data import Policy

__all__ = [
    "MetaFeatures",
    "SelectorHyperparams",
    "SelectorSpace",
    "PolicySelector",
    "Selection",
    "WEIGHT_SCALINGS",
    "compute_pair_weights",
    "train_pairwise_selector",
    "select_policy",
    "fallback_check",
    "single_best",
    "oracle_policy",
    "random_policy",
    "inner_cv_train_eval",
    "tune_selector",
    "normalize_table",
    "load_policy_table",
    "load_meta_features",
]

WEIGHT_SCALINGS = ("raw", "minmax_pair", "min1_pair", "minmax_all", "min1_all", "rank_diff")
SELECTOR_FORMAT_VERSION = 1
_VOTE_TOL = 1e-9  # probabilities this close to 0.5 count as a split vote

PolicyTable = Mapping[str, Mapping[str, float]]


@dataclass(frozen=True, order=True)
class MetaFeatures:
    n_samples: int
    n_features: int

    def __post_init__(self):
        if self.n_samples < 1 or self.n_features < 1:
            raise ValidationError("meta-features must be >= 1")

    @classmethod
    def of(cls, value) -> "MetaFeatures":
        if isinstance(value, MetaFeatures):
            return value
        n, f = value
        return cls(int(n), int(f))


@dataclass(frozen=True)
class SelectorHyperparams:
    min_samples_split: int = 3
    min_samples_leaf: int = 2
    max_depth: int = 20
    max_features: int = 2
    bootstrap: bool = True
    voting: str = "hard"
    weight_scaling: str = "raw"
    n_trees: int = 100
    log_features: bool = False

    def __post_init__(self):
        checks = [
            (3 <= self.min_samples_split <= 20, "min_samples_split in [3, 20]"),
            (2 <= self.min_samples_leaf <= 20, "min_samples_leaf in [2, 20]"),
            (0 <= self.max_depth <= 20, "max_depth in [0, 20]"),
            (1 <= self.max_features <= 2, "max_features in [1, 2]"),
            (self.voting in ("soft", "hard"), "voting in {soft, hard}"),
            (self.weight_scaling in WEIGHT_SCALINGS, f"weight_scaling in {WEIGHT_SCALINGS}"),
            (self.n_trees >= 1, "n_trees >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(f"selector hyperparameter out of range: {msg}")

    def tree_params(self) -> TreeParams:
        return TreeParams(
            self.min_samples_split, self.min_samples_leaf, self.max_depth, self.max_features, self.bootstrap
        )


# ------------------------------------------------------------------ tables


def table_datasets(table: PolicyTable) -> list[str]:
    """Datasets shared by all policies, in the first policy's order."""
    policies = list(table)
    if not policies:
        raise ValidationError("policy table is empty")
    first = list(table[policies[0]])
    for p in policies[1:]:
        if set(table[p]) != set(first):
            raise ValidationError(f"policy {p!r} covers a different set of datasets")
    return first


def normalize_table(table: PolicyTable) -> dict[str, dict[str, float]]:
    """Min-max scale each dataset's losses across policies; degenerate rows become 0."""
    datasets = table_datasets(table)
    out: dict[str, dict[str, float]] = {p: {} for p in table}
    for d in datasets:
        vals = [table[p][d] for p in table]
        lo, hi = min(vals), max(vals)
        for p in table:
            out[p][d] = 0.0 if hi == lo else (table[p][d] - lo) / (hi - lo)
    return out


def compute_pair_weights(loss_a, loss_b, scaling: str, all_losses=None) -> np.ndarray:
    """Per-dataset weights ``|scaled_a - scaled_b|`` for one policy pair.

    ``all_losses`` (policies x datasets) is needed for the ``*_all`` and
    ``rank_diff`` scalings. ``min1`` variants divide by ``1 - min``. Zero
    scaling range yields weight 0.
    """
    a = np.asarray(loss_a, dtype=float)
    b = np.asarray(loss_b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError("pair losses must cover the same datasets")
    diff = np.abs(a - b)
    if scaling == "raw":
        return diff
    if scaling.endswith("_all") or scaling == "rank_diff":
        if all_losses is None:
            raise ValidationError(f"scaling {scaling!r} needs the losses of all policies")
        allm = np.asarray(all_losses, dtype=float)
        if allm.ndim != 2 or allm.shape[1] != a.size:
            raise ValidationError("all_losses must be policies x datasets")
    if scaling == "rank_diff":
        return _rank_diff(a, b, allm)
    if scaling == "minmax_pair":
        lo, hi = np.minimum(a, b), np.maximum(a, b)
    elif scaling == "min1_pair":
        lo, hi = np.minimum(a, b), np.ones_like(a)
    elif scaling == "minmax_all":
        lo, hi = allm.min(axis=0), allm.max(axis=0)
    elif scaling == "min1_all":
        lo, hi = allm.min(axis=0), np.ones_like(a)
    else:
        raise ValidationError(f"unknown weight scaling {scaling!r}")
    span = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(span > 0, diff / span, 0.0)
    return w


def _rank_diff(a, b, allm) -> np.ndarray:
    out = np.empty(a.size)
    for j in range(a.size):
        col = allm[:, j]
        # rank of a value among all policies, mean rank for ties
        ra = (col < a[j]).sum() + ((col == a[j]).sum() + 1) / 2.0
        rb = (col < b[j]).sum() + ((col == b[j]).sum() + 1) / 2.0
        out[j] = abs(ra - rb)
    return out


# --------------------------------------------------------------- selector


def fallback_check(query, training_points: Sequence) -> bool:
    """True when no training point dominates ``query`` (>= in both meta-features)."""
    q = MetaFeatures.of(query)
    for p in training_points:
        t = MetaFeatures.of(p)
        if t.n_samples >= q.n_samples and t.n_features >= q.n_features:
            return False
    return True


def default_fallback(policies: Sequence[str]) -> str:
    """Cheapest available policy: holdout+SH, else SH with fewest folds, else holdout, else first."""
    parsed = {}
    for p in policies:
        try:
            parsed[p] = Policy.from_id(p)
        except ValidationError:
            pass
    if "holdout-sh" in parsed:
        return "holdout-sh"
    sh = [p for p, pol in parsed.items() if pol.uses_sh]
    if sh:
        return min(sh, key=lambda p: (parsed[p].folds or 1, list(policies).index(p)))
    if "holdout-fb" in parsed:
        return "holdout-fb"
    return policies[0]


@dataclass(frozen=True)
class Selection:
    policy: str
    tally: dict
    fallback: bool

    def to_dict(self) -> dict:
        return {"policy": self.policy, "tally": self.tally, "fallback": self.fallback}


@dataclass
class PolicySelector:
    policies: list[str]
    pairs: dict[tuple[str, str], Forest]
    training_points: list[tuple[int, int]]
    hyperparams: SelectorHyperparams
    fallback_policy: str
    use_fallback: bool = True

    def __post_init__(self):
        if self.fallback_policy not in self.policies:
            raise ValidationError(f"fallback policy {self.fallback_policy!r} is not among the policies")

    def _x(self, q: MetaFeatures) -> np.ndarray:
        x = np.array([q.n_samples, q.n_features], dtype=float)
        return np.log10(x) if self.hyperparams.log_features else x

    def tally(self, query) -> dict[str, float]:
        x = self._x(MetaFeatures.of(query))
        votes = {p: 0.0 for p in self.policies}
        for (a, b), forest in self.pairs.items():
            prob = forest.predict_proba(x)
            if self.hyperparams.voting == "soft":
                votes[a] += prob
                votes[b] += 1.0 - prob
            elif prob > 0.5 + _VOTE_TOL:
                votes[a] += 1.0
            elif prob < 0.5 - _VOTE_TOL:
                votes[b] += 1.0
            else:
                votes[a] += 0.5
                votes[b] += 0.5
        return votes

    def select(self, query) -> Selection:
        q = MetaFeatures.of(query)
        votes = self.tally(q)
        if self.use_fallback and fallback_check(q, self.training_points):
            return Selection(self.fallback_policy, votes, True)
        best = max(range(len(self.policies)), key=lambda i: (votes[self.policies[i]], -i))
        return Selection(self.policies[best], votes, False)

    def to_dict(self) -> dict:
        return {
            "format": "metafolio-selector",
            "version": SELECTOR_FORMAT_VERSION,
            "policies": list(self.policies),
            "fallback_policy": self.fallback_policy,
            "use_fallback": self.use_fallback,
            "hyperparams": asdict(self.hyperparams),
            "training_points": [list(p) for p in self.training_points],
            "pairs": [{"a": a, "b": b, "trees": f.to_list()} for (a, b), f in self.pairs.items()],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PolicySelector":
        if doc.get("format") != "metafolio-selector":
            raise ParseError("not a selector document", field="format")
        if doc.get("version") != SELECTOR_FORMAT_VERSION:
            raise ParseError(f"unsupported selector version {doc.get('version')!r}", field="version")
        try:
            pairs = {(p["a"], p["b"]): Forest.from_list(p["trees"]) for p in doc["pairs"]}
            return cls(
                list(doc["policies"]),
                pairs,
                [tuple(p) for p in doc["training_points"]],
                SelectorHyperparams(**doc["hyperparams"]),
                doc["fallback_policy"],
                bool(doc.get("use_fallback", True)),
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed selector document: {exc}") from None


def _pareto_front(points) -> list[tuple[int, int]]:
    """Training points not dominated by another one; enough for the fallback test."""
    pts = sorted(set(points), key=lambda t: (-t[0], -t[1]))
    front, best_f = [], -1
    for n, f in pts:
        if f > best_f:
            front.append((n, f))
            best_f = f
    return front


def train_pairwise_selector(
    meta_features: Mapping[str, object],
    policy_losses: PolicyTable,
    hp: SelectorHyperparams = SelectorHyperparams(),
    seed: int = 0,
    fallback_policy: str | None = None,
    use_fallback: bool = True,
    jobs: int = 1,
) -> PolicySelector:
    """Fit one weighted forest per unordered policy pair.

    Label 1 means the first policy of the pair has the lower loss; datasets
    where the pair ties are dropped. A pair without any remaining dataset
    gets a constant 0.5 model.
    """
    policies = list(policy_losses)
    if len(policies) < 2:
        raise ValidationError("need at least two policies")
    datasets = table_datasets(policy_losses)
    if len(datasets) < 3:
        raise ValidationError("need at least three datasets")
    missing = [d for d in datasets if d not in meta_features]
    if missing:
        raise ValidationError(f"no meta-features for dataset {missing[0]!r}")
    feats = [MetaFeatures.of(meta_features[d]) for d in datasets]
    X = np.array([[m.n_samples, m.n_features] for m in feats], dtype=float)
    if hp.log_features:
        X = np.log10(X)
    L = np.array([[policy_losses[p][d] for d in datasets] for p in policies], dtype=float)
    pairs = list(itertools.combinations(range(len(policies)), 2))

    def fit(k):
        i, j = pairs[k]
        keep = L[i] != L[j]
        w = compute_pair_weights(L[i], L[j], hp.weight_scaling, L)
        y = (L[i] < L[j]).astype(float)
        return Forest.fit(X[keep], y[keep], w[keep], hp.tree_params(), hp.n_trees, [seed, k])

    forests = ordered_map(fit, range(len(pairs)), jobs)
    return PolicySelector(
        policies,
        {(policies[i], policies[j]): f for (i, j), f in zip(pairs, forests)},
        _pareto_front((m.n_samples, m.n_features) for m in feats),
        hp,
        fallback_policy or default_fallback(policies),
        use_fallback,
    )


def select_policy(selector: PolicySelector, query) -> Selection:
    return selector.select(query)


# -------------------------------------------------------------- baselines


def single_best(policy_losses: PolicyTable) -> str:
    """Policy with the lowest mean normalized loss; ties go to table order."""
    norm = normalize_table(policy_losses)
    means = [math.fsum(norm[p].values()) / len(norm[p]) for p in norm]
    return list(norm)[min(range(len(means)), key=lambda i: (means[i], i))]


def oracle_policy(policy_losses: PolicyTable) -> dict[str, str]:
    policies = list(policy_losses)
    return {
        d: min(policies, key=lambda p: (policy_losses[p][d], policies.index(p)))
        for d in table_datasets(policy_losses)
    }


def random_policy(policies: Sequence[str], datasets: Sequence[str], seed: int) -> dict[str, str]:
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(policies), size=len(datasets))
    return {d: policies[int(k)] for d, k in zip(datasets, picks)}


def assignment_losses(assignment: Mapping[str, str], normalized: PolicyTable) -> dict[str, float]:
    return {d: normalized[p][d] for d, p in assignment.items()}


# ------------------------------------------------------------- inner CV


@dataclass(frozen=True)
class CVResult:
    mean: float
    per_fold: tuple[float, ...]
    choices: dict = field(default_factory=dict, compare=False)


def fold_assignment(datasets: Sequence[str], folds: int, seed: int) -> list[list[str]]:
    """Seeded shuffle split into ``folds`` groups of near-equal size."""
    if folds < 2:
        raise ValidationError("need at least two folds")
    if len(datasets) < folds:
        raise ValidationError(f"{len(datasets)} datasets cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(datasets))
    return [[datasets[i] for i in sorted(chunk)] for chunk in np.array_split(order, folds)]


def inner_cv_train_eval(
    policy_losses: PolicyTable,
    meta_features: Mapping[str, object],
    folds: int = 5,
    hp: SelectorHyperparams = SelectorHyperparams(),
    seed: int = 0,
    use_fallback: bool = True,
    fallback_policy: str | None = None,
) -> CVResult:
    """Mean normalized loss of the selector's choices on held-out folds."""
    datasets = table_datasets(policy_losses)
    norm = normalize_table(policy_losses)
    per_fold, choices = [], {}
    for k, held in enumerate(fold_assignment(datasets, folds, seed)):
        held_set = set(held)
        train = {p: {d: v for d, v in row.items() if d not in held_set} for p, row in policy_losses.items()}
        sel = train_pairwise_selector(meta_features, train, hp, seed + k, fallback_policy, use_fallback)
        losses = []
        for d in held:
            choice = sel.select(meta_features[d]).policy
            choices[d] = choice
            losses.append(norm[choice][d])
        per_fold.append(math.fsum(losses) / len(losses))
    return CVResult(math.fsum(per_fold) / len(per_fold), tuple(per_fold), choices)


# ---------------------------------------------------------------- tuning


@dataclass(frozen=True)
class SelectorSpace:
    """Search ranges: ``(lo, hi)`` inclusive for integers, tuples of choices otherwise."""

    min_samples_split: tuple[int, int] = (3, 20)
    min_samples_leaf: tuple[int, int] = (2, 20)
    max_depth: tuple[int, int] = (0, 20)
    max_features: tuple[int, int] = (1, 2)
    bootstrap: tuple[bool, ...] = (True, False)
    voting: tuple[str, ...] = ("soft", "hard")
    weight_scaling: tuple[str, ...] = WEIGHT_SCALINGS

    def sample(self, rng: np.random.Generator, n_trees: int) -> SelectorHyperparams:
        def integer(bounds):
            return int(rng.integers(bounds[0], bounds[1] + 1))

        def choice(options):
            return options[int(rng.integers(0, len(options)))]

        return SelectorHyperparams(
            min_samples_split=integer(self.min_samples_split),
            min_samples_leaf=integer(self.min_samples_leaf),
            max_depth=integer(self.max_depth),
            max_features=integer(self.max_features),
            bootstrap=choice(self.bootstrap),
            voting=choice(self.voting),
            weight_scaling=choice(self.weight_scaling),
            n_trees=n_trees,
        )


@dataclass(frozen=True)
class TuneResult:
    hyperparams: SelectorHyperparams
    score: float
    history: tuple[tuple[SelectorHyperparams, float], ...]


def tune_selector(
    policy_losses: PolicyTable,
    meta_features: Mapping[str, object],
    space: SelectorSpace = SelectorSpace(),
    budget: int = 50,
    folds: int = 5,
    seed: int = 0,
    n_trees: int = 100,
    use_fallback: bool = True,
    fallback_policy: str | None = None,
    jobs: int = 1,
) -> TuneResult:
    """Seeded random search minimizing the inner cross-validation loss.

    The first configuration reaching the lowest score is kept.
    """
    if budget < 1:
        raise ValidationError("tuning budget must be >= 1")
    rng = np.random.default_rng(seed)
    configs = [space.sample(rng, n_trees) for _ in range(budget)]
    scores = ordered_map(
        lambda hp: inner_cv_train_eval(
            policy_losses, meta_features, folds, hp, seed, use_fallback, fallback_policy
        ).mean,
        configs,
        jobs,
    )
    best = min(range(budget), key=lambda i: (scores[i], i))
    return TuneResult(configs[best], scores[best], tuple(zip(configs, scores)))


# ------------------------------------------------------------------- I/O


def _read_text(source) -> str:
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    return source


def load_policy_table(source) -> dict[str, dict[str, float]]:
    """Parse CSV ``policy,dataset,loss`` into ``policy -> dataset -> loss``."""
    reader = csv.DictReader(io.StringIO(_read_text(source)))
    for col in ("policy", "dataset", "loss"):
        if col not in (reader.fieldnames or []):
            raise ParseError("policy table header lacks column", field=col)
    table: dict[str, dict[str, float]] = {}
    for i, row in enumerate(reader):
        try:
            v = float(row["loss"])
        except (TypeError, ValueError):
            raise ParseError("loss is not a number", field="loss", index=i) from None
        per = table.setdefault(row["policy"], {})
        if row["dataset"] in per:
            raise ValidationError(f"duplicate row for policy {row['policy']!r} on dataset {row['dataset']!r}")
        per[row["dataset"]] = v
    table_datasets(table)
    return table


def load_meta_features(source) -> dict[str, MetaFeatures]:
    """Parse CSV ``dataset,n_samples,n_features``."""
    reader = csv.DictReader(io.StringIO(_read_text(source)))
    for col in ("dataset", "n_samples", "n_features"):
        if col not in (reader.fieldnames or []):
            raise ParseError("meta-feature header lacks column", field=col)
    out = {}
    for i, row in enumerate(reader):
        try:
            out[row["dataset"]] = MetaFeatures(int(row["n_samples"]), int(row["n_features"]))
        except (TypeError, ValueError):
            raise ParseError("meta-features must be integers", field="n_samples", index=i) from None
    return out


def dump_policy_table(table: PolicyTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "dataset", "loss"])
    for p, row in table.items():
        for d, v in row.items():
            w.writerow([p, d, repr(float(v))])
    return buf.getvalue()


def dump_meta_features(meta: Mapping[str, object]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "n_samples", "n_features"])
    for d, m in meta.items():
        m = MetaFeatures.of(m)
        w.writerow([d, m.n_samples, m.n_features])
    return buf.getvalue()
