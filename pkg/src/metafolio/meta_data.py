"""Domain types for the offline meta-data and their on-disk formats.

A :class:`PerformanceMatrix` holds one :class:`LearningCurve` per
(candidate, dataset) pair. Curves are step functions over checkpointed
budgets; a missing or ``FAILED`` entry always evaluates to the worst
observed loss of its dataset.
"""
from __future__ import annotations

import bisect
import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

from .errors import NoResultYet, ParseError, ValidationError

__all__ = [
    "Checkpoint",
    "DatasetMeta",
    "LearningCurve",
    "PerformanceMatrix",
    "Policy",
    "Portfolio",
    "STANDARD_POLICY_IDS",
    "curve_at_budget",
    "load_matrix",
    "save_matrix",
    "dump_matrix",
]


@dataclass(frozen=True)
class DatasetMeta:
    id: str
    n_samples: int
    n_features: int
    loss_min: float
    loss_max: float

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("dataset id must be a nonempty string")
        if int(self.n_samples) < 1 or int(self.n_features) < 1:
            raise ValidationError(
                f"dataset {self.id!r}: n_samples and n_features must be >= 1"
            )
        if not self.loss_min <= self.loss_max:
            raise ValidationError(
                f"dataset {self.id!r}: loss_min {self.loss_min} > loss_max {self.loss_max}"
            )


@dataclass(frozen=True)
class Checkpoint:
    budget: int
    val_loss: float
    test_loss: float
    wall_time_s: float


@dataclass(frozen=True)
class LearningCurve:
    checkpoints: tuple[Checkpoint, ...]

    def __post_init__(self):
        cps = tuple(
            cp if isinstance(cp, Checkpoint) else Checkpoint(int(cp[0]), float(cp[1]), float(cp[2]), float(cp[3]))
            for cp in self.checkpoints
        )
        object.__setattr__(self, "checkpoints", cps)
        if not cps:
            raise ValidationError("learning curve has no checkpoints")
        for prev, cur in zip(cps, cps[1:]):
            if cur.budget <= prev.budget:
                raise ValidationError(
                    f"checkpoint budgets must be strictly increasing, got {prev.budget} then {cur.budget}"
                )
            if cur.wall_time_s < prev.wall_time_s:
                raise ValidationError("checkpoint wall times must be nondecreasing")
        for cp in cps:
            if cp.budget < 1:
                raise ValidationError(f"checkpoint budget must be positive, got {cp.budget}")
            if cp.wall_time_s < 0:
                raise ValidationError("checkpoint wall time must be nonnegative")
        object.__setattr__(self, "_budgets", [cp.budget for cp in cps])

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[float]]) -> "LearningCurve":
        return cls(tuple(Checkpoint(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows))

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    def at(self, budget: int) -> Checkpoint:
        """Last checkpoint with ``checkpoint.budget <= budget``."""
        i = bisect.bisect_right(self._budgets, budget)
        if i == 0:
            raise NoResultYet(f"no checkpoint at or below budget {budget}")
        return self.checkpoints[i - 1]

    def within_time(self, seconds: float, budget: int | None = None) -> Checkpoint | None:
        """Last checkpoint reached within ``seconds`` (and ``budget``), if any."""
        best = None
        for cp in self.checkpoints:
            if cp.wall_time_s > seconds or (budget is not None and cp.budget > budget):
                break
            best = cp
        return best

    def time_to_reach(self, budget: int) -> float:
        """Wall time until training has passed ``budget`` iterations.

        Training stops at the final checkpoint, so budgets beyond it cost the
        final wall time.
        """
        i = bisect.bisect_left(self._budgets, budget)
        if i == len(self.checkpoints):
            return self.checkpoints[-1].wall_time_s
        return self.checkpoints[i].wall_time_s


def curve_at_budget(curve: LearningCurve, budget: int) -> tuple[float, float]:
    """Return ``(val_loss, test_loss)`` of the curve as a step function.

    Raises :class:`NoResultYet` when ``budget`` lies below the first checkpoint.
    """
    cp = curve.at(budget)
    return cp.val_loss, cp.test_loss


@dataclass(frozen=True, eq=True)
class PerformanceMatrix:
    """Candidates x datasets grid of learning curves.

    ``entries`` maps ``(candidate, dataset)`` to a curve, or to ``None`` for
    a FAILED run. Candidate order is the "evaluated first" order used for
    tie-breaking everywhere.
    """

    datasets: tuple[DatasetMeta, ...]
    candidates: tuple[str, ...]
    entries: Mapping[tuple[str, str], LearningCurve | None]
    l_max: float = 1.0
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "entries", dict(self.entries))
        index = {}
        for d in self.datasets:
            if d.id in index:
                raise ValidationError(f"duplicate dataset id {d.id!r}")
            index[d.id] = d
        seen = set()
        for c in self.candidates:
            if c in seen:
                raise ValidationError(f"duplicate candidate id {c!r}")
            seen.add(c)
        for c in self.candidates:
            for d in self.datasets:
                if (c, d.id) not in self.entries:
                    raise ValidationError(f"missing entry for candidate {c!r} on dataset {d.id!r}")
        for (c, d), curve in self.entries.items():
            if c not in seen or d not in index:
                raise ValidationError(f"entry ({c!r}, {d!r}) references an unknown id")
            if curve is None:
                continue
            for cp in curve.checkpoints:
                for name, v in (("val_loss", cp.val_loss), ("test_loss", cp.test_loss)):
                    if not (0.0 <= v <= self.l_max) or math.isnan(v):
                        raise ValidationError(
                            f"{name} {v} of ({c!r}, {d!r}) outside [0, {self.l_max}]"
                        )
        object.__setattr__(self, "_index", index)

    @property
    def dataset_ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self.datasets)

    def dataset(self, dataset_id: str) -> DatasetMeta:
        try:
            return self._index[dataset_id]
        except KeyError:
            raise KeyError(f"unknown dataset {dataset_id!r}") from None

    def curve(self, candidate: str, dataset_id: str) -> LearningCurve | None:
        """Curve for the pair, or ``None`` when FAILED or absent."""
        return self.entries.get((candidate, dataset_id))

    def worst_loss(self, dataset_id: str) -> float:
        return self.dataset(dataset_id).loss_max

    def stats(self):
        from .metrics import NormalizationStats

        return NormalizationStats({d.id: (d.loss_min, d.loss_max) for d in self.datasets})

    def meta_features(self) -> dict[str, tuple[int, int]]:
        return {d.id: (d.n_samples, d.n_features) for d in self.datasets}

    def subset(self, dataset_ids: Iterable[str]) -> "PerformanceMatrix":
        keep = [self.dataset(d) for d in dataset_ids]
        ids = {d.id for d in keep}
        entries = {k: v for k, v in self.entries.items() if k[1] in ids}
        return PerformanceMatrix(keep, self.candidates, entries, self.l_max)

    @classmethod
    def from_final_losses(
        cls,
        losses: Mapping[tuple[str, str], tuple[float, float, float] | None],
        candidates: Sequence[str],
        datasets: Sequence[str],
        meta: Mapping[str, tuple[int, int]] | None = None,
        l_max: float = 1.0,
    ) -> "PerformanceMatrix":
        """Build one-checkpoint curves (budget 1) with observed per-dataset bounds."""
        entries = {}
        for key, v in losses.items():
            entries[key] = None if v is None else LearningCurve((Checkpoint(1, v[0], v[1], v[2]),))
        metas = [
            _observed_meta(d, entries, candidates, (meta or {}).get(d, (1, 1)), l_max)
            for d in datasets
        ]
        return cls(metas, candidates, entries, l_max)


def _observed_meta(dataset_id, entries, candidates, counts, l_max) -> DatasetMeta:
    tests = [
        cp.test_loss
        for c in candidates
        if entries.get((c, dataset_id)) is not None
        for cp in entries[(c, dataset_id)].checkpoints
    ]
    lo, hi = (min(tests), max(tests)) if tests else (0.0, l_max)
    if any(entries.get((c, dataset_id)) is None for c in candidates):
        hi = l_max
    return DatasetMeta(dataset_id, int(counts[0]), int(counts[1]), lo, hi)


def observed_bounds(matrix_entries, candidates, dataset_ids, l_max=1.0) -> dict[str, tuple[float, float]]:
    """Per-dataset (min, max) over all observed test losses; FAILED pushes max to ``l_max``."""
    out = {}
    for d in dataset_ids:
        m = _observed_meta(d, matrix_entries, candidates, (1, 1), l_max)
        out[d] = (m.loss_min, m.loss_max)
    return out


# --------------------------------------------------------------------------- I/O

_CSV_COLUMNS = ("candidate", "dataset", "val_loss", "test_loss", "wall_time_s")


def load_matrix(source: IO | bytes | str, format: str = "json") -> PerformanceMatrix:
    """Parse a matrix from a byte stream, bytes, or text in ``json`` or ``csv`` format."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if format == "json":
        return _load_json(source)
    if format == "csv":
        return _load_csv(source)
    raise ValueError(f"unknown matrix format {format!r}")


def _require(record, key, index, kind, section):
    if not isinstance(record, dict) or key not in record:
        raise ParseError(f"{section}: missing field", field=key, index=index)
    value = record[key]
    ok = {
        "str": isinstance(value, str),
        "int": isinstance(value, int) and not isinstance(value, bool),
        "num": isinstance(value, (int, float)) and not isinstance(value, bool),
    }[kind]
    if not ok:
        raise ParseError(f"{section}: expected {kind}", field=key, index=index)
    return value


def _load_json(text: str) -> PerformanceMatrix:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object")
    for key in ("datasets", "candidates", "entries"):
        if not isinstance(doc.get(key), list):
            raise ParseError("missing or non-list top-level field", field=key)
    l_max = doc.get("l_max", 1.0)
    if not isinstance(l_max, (int, float)) or isinstance(l_max, bool) or l_max <= 0:
        raise ParseError("l_max must be a positive number", field="l_max")

    datasets = []
    for i, rec in enumerate(doc["datasets"]):
        datasets.append(
            DatasetMeta(
                _require(rec, "id", i, "str", "datasets"),
                _require(rec, "n_samples", i, "int", "datasets"),
                _require(rec, "n_features", i, "int", "datasets"),
                float(_require(rec, "loss_min", i, "num", "datasets")),
                float(_require(rec, "loss_max", i, "num", "datasets")),
            )
        )
    candidates = []
    for i, c in enumerate(doc["candidates"]):
        if not isinstance(c, str) or not c:
            raise ParseError("candidate id must be a nonempty string", field="candidates", index=i)
        candidates.append(c)

    entries = {}
    for i, rec in enumerate(doc["entries"]):
        c = _require(rec, "candidate", i, "str", "entries")
        d = _require(rec, "dataset", i, "str", "entries")
        if (c, d) in entries:
            raise ValidationError(f"duplicate entry for candidate {c!r} on dataset {d!r}")
        if "status" in rec:
            if rec["status"] != "FAILED":
                raise ParseError("status must be 'FAILED'", field="status", index=i)
            entries[(c, d)] = None
            continue
        rows = rec.get("curve")
        if not isinstance(rows, list) or not rows:
            raise ParseError("entries: curve must be a nonempty list", field="curve", index=i)
        for row in rows:
            if (
                not isinstance(row, list)
                or len(row) != 4
                or not isinstance(row[0], int)
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)
            ):
                raise ParseError(
                    "entries: curve rows must be [budget, val_loss, test_loss, wall_time_s]",
                    field="curve",
                    index=i,
                )
        entries[(c, d)] = LearningCurve.from_rows(rows)
    return PerformanceMatrix(datasets, candidates, entries, float(l_max))


def _load_csv(text: str) -> PerformanceMatrix:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in _CSV_COLUMNS if c not in header]
    if missing:
        raise ParseError("CSV header lacks required column", field=missing[0])
    candidates: list[str] = []
    datasets: list[str] = []
    counts: dict[str, tuple[int, int]] = {}
    losses = {}
    for i, row in enumerate(reader):
        c, d = row["candidate"], row["dataset"]
        if not c or not d:
            raise ParseError("empty id", field="candidate" if not c else "dataset", index=i)
        if c not in candidates:
            candidates.append(c)
        if d not in datasets:
            datasets.append(d)
        if (c, d) in losses:
            raise ValidationError(f"duplicate entry for candidate {c!r} on dataset {d!r}")
        if "n_samples" in header and row.get("n_samples"):
            try:
                counts[d] = (int(row["n_samples"]), int(row["n_features"]))
            except (TypeError, ValueError):
                raise ParseError("meta-feature counts must be integers", field="n_samples", index=i) from None
        if row["val_loss"].strip().upper() == "FAILED" or row.get("status", "").strip().upper() == "FAILED":
            losses[(c, d)] = None
            continue
        try:
            losses[(c, d)] = tuple(float(row[k]) for k in ("val_loss", "test_loss", "wall_time_s"))
        except (TypeError, ValueError):
            bad = next(k for k in ("val_loss", "test_loss", "wall_time_s") if not _is_float(row[k]))
            raise ParseError("not a number", field=bad, index=i) from None
    return PerformanceMatrix.from_final_losses(losses, candidates, datasets, counts)


def _is_float(s) -> bool:
    try:
        float(s)
    except (TypeError, ValueError):
        return False
    return True


def _matrix_doc(matrix: PerformanceMatrix) -> dict:
    entries = []
    for c in matrix.candidates:
        for d in matrix.datasets:
            curve = matrix.curve(c, d.id)
            if curve is None:
                entries.append({"candidate": c, "dataset": d.id, "status": "FAILED"})
            else:
                entries.append(
                    {
                        "candidate": c,
                        "dataset": d.id,
                        "curve": [
                            [cp.budget, cp.val_loss, cp.test_loss, cp.wall_time_s]
                            for cp in curve.checkpoints
                        ],
                    }
                )
    return {
        "l_max": matrix.l_max,
        "datasets": [
            {
                "id": d.id,
                "n_samples": d.n_samples,
                "n_features": d.n_features,
                "loss_min": d.loss_min,
                "loss_max": d.loss_max,
            }
            for d in matrix.datasets
        ],
        "candidates": list(matrix.candidates),
        "entries": entries,
    }


_ROW = re.compile(r"\[\n\s+(-?[\d.e+-]+),\n\s+(-?[\d.e+-]+),\n\s+(-?[\d.e+-]+),\n\s+(-?[\d.e+-]+)\n\s+\]")


def dump_matrix(matrix: PerformanceMatrix) -> str:
    """Canonical JSON text; ``dump_matrix(load_matrix(t)) == t`` for canonical ``t``."""
    text = json.dumps(_matrix_doc(matrix), indent=2)
    # one checkpoint per line keeps files diffable
    text = _ROW.sub(lambda m: "[" + ", ".join(m.groups()) + "]", text)
    return text + "\n"


def save_matrix(matrix: PerformanceMatrix, sink: IO[bytes] | IO[str] | None = None) -> bytes:
    data = dump_matrix(matrix).encode("utf-8")
    if sink is not None:
        try:
            sink.write(data)
        except TypeError:
            sink.write(data.decode("utf-8"))
    return data


# ----------------------------------------------------------------------- policies

_POLICY_ID = re.compile(r"^(holdout|cv(\d+))-(fb|sh)$")


@dataclass(frozen=True)
class Portfolio:
    """Ordered candidate ids plus the marginal ADTM gain recorded at insertion."""

    members: tuple[str, ...] = ()
    provenance: tuple[float, ...] = ()
    strategy: str = ""

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "provenance", tuple(float(x) for x in self.provenance))
        if len(set(self.members)) != len(self.members):
            raise ValidationError("portfolio members must be unique")
        if self.provenance and len(self.provenance) != len(self.members):
            raise ValidationError("provenance must have one value per member")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def to_dict(self) -> dict:
        return {
            "members": list(self.members),
            "strategy": self.strategy,
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Portfolio":
        if not isinstance(doc, Mapping) or not isinstance(doc.get("members"), list):
            raise ParseError("portfolio document needs a 'members' list", field="members")
        return cls(tuple(doc["members"]), tuple(doc.get("provenance", ())), doc.get("strategy", ""))


@dataclass(frozen=True)
class Policy:
    """Validation scheme x budget allocation (x portfolio).

    ``folds`` is ``None`` for holdout. SH parameters are ignored for
    full-budget policies.
    """

    validation: str = "holdout"
    folds: int | None = None
    allocation: str = "fb"
    eta: float = 4.0
    b_min: int = 32
    b_max: int = 512
    portfolio: Portfolio = Portfolio()

    def __post_init__(self):
        if self.validation not in ("holdout", "cv"):
            raise ValidationError(f"unknown validation scheme {self.validation!r}")
        if self.validation == "cv" and (self.folds is None or self.folds < 2):
            raise ValidationError("cross-validation needs folds >= 2")
        if self.validation == "holdout" and self.folds is not None:
            raise ValidationError("holdout takes no fold count")
        if self.allocation not in ("fb", "sh"):
            raise ValidationError(f"unknown budget allocation {self.allocation!r}")
        if self.allocation == "sh":
            if not self.eta > 1:
                raise ValidationError("SH needs eta > 1")
            if not 1 <= self.b_min <= self.b_max:
                raise ValidationError("SH needs 1 <= b_min <= b_max")

    @property
    def id(self) -> str:
        v = "holdout" if self.validation == "holdout" else f"cv{self.folds}"
        return f"{v}-{self.allocation}"

    @property
    def uses_sh(self) -> bool:
        return self.allocation == "sh"

    @classmethod
    def from_id(cls, policy_id: str, eta: float = 4.0, b_min: int = 32, b_max: int = 512) -> "Policy":
        m = _POLICY_ID.match(policy_id)
        if not m:
            raise ValidationError(f"cannot parse policy id {policy_id!r} (expected e.g. 'cv5-sh')")
        if m.group(1) == "holdout":
            return cls("holdout", None, m.group(3), eta, b_min, b_max)
        return cls("cv", int(m.group(2)), m.group(3), eta, b_min, b_max)

    def with_portfolio(self, portfolio: Portfolio) -> "Policy":
        return Policy(self.validation, self.folds, self.allocation, self.eta, self.b_min, self.b_max, portfolio)


STANDARD_POLICY_IDS = tuple(
    f"{v}-{a}" for v in ("holdout", "cv3", "cv5", "cv10") for a in ("sh", "fb")
)
