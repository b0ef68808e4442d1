"""Accuracy, confusion matrices, and the cross-domain (day / night / night2day) harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import CLASS_NAMES, ClassLabel, DataError, Dataset, LabeledImage

EVAL_DOMAINS = ("day", "night", "night2day")
EXPERIMENT_B_FIELDS = ("test_set", "domain", "n", "accuracy")
FIG7_FIELDS = ("series", "domain", "accuracy_pct", "correct", "n")
TOTAL = "Total"


class Predictor(Protocol):
    def predict(self, x: np.ndarray) -> np.ndarray: ...


class ConfusionMatrix:
    """4x4 counts; rows are true classes and columns predictions."""

    size = len(ClassLabel)

    def __init__(self, counts: np.ndarray | None = None):
        if counts is None:
            counts = np.zeros((self.size, self.size), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.size, self.size) or (counts < 0).any():
            raise ValueError(f"confusion counts must be a non-negative {self.size}x{self.size} grid")
        self.counts = counts

    @classmethod
    def from_labels(cls, y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionMatrix:
        counts = np.zeros((cls.size, cls.size), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")

    def per_class_accuracy(self) -> dict[ClassLabel, float]:
        rows = self.counts.sum(axis=1)
        return {c: (self.counts[c, c] / rows[c] if rows[c] else float("nan")) for c in ClassLabel}

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *CLASS_NAMES])
            for c in ClassLabel:
                w.writerow([c.slug, *(int(v) for v in self.counts[c])])

    @classmethod
    def read_csv(cls, path: Path) -> ConfusionMatrix:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]]))


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[ClassLabel, float]
    confusion: ConfusionMatrix


def evaluate(model: Predictor, dataset: Dataset) -> EvalResult:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    x, y = dataset.arrays()
    cm = ConfusionMatrix.from_labels(y, model.predict(x))
    return EvalResult(cm.accuracy(), cm.per_class_accuracy(), cm)


def per_class_report(result: EvalResult) -> list[tuple[str, float]]:
    """Rows (name, accuracy) with the overall total first."""
    return [("total", result.accuracy)] + [(c.slug, result.per_class[c]) for c in ClassLabel]


# -- test set assembly ----------------------------------------------------


@dataclass(frozen=True)
class TestSetSpec:
    __test__ = False  # not a pytest class

    name: str
    label: ClassLabel
    day: int
    night: int

    @property
    def night2day(self) -> int:
        return self.night

    def counts(self) -> dict[str, int]:
        return {"day": self.day, "night": self.night, "night2day": self.night2day}


DEFAULT_TEST_SETS = (
    TestSetSpec("PedSet", ClassLabel.PEDESTRIAN, day=180, night=106),
    TestSetSpec("BikeSet", ClassLabel.BICYCLIST, day=50, night=60),
    TestSetSpec("EmpSet", ClassLabel.EMPTY, day=180, night=106),
)


@dataclass
class TestSet:
    __test__ = False

    spec: TestSetSpec
    partitions: dict[str, Dataset]


def _sample(pool: Dataset, label: ClassLabel, domain: str, n: int, rng: np.random.Generator, taken: set[str]) -> list[LabeledImage]:
    members = sorted((i for i in pool if i.label == label and i.source_id not in taken), key=lambda i: i.source_id)
    if len(members) < n:
        raise DataError(f"{domain} pool has {len(members)} {label.slug} images, need {n}")
    picked = [members[k] for k in sorted(rng.choice(len(members), size=n, replace=False))]
    taken.update(i.source_id for i in picked)
    return picked


def build_experiment_b_sets(
    day_pool: Dataset,
    night_pool: Dataset,
    bundle,
    specs: Sequence[TestSetSpec] = DEFAULT_TEST_SETS,
    seed: int = 0,
) -> list[TestSet]:
    """Sample each set's day and night images; night2day is the transformed night partition."""
    from .cyclegan import transform

    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xB]))
    taken_day: set[str] = set()
    taken_night: set[str] = set()
    sets = []
    for spec in specs:
        day = _sample(day_pool, spec.label, "day", spec.day, rng, taken_day)
        night = _sample(night_pool, spec.label, "night", spec.night, rng, taken_night)
        n2d = [transform(bundle, item, "night2day") for item in night]
        sets.append(TestSet(spec, {"day": Dataset(day), "night": Dataset(night), "night2day": Dataset(n2d)}))
    return sets


# -- report ---------------------------------------------------------------


@dataclass
class GridCell:
    test_set: str
    domain: str
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else float("nan")


@dataclass
class ExperimentBReport:
    cells: list[GridCell]
    confusion: dict[str, ConfusionMatrix] = field(default_factory=dict)

    def rows(self) -> list[GridCell]:
        """Per-set cells followed by one total row per domain."""
        totals = []
        for domain in EVAL_DOMAINS:
            cm = self.confusion[domain]
            totals.append(GridCell(TOTAL, domain, cm.total, cm.correct))
        return self.cells + totals

    def accuracy(self, test_set: str, domain: str) -> float:
        for cell in self.rows():
            if cell.test_set == test_set and cell.domain == domain:
                return cell.accuracy
        raise KeyError((test_set, domain))

    def write(self, out_dir: Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "experiment_b.csv", out_dir / "fig7_data.csv"]
        with open(paths[0], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EXPERIMENT_B_FIELDS)
            for c in self.rows():
                w.writerow([c.test_set, c.domain, c.n, f"{c.accuracy:.6f}"])
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIG7_FIELDS)
            for c in self.rows():
                w.writerow([c.test_set, c.domain, f"{100 * c.accuracy:.2f}", c.correct, c.n])
        for domain, cm in self.confusion.items():
            path = out_dir / f"confusion_{domain}.csv"
            cm.write_csv(path)
            paths.append(path)
        return paths


def run_experiment_b(model: Predictor, sets: Sequence[TestSet]) -> ExperimentBReport:
    cells = []
    confusion = {d: ConfusionMatrix() for d in EVAL_DOMAINS}
    for ts in sets:
        for domain in EVAL_DOMAINS:
            part = ts.partitions[domain]
            if len(part) == 0:
                cells.append(GridCell(ts.spec.name, domain, 0, 0))
                continue
            cm = evaluate(model, part).confusion
            confusion[domain] = confusion[domain] + cm
            cells.append(GridCell(ts.spec.name, domain, cm.total, cm.correct))
    return ExperimentBReport(cells, confusion)
