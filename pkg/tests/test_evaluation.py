import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from underpass.cyclegan import CycleGANBundle, GANConfig, IdentityNetwork
from underpass.data import ClassLabel, DataError, Dataset, LabeledImage
from underpass.evaluation import (
    DEFAULT_TEST_SETS,
    EVAL_DOMAINS,
    ConfusionMatrix,
    TestSetSpec,
    build_experiment_b_sets,
    evaluate,
    per_class_report,
    run_experiment_b,
)
from underpass.synth import build_corpus


class Oracle:
    """Reads the label back out of the first pixel."""

    def predict(self, x):
        return np.rint(x[:, 0, 0, 0] * 10).astype(np.int64)


class Always:
    def __init__(self, label: int):
        self.label = label

    def predict(self, x):
        return np.full(len(x), self.label)


def _encoded(counts: dict[ClassLabel, int], domain: str = "day") -> Dataset:
    items = []
    for label, n in counts.items():
        for k in range(n):
            px = np.full((4, 4, 3), label / 10, np.float32)
            items.append(LabeledImage(px, label, domain, f"{domain}-{label.slug}-{k}", k))
    return Dataset(items)


def _identity_bundle():
    cfg = GANConfig(resolution=(4, 4, 3))
    return CycleGANBundle(cfg, IdentityNetwork(), IdentityNetwork(), IdentityNetwork(), IdentityNetwork())


def test_perfect_model_gives_diagonal():
    ds = _encoded({c: 3 + c for c in ClassLabel})
    result = evaluate(Oracle(), ds)
    assert result.accuracy == 1.0
    assert np.array_equal(result.confusion.counts, np.diag([3, 4, 5, 6]))
    assert all(v == 1.0 for v in result.per_class.values())


def test_constant_model_on_balanced_set():
    result = evaluate(Always(0), _encoded({c: 5 for c in ClassLabel}))
    assert result.accuracy == 0.25
    assert (result.confusion.counts[:, 0] == 5).all() and result.confusion.counts[:, 1:].sum() == 0
    report = per_class_report(result)
    assert [name for name, _ in report] == ["total", "empty", "pedestrian", "dog_walker", "bicyclist"]
    assert report[1][1] == 1.0 and report[2][1] == 0.0


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        evaluate(Oracle(), Dataset())


def test_argmax_ties_go_to_lowest_index():
    from underpass.arch import ArchitectureSpec
    from underpass.training import Classifier

    model = Classifier(ArchitectureSpec("t", ((2, 1),), (4,), input_resolution=(4, 4, 3)))
    for p in model.net.params:
        p.data[...] = 0  # every logit equal
    assert model.predict(np.zeros((3, 4, 4, 3), np.float32)).tolist() == [0, 0, 0]


@settings(max_examples=100, deadline=None)
@given(pairs=st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=80), cut=st.integers(0, 80))
def test_confusion_invariants_and_merge(pairs, cut):
    y_true, y_pred = (np.array(v) for v in zip(*pairs))
    cm = ConfusionMatrix.from_labels(y_true, y_pred)
    assert cm.total == len(pairs)
    assert cm.counts.sum(axis=1).tolist() == [int((y_true == c).sum()) for c in range(4)]
    assert cm.correct == int((y_true == y_pred).sum())
    for c, acc in cm.per_class_accuracy().items():
        row = cm.counts[c].sum()
        assert (np.isnan(acc) and row == 0) or acc == cm.counts[c, c] / row
    # merging shards is order-independent
    k = cut % (len(pairs) + 1)
    left = ConfusionMatrix.from_labels(y_true[:k], y_pred[:k])
    right = ConfusionMatrix.from_labels(y_true[k:], y_pred[k:])
    assert left + right == cm == right + left


def test_confusion_csv_round_trip(tmp_path):
    cm = ConfusionMatrix(np.arange(16).reshape(4, 4))
    cm.write_csv(tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["true\\pred", "empty", "pedestrian", "dog_walker", "bicyclist"]
    assert [r[0] for r in rows[1:]] == ["empty", "pedestrian", "dog_walker", "bicyclist"]
    assert ConfusionMatrix.read_csv(tmp_path / "c.csv") == cm
    with pytest.raises(ValueError):
        ConfusionMatrix(-np.ones((4, 4)))


def test_default_test_sets_match_published_counts():
    assert [(s.name, s.day, s.night, s.night2day) for s in DEFAULT_TEST_SETS] == [
        ("PedSet", 180, 106, 106),
        ("BikeSet", 50, 60, 60),
        ("EmpSet", 180, 106, 106),
    ]
    assert [s.label for s in DEFAULT_TEST_SETS] == [ClassLabel.PEDESTRIAN, ClassLabel.BICYCLIST, ClassLabel.EMPTY]


def test_build_sets_counts_and_linkage():
    day = _encoded({c: 200 for c in (ClassLabel.EMPTY, ClassLabel.PEDESTRIAN, ClassLabel.BICYCLIST)})
    night = _encoded({ClassLabel.EMPTY: 106, ClassLabel.PEDESTRIAN: 110, ClassLabel.BICYCLIST: 60}, "night")
    sets = build_experiment_b_sets(day, night, _identity_bundle(), seed=3)
    for ts in sets:
        counts = {d: len(ts.partitions[d]) for d in EVAL_DOMAINS}
        assert counts == ts.spec.counts()
        assert ts.partitions["night"].source_ids() == ts.partitions["night2day"].source_ids()
        assert all(i.domain == "night2day" for i in ts.partitions["night2day"])
        assert all(i.label == ts.spec.label for d in EVAL_DOMAINS for i in ts.partitions[d])
    again = build_experiment_b_sets(day, night, _identity_bundle(), seed=3)
    assert [ts.partitions["day"].source_ids() for ts in sets] == [ts.partitions["day"].source_ids() for ts in again]


def test_build_sets_insufficient_pool_names_class_and_domain():
    day = _encoded({ClassLabel.PEDESTRIAN: 5})
    night = _encoded({ClassLabel.PEDESTRIAN: 5}, "night")
    with pytest.raises(DataError, match="night.*pedestrian"):
        build_experiment_b_sets(day, night, _identity_bundle(), [TestSetSpec("P", ClassLabel.PEDESTRIAN, 5, 6)])


def test_identity_bundle_gives_equal_night_accuracy():
    corpus = build_corpus({c: 30 for c in ClassLabel}, {c: 30 for c in ClassLabel}, seed=2, size=4)
    day, night = corpus.filter(domain="day"), corpus.filter(domain="night")
    specs = [TestSetSpec("A", ClassLabel.PEDESTRIAN, 10, 8), TestSetSpec("B", ClassLabel.EMPTY, 6, 9)]
    sets = build_experiment_b_sets(day, night, _identity_bundle(), specs)

    class Bright:
        def predict(self, x):
            return (x.mean(axis=(1, 2, 3)) > 0.3).astype(np.int64)

    report = run_experiment_b(Bright(), sets)
    for name in ("A", "B", "Total"):
        assert report.accuracy(name, "night2day") == report.accuracy(name, "night")
    assert report.confusion["night2day"] == report.confusion["night"]


def test_report_schema_and_union_totals(tmp_path):
    day = _encoded({c: 200 for c in (ClassLabel.EMPTY, ClassLabel.PEDESTRIAN, ClassLabel.BICYCLIST)})
    night = _encoded({ClassLabel.EMPTY: 106, ClassLabel.PEDESTRIAN: 106, ClassLabel.BICYCLIST: 60}, "night")
    sets = build_experiment_b_sets(day, night, _identity_bundle())
    perfect = run_experiment_b(Oracle(), sets)
    assert len(perfect.rows()) == 3 * 3 + 3
    assert all(c.accuracy == 1.0 for c in perfect.rows())

    report = run_experiment_b(Always(int(ClassLabel.EMPTY)), sets)
    # union accuracy is pooled, not the mean of the three sets
    assert report.accuracy("Total", "day") == pytest.approx(180 / 410)
    assert report.accuracy("Total", "night") == pytest.approx(106 / 272)
    assert report.accuracy("EmpSet", "night") == 1.0 and report.accuracy("BikeSet", "day") == 0.0
    with pytest.raises(KeyError):
        report.accuracy("DogSet", "day")

    paths = report.write(tmp_path)
    assert sorted(p.name for p in paths) == sorted(
        ["experiment_b.csv", "fig7_data.csv", "confusion_day.csv", "confusion_night.csv", "confusion_night2day.csv"]
    )
    lines = (tmp_path / "experiment_b.csv").read_text().splitlines()
    assert lines[0] == "test_set,domain,n,accuracy"
    assert lines[1:4] == ["PedSet,day,180,0.000000", "PedSet,night,106,0.000000", "PedSet,night2day,106,0.000000"]
    assert lines[-3] == f"Total,day,410,{180 / 410:.6f}"
    fig7 = (tmp_path / "fig7_data.csv").read_text().splitlines()
    assert fig7[0] == "series,domain,accuracy_pct,correct,n" and fig7[7] == "EmpSet,day,100.00,180,180"
    assert ConfusionMatrix.read_csv(tmp_path / "confusion_day.csv") == report.confusion["day"]
