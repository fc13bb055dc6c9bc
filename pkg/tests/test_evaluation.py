import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import dataset, simple_label, text_label, trace
from leakscope.classifiers import NBKind
from leakscope.core import Action
from leakscope.errors import EmptyMatrix, TooFewPerClass
from leakscope.evaluation import (
    AccuracyCurve,
    ClassifierSpec,
    ConfusionMatrix,
    CurvePoint,
    accuracy,
    evaluate_regression,
    kfold,
    kfold_indices,
    sweep,
)


def toy_dataset(per_class=20, seed=0):
    rng = np.random.default_rng(seed)
    traces = []
    for action, centre in ((Action.START, 100), (Action.STOP, 140)):
        for _ in range(per_class):
            traces.append(trace((centre + rng.integers(0, 6, size=3)).tolist(), simple_label(action)))
    return dataset(traces)


SPEC = ClassifierSpec("toy", ("Start", "Stop"), lambda t, p: t.label.action.value, NBKind.MULTINOMIAL)


@given(st.integers(2, 6), st.integers(0, 10**6))
@settings(max_examples=25)
def test_kfold_partitions_and_stratifies(k, seed):
    ds = toy_dataset(per_class=13)
    folds = kfold_indices(ds.traces, k, seed)
    tests = np.concatenate([te for _, te in folds])
    assert sorted(tests.tolist()) == list(range(len(ds)))
    for tr, te in folds:
        assert set(tr.tolist()).isdisjoint(te.tolist())
        assert len(tr) + len(te) == len(ds)
        per = np.bincount([ds.traces[i].label.action is Action.STOP for i in te], minlength=2)
        assert per.max() - per.min() <= 1
        assert 13 // k <= per.min() and per.max() <= -(-13 // k)


def test_kfold_ignores_input_order():
    ds = toy_dataset()
    rev = ds.with_traces(reversed(ds.traces))
    a = [sorted(map(repr, te.traces)) for _, te in kfold(ds, 5, 3)]
    b = [sorted(map(repr, te.traces)) for _, te in kfold(rev, 5, 3)]
    assert a == b


def test_kfold_needs_enough_per_stratum():
    with pytest.raises(TooFewPerClass):
        kfold_indices(toy_dataset(per_class=3).traces, 5, 0)
    with pytest.raises(ValueError):
        kfold_indices(toy_dataset().traces, 1, 0)


def test_accuracy_and_confusion():
    cm = ConfusionMatrix.empty(("a", "b"))
    cm.add(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    assert accuracy(cm) == 0.75
    assert cm.recall() == {"a": 0.5, "b": 1.0}
    assert ConfusionMatrix.from_dict(cm.to_dict()).counts.tolist() == cm.counts.tolist()
    with pytest.raises(EmptyMatrix):
        accuracy(ConfusionMatrix.empty(("a",)))


def test_curve_csv_and_order():
    c = AccuracyCurve([CurvePoint(1, 0.5, 10), CurvePoint(3, 0.75, 10)])
    assert c.to_csv() == "n,accuracy,count\n1,0.5,10\n3,0.75,10\n"
    assert c.at(3) == 0.75
    with pytest.raises(ValueError):
        AccuracyCurve([CurvePoint(3, 0.5, 1), CurvePoint(1, 0.5, 1)])


def test_sweep_separable_is_perfect_and_deterministic():
    ds = toy_dataset()
    a = sweep(ds, SPEC, [1, 2, 4], instances_per_n=200, seed=1, k=5)
    assert [p.accuracy for p in a.curve.points] == [1.0, 1.0, 1.0]
    b = sweep(ds, SPEC, [4, 1, 2], instances_per_n=200, seed=1, k=5, jobs=3)
    assert a.to_dict() == b.to_dict()
    assert a.curve.points[0].instance_count == 5 * 2 * 20


def test_sweep_overlapping_classes_near_chance():
    rng = np.random.default_rng(4)
    traces = [trace((100 + rng.integers(0, 4, size=3)).tolist(), simple_label(a))
              for a in (Action.START, Action.STOP) for _ in range(30)]
    res = sweep(dataset(traces), SPEC, [1], instances_per_n=4000, seed=2, k=5)
    assert abs(res.curve.at(1) - 0.5) < 0.06


def test_regression_exact_line_has_zero_error():
    pairs = {"g": [(100 + 16 * i, 10 + 16 * i) for i in range(30)]}
    rep = evaluate_regression(pairs, k=5)
    g = rep.groups["g"]
    assert g.mae == pytest.approx(0, abs=1e-9)
    assert g.slope == pytest.approx(1.0)
    assert g.baseline_mae > 100
    assert rep.to_dict()["overall_mae"] == pytest.approx(0, abs=1e-9)


def test_regression_constant_payload_uses_mean():
    pairs = {"g": [(500, t) for t in (10, 20, 30, 40, 50)] * 2}
    g = evaluate_regression(pairs, k=5).groups["g"]
    assert g.slope == 0.0 and g.intercept == 30.0


def test_regression_from_dataset_groups():
    traces = [trace([90 + n, 40], text_label(chars=n)) for n in range(1, 25)]
    rep = evaluate_regression(dataset(traces), lambda t: "x", k=4, control_lengths=[40])
    assert rep.groups["x"].count == 24
    assert rep.groups["x"].mae == pytest.approx(0, abs=1e-9)
    with pytest.raises(TooFewPerClass):
        evaluate_regression({"g": [(1, 1)] * 3}, k=5)


def test_single_class_sweep_is_perfect():
    ds = dataset([trace([100 + i % 3], simple_label(Action.STOP)) for i in range(20)])
    spec = ClassifierSpec("one", ("Stop",), lambda t, p: "Stop", NBKind.BINOMIAL)
    assert all(p.accuracy == 1.0 for p in sweep(ds, spec, [1, 7], 50, k=4).curve.points)


def test_language_curve_is_monotone_within_tolerance():
    from leakscope.experiments import run_language_classify
    from leakscope.simulator import generate_many, language_scenarios

    data = generate_many(language_scenarios(samples_per_class=3000))
    for r in run_language_classify(data, [1, 5, 10, 25, 50], 1024).values():
        acc = [p.accuracy for p in r.curve.points]
        assert all(b >= a - 0.03 for a, b in zip(acc, acc[1:])), acc
