import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaborlens.evaluation import (
    ConfusionMatrix,
    EvalReport,
    confusion,
    metrics,
    repeated_eval,
    run_seed,
    split_indices,
    write_accuracy_curve,
)
from gaborlens.net import TrainConfig, tiny_spec
from gaborlens.signal_prep import ClassLabel

L = ClassLabel


def random_cm(seed, high=20):
    return ConfusionMatrix(np.random.default_rng(seed).integers(0, high, (5, 5)))


def test_confusion_all_correct():
    cm = confusion([(c, c) for c in L for _ in range(3)])
    np.testing.assert_array_equal(cm.counts, 3 * np.eye(5, dtype=int))


def test_confusion_single_pair():
    cm = confusion([(L.N, L.AS)])
    assert cm.counts[0, 1] == 1 and cm.total == 1


def test_confusion_hand_tally():
    pairs = [("N", "N"), ("N", "AS"), ("AS", "AS"), ("MR", "MS"), ("MR", "MR"),
             ("MS", "MS"), ("MS", "MR"), ("MVP", "MVP"), ("MVP", "N"), (0, 0)]
    expected = np.zeros((5, 5), dtype=int)
    expected[0, 0] = 2
    expected[0, 1] = 1
    expected[1, 1] = 1
    expected[2, 3] = 1
    expected[2, 2] = 1
    expected[3, 3] = 1
    expected[3, 2] = 1
    expected[4, 4] = 1
    expected[4, 0] = 1
    np.testing.assert_array_equal(confusion(pairs).counts, expected)


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion([])
    with pytest.raises(ValueError):
        confusion([("N", "XX")])
    with pytest.raises(ValueError):
        ConfusionMatrix(-np.ones((5, 5)))


def test_metrics_perfect():
    m = metrics(confusion([(c, c) for c in L]))
    for name in ("precision", "recall", "specificity", "f1"):
        np.testing.assert_array_equal(getattr(m, name), 100.0)
    assert m.accuracy == 100.0
    assert not any(u.any() for u in m.undefined.values())


def test_metrics_absent_class_flagged():
    m = metrics(confusion([(c, c) for c in (L.N, L.AS, L.MR, L.MS)]))
    k = int(L.MVP)
    assert m.precision[k] == 0.0 and m.recall[k] == 0.0 and m.f1[k] == 0.0
    assert m.undefined["precision"][k] and m.undefined["recall"][k] and m.undefined["f1"][k]
    assert m.specificity[k] == 100.0 and not m.undefined["specificity"][k]
    assert not m.undefined["precision"][:k].any()


def test_metrics_hand_values():
    counts = np.diag([8, 9, 10, 7, 6])
    counts[0, 1] = 2   # two N predicted as AS
    m = metrics(ConfusionMatrix(counts))
    assert m.recall[0] == pytest.approx(80.0)
    assert m.precision[1] == pytest.approx(100 * 9 / 11)
    assert m.specificity[1] == pytest.approx(100 * 31 / 33)
    assert m.accuracy == pytest.approx(100 * 40 / 42)


def test_metrics_empty_rejected():
    with pytest.raises(ValueError):
        metrics(ConfusionMatrix(np.zeros((5, 5))))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 50))
def test_metric_identities(seed, high):
    cm = random_cm(seed, high)
    if cm.total == 0:
        return
    tp, fn, fp, tn = cm.one_vs_rest()
    np.testing.assert_array_equal(tp + fn, cm.counts.sum(axis=1))
    np.testing.assert_array_equal(tp + fp, cm.counts.sum(axis=0))
    np.testing.assert_array_equal(tp + tn + fp + fn, cm.total)
    m = metrics(cm)
    for k in range(5):
        P, R = m.precision[k], m.recall[k]
        if P + R > 0:
            assert abs(m.f1[k] - 2 * P * R / (P + R)) <= 1e-9
    assert abs(m.accuracy - 100 * np.trace(cm.counts) / cm.total) <= 1e-9
    for name in ("precision", "recall", "specificity", "f1"):
        v = getattr(m, name)
        assert v.min() - 1e-12 <= m.macro(name) <= v.max() + 1e-12
        assert np.all((v >= 0) & (v <= 100))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.permutations(range(5)))
def test_accuracy_relabel_invariant(seed, perm):
    cm = random_cm(seed)
    if cm.total == 0:
        return
    p = np.asarray(perm)
    permuted = np.empty_like(cm.counts)
    permuted[np.ix_(p, p)] = cm.counts
    assert metrics(ConfusionMatrix(permuted)).accuracy == pytest.approx(metrics(cm).accuracy, abs=1e-12)


# ------------------------------------------------------------------ splits

@pytest.mark.parametrize("stratified", [True, False])
def test_split_partition(stratified):
    y = np.repeat(np.arange(5), 7)
    rng = np.random.default_rng(0)
    for _ in range(20):
        tr, te = split_indices(y, 0.6, rng, stratified)
        assert not set(tr) & set(te)
        assert sorted(np.concatenate([tr, te])) == list(range(len(y)))
    if stratified:
        assert all(np.sum(y[tr] == c) == 4 for c in range(5))
    else:
        assert len(tr) == 21


def test_split_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="at least 2"):
        split_indices([0, 0, 1], 0.5, rng)
    with pytest.raises(ValueError):
        split_indices([0, 1, 0, 1], 1.0, rng)


def test_run_seed_distinct():
    seeds = {run_seed(42, r) for r in range(100)}
    assert len(seeds) == 100 and run_seed(42, 3) == run_seed(42, 3)


# ---------------------------------------------------------- repeated runs

def _toy_dataset(per_class=4):
    spec = tiny_spec("OneD_LSTM")
    rng = np.random.default_rng(0)
    data = []
    for c in range(5):
        for _ in range(per_class):
            m = 0.05 * rng.random((4, 8))
            m[c % 4, c:c + 3] += 0.5
            data.append((m, c))
    return spec, data


def test_repeated_eval_single_and_aggregate(tmp_path):
    spec, data = _toy_dataset()
    cfg = TrainConfig(max_epochs=3, batch_size=8)
    one = repeated_eval(data, spec, cfg, n_runs=1, train_fraction=0.5, seed=1)
    assert len(one.runs) == 1 and np.all(one.std("precision") == 0)
    rep = repeated_eval(data, spec, cfg, n_runs=3, train_fraction=0.5, seed=1)
    assert rep.runs[0].accuracy == one.runs[0].accuracy
    for tr, te in rep.splits:
        assert not set(tr) & set(te) and len(tr) + len(te) == len(data)
    acc = [r.accuracy for r in rep.runs]
    assert rep.mean("accuracy") == pytest.approx(np.mean(acc))
    assert rep.std("accuracy") == pytest.approx(np.std(acc))
    np.testing.assert_allclose(rep.mean("f1"), np.mean([r.f1 for r in rep.runs], axis=0))

    rep.to_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["n_runs"] == 3 and d["summary"]["accuracy"]["mean"] == pytest.approx(np.mean(acc))
    rep.per_class_csv(tmp_path / "c.csv", ["seed=1"])
    rows = list(csv.reader(l for l in (tmp_path / "c.csv").read_text().splitlines() if not l.startswith("#")))
    assert [r[0] for r in rows[1:]] == ["N", "AS", "MR", "MS", "MVP", "MACRO", "ACCURACY"]
    rep.per_run_csv(tmp_path / "p.csv")
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 4


def test_repeated_eval_deterministic_and_parallel():
    spec, data = _toy_dataset()
    cfg = TrainConfig(max_epochs=2, batch_size=8)
    a = repeated_eval(data, spec, cfg, 2, 0.5, seed=5)
    b = repeated_eval(data, spec, cfg, 2, 0.5, seed=5, workers=2)
    assert [r.accuracy for r in a.runs] == [r.accuracy for r in b.runs]
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.splits, b.splits))


def test_repeated_eval_preconditions():
    spec, data = _toy_dataset()
    with pytest.raises(ValueError):
        repeated_eval(data, spec, TrainConfig(max_epochs=1), 0, 0.5, 0)
    with pytest.raises(ValueError):
        repeated_eval(data[:5], spec, TrainConfig(max_epochs=1), 1, 0.5, 0)


def test_accuracy_curve_csv(tmp_path):
    rep = EvalReport([metrics(confusion([(c, c) for c in L]))])
    bad = EvalReport([metrics(confusion([(L.N, L.AS)] + [(c, c) for c in L]))])
    write_accuracy_curve(tmp_path / "a.csv", [(3, 0.5, "OneD_LSTM", "ADAM", bad), (1, 0.5, "OneD_LSTM", "ADAM", rep)],
                         ["seed=0"])
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[1].startswith("j,beta,alpha")
    assert lines[2].startswith("1,2,0.5,OneD_LSTM,ADAM,1,100.0000")
    assert lines[3].startswith("3,8,")
