import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import mutual_info_score

from attrdis import analysis as A


# -- counting oracle ---------------------------------------------------------------

def brute_metrics(pred, y):
    n, C = len(y), len(y[0])
    scores = []
    for s in range(C):
        P = sum(y[i][s] for i in range(n))
        N = n - P
        tp = sum(1 for i in range(n) if pred[i][s] and y[i][s])
        tn = sum(1 for i in range(n) if not pred[i][s] and not y[i][s])
        tpr = tp / P if P else 1.0
        tnr = tn / N if N else 1.0
        scores.append((tpr + tnr) / 2)
    precs, recs = [], []
    for i in range(n):
        ps = {s for s in range(C) if pred[i][s]}
        ts = {s for s in range(C) if y[i][s]}
        if not ps and not ts:
            precs.append(1.0)
            recs.append(1.0)
            continue
        precs.append(len(ps & ts) / len(ps) if ps else 0.0)
        recs.append(len(ps & ts) / len(ts) if ts else 0.0)
    p, r = sum(precs) / n, sum(recs) / n
    return sum(scores) / C, p, r, (2 * p * r / (p + r) if p + r else 0.0)


def test_exhaustive_three_by_two():
    cases = 0
    for bits in itertools.product([0, 1], repeat=12):
        pred = np.array(bits[:6]).reshape(3, 2)
        y = np.array(bits[6:]).reshape(3, 2)
        mA, _ = A.mean_accuracy(pred.astype(float), y)
        p, r, f1, _ = A.instance_metrics(pred.astype(float), y)
        assert (mA, p, r, f1) == brute_metrics(pred.tolist(), y.tolist())
        cases += 1
    assert cases == 4096


def test_mean_accuracy_examples():
    y = np.array([[1], [0], [1], [0]])
    assert A.mean_accuracy(y.astype(float), y)[0] == 1.0
    mA, rec = A.mean_accuracy(np.ones((4, 1)), y)
    assert rec[0].balanced == 0.5 and (rec[0].tpr, rec[0].tnr) == (1.0, 0.0)
    mA, rec = A.mean_accuracy(np.array([[1.0], [1.0], [0.0], [0.0]]), y)
    assert (rec[0].tpr, rec[0].tnr, mA) == (0.5, 0.5, 0.5)


def test_threshold_is_strict():
    y = np.array([[1], [0]])
    mA, rec = A.mean_accuracy(np.array([[0.5], [0.2]]), y)
    assert rec[0].tpr == 0.0
    with pytest.raises(ValueError):
        A.mean_accuracy(np.ones((2, 1)), y, threshold=1.0)


def test_missing_side_flagged():
    _, rec = A.mean_accuracy(np.array([[0.9], [0.1]]), np.array([[0], [0]]))
    assert rec[0].tpr == 1.0 and rec[0].flag == "no_positive"
    _, rec = A.mean_accuracy(np.array([[0.9], [0.1]]), np.array([[1], [1]]))
    assert rec[0].tnr == 1.0 and rec[0].flag == "no_negative"


def test_instance_examples():
    y = np.array([[1, 1, 0, 0], [0, 1, 1, 0]])
    assert A.instance_metrics(y.astype(float), y)[:3] == (1.0, 1.0, 1.0)
    p, r, f1, _ = A.instance_metrics(np.array([[0, 0, 1, 1]], float), np.array([[0, 1, 1, 0]]))
    assert (p, r, f1) == (0.5, 0.5, 0.5)
    p, r, f1, flags = A.instance_metrics(np.zeros((1, 3)), np.zeros((1, 3), int))
    assert (p, r, f1) == (1.0, 1.0, 1.0) and flags["both_empty"] == 1


def test_report_invariants():
    rng = np.random.default_rng(0)
    post, y = rng.random((50, 6)), rng.integers(0, 2, (50, 6))
    rep = A.metrics_report(post, y)
    assert rep.mA == pytest.approx(np.mean([(a.tpr + a.tnr) / 2 for a in rep.per_attribute]), abs=1e-15)
    assert rep.f1 == pytest.approx(2 * rep.precision * rep.recall / (rep.precision + rep.recall), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_duplication_and_order_invariance(seed):
    rng = np.random.default_rng(seed)
    post, y = rng.random((12, 3)), rng.integers(0, 2, (12, 3))
    mA = A.mean_accuracy(post, y)[0]
    assert A.mean_accuracy(np.vstack([post, post]), np.vstack([y, y]))[0] == pytest.approx(mA, abs=1e-15)
    perm = rng.permutation(12)
    a, b = A.instance_metrics(post, y)[:3], A.instance_metrics(post[perm], y[perm])[:3]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_group_accuracy_is_mean_balanced_accuracy():
    y = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0, 0]])
    pred = np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1], [1, 0, 0]])
    # attr0: tpr 1, tnr 1/2; attr1: tpr 0, tnr 1; attr2: 1, 1
    assert A.group_accuracy(pred, y, [0, 1, 2]) == pytest.approx((0.75 + 0.5 + 1.0) / 3)


# -- MI ------------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), bins=st.integers(2, 10))
def test_binned_mi_matches_contingency_oracle(seed, bins):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=300)
    y = (scores + rng.normal(size=300) > 0).astype(float)
    b = (np.argsort(np.argsort(scores, kind="stable"), kind="stable") * bins) // 300
    assert A.binned_mi(scores, y, bins) == pytest.approx(mutual_info_score(b, y), abs=1e-12)


def test_binned_mi_ties_share_a_bin():
    scores = np.array([0.0] * 6 + [1.0] * 2)
    y = np.array([0, 1, 0, 1, 0, 1, 1, 1], float)
    # two bins by value: {0,...} and {1,1}
    assert A.binned_mi(scores, y, 4) == pytest.approx(mutual_info_score(scores, y), abs=1e-15)


def test_mi_null_below_threshold():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(10_000, 6))
    y = rng.integers(0, 2, 10_000)
    mi, _, deg = A.mi_probe(f, y, bins=8, seed=1)
    assert 0.0 <= mi <= 0.02 and not deg


def test_mi_deterministic_channel_is_ln2():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 4000)
    f = np.repeat(y[:, None].astype(float), 5, axis=1)
    mi, acc, _ = A.mi_probe(f, y, bins=8, seed=0)
    assert abs(mi - math.log(2)) < 0.02 and acc == 1.0


def test_mi_degenerate_target_flagged():
    f = np.random.default_rng(2).normal(size=(200, 3))
    mi, _, deg = A.mi_probe(f, np.ones(200), bins=8)
    assert mi == 0.0 and deg


def test_mi_errors():
    with pytest.raises(ValueError):
        A.mi_probe(np.zeros((50, 2)), np.zeros(50))
    with pytest.raises(ValueError):
        A.mi_probe(np.zeros((200, 2)), np.zeros(200), bins=1)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mi_bounds(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, (400, 3))
    f = y @ rng.normal(size=(3, 4)) + rng.normal(size=(400, 4)) * rng.uniform(0.1, 3)
    mi, _, _ = A.mi_probe(f, y, bins=8, seed=seed)
    assert np.all(mi >= -A.MI_EPS) and np.all(mi <= math.log(2) + A.MI_EPS)


def test_mi_table_layout_and_null():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 2, (2000, 3))
    # slot s carries label s only
    parts = np.stack([labels[:, [s]] * 2.0 + rng.normal(size=(2000, 4)) * 0.5 for s in range(3)], axis=1)
    est = A.mi_table(parts, labels, bins=8, seed=0)
    assert est.mi.shape == (3, 3)
    assert est.on_target_mean() > 0.3
    assert est.off_target_mean() < 0.02 and est.null_mean() < 0.02
    assert "target,feature" in A.mi_csv(est).splitlines()[0]


# -- exclusive groups ------------------------------------------------------------

def test_robust_b_examples():
    post = np.array([[0.2, 0.9, 0.4, 0.7], [0.5, 0.5, 0.1, 0.2]])
    out = A.robust_b_rectify(post, [0, 1, 2])
    np.testing.assert_array_equal(out, [[0, 1, 0, 1], [1, 0, 0, 0]])
    with pytest.raises(ValueError):
        A.robust_b_rectify(post, [])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_robust_b_one_hot_and_local(seed):
    rng = np.random.default_rng(seed)
    post = rng.random((20, 6))
    group = sorted(rng.choice(6, 3, replace=False).tolist())
    out = A.robust_b_rectify(post, group)
    assert np.all(out[:, group].sum(axis=1) == 1)
    rest = [s for s in range(6) if s not in group]
    np.testing.assert_array_equal(out[:, rest], post[:, rest] > 0.5)


def test_robust_a_separable_toy():
    rng = np.random.default_rng(0)
    cls = rng.integers(0, 2, 400)
    f = np.c_[np.where(cls == 1, 2.0, -2.0) + rng.normal(size=400) * 0.1, rng.normal(size=400)]
    labels = np.c_[cls == 0, cls == 1].astype(int)
    head = A.robust_a_head(f[:200], labels[:200], [0, 1], seed=0)
    pred = head.predict(f[200:])
    assert np.all(pred.sum(axis=1) == 1)
    assert A.group_accuracy(pred, labels[200:], [0, 1]) == 1.0


def test_robust_a_excludes_non_exclusive_rows():
    f = np.random.default_rng(1).normal(size=(6, 2))
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0], [1, 0], [0, 1]])
    head = A.robust_a_head(f, labels, [0, 1], steps=5)
    assert head.excluded == 2
    with pytest.raises(ValueError):
        A.robust_a_head(f, np.tile([1, 0], (6, 1)), [0, 1])


def test_equal_frequency_weights_match_unweighted():
    classes = np.array([0, 1, 2, 0, 1, 2])
    w = A.inverse_frequency_weights(classes, 3)
    np.testing.assert_array_equal(w, np.ones(3))
    rng = np.random.default_rng(0)
    Z, W, b = rng.normal(size=(6, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    assert A.softmax_head_loss(Z, classes, W, b, w).item() == A.softmax_head_loss(Z, classes, W, b).item()


def test_inverse_frequency_weights_balance_classes():
    classes = np.array([0] * 6 + [1] * 3 + [2])
    w = A.inverse_frequency_weights(classes, 3)
    np.testing.assert_allclose(w * np.bincount(classes), 10 / 3)


# -- serialization -----------------------------------------------------------------

def test_csv_headers_and_digits():
    rng = np.random.default_rng(0)
    rep = A.metrics_report(rng.random((10, 2)), rng.integers(0, 2, (10, 2)))
    lines = A.metrics_csv({"test": rep}).splitlines()
    assert lines[0] == "split,threshold,mA,precision,recall,f1"
    assert float(lines[1].split(",")[2]) == rep.mA
    pa = A.per_attribute_csv({"test": rep}).splitlines()
    assert pa[0] == "split,attribute,tpr,tnr,accuracy,positive_ratio,flag" and len(pa) == 3
    assert "mA=" in A.report_text(rep)
